//! Multi-branch decision-feedback detection with constrained MMSE filters.
//!
//! Each branch detects the streams in its own order. The `p`-th stream of a
//! branch may only cancel streams the branch has already decided, which is
//! encoded as a shape constraint `S·f = 0` on the feedback filter. The
//! feedforward filter acts either on `r_IQ` or on the augmented `[r_IQ; r_IQ*]`
//! depending on [`Domain`], so the same code serves the widely-linear detector
//! and its linear counterpart.
//!
//! For a given branch and stream the coupled pair
//!
//! ```text
//! w = R⁻¹ (p_j + Q f)
//! f = (β/σ_s²) Π Qᴴ w
//! ```
//!
//! is solved jointly: substituting `f` gives `(R − (β/σ_s²) Q Π Qᴴ) w = p_j`.

use log::warn;
use num_complex::Complex64;
use thiserror::Error;

use crate::numerics::{
    hermitian_solve, pseudo_inverse, CMatrix, CVector, NumericsError, ONE, ZERO,
};
use crate::signal::{distorted_residual, Domain, FilterStatistics, Modulation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MbdfError {
    #[error("stream position {position} out of range 1..={streams}")]
    Position { position: usize, streams: usize },
    #[error("branch {branch} out of range 1..={branches}")]
    Branch { branch: usize, branches: usize },
    #[error("order is not a permutation of 0..{0}")]
    Order(usize),
    #[error("beta {0} outside [0, 1]")]
    Beta(f64),
    #[error("observation has {got} rows, filters expect {expected}")]
    Observation { got: usize, expected: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Zero-forcing pattern of one feedback filter.
///
/// `feedback[k]` is true when the tap on stream `k` may be nonzero, i.e. `k`
/// was decided earlier in the branch. The constraint matrix `S` is the 0/1
/// diagonal with ones on the remaining taps, so `S·f = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeConstraint {
    pub stream: usize,
    pub branch: usize,
    pub position: usize,
    feedback: Vec<bool>,
}

impl ShapeConstraint {
    pub fn streams(&self) -> usize {
        self.feedback.len()
    }

    pub fn allows(&self, k: usize) -> bool {
        self.feedback[k]
    }

    /// `S`: ones on the taps forced to zero.
    pub fn matrix(&self) -> CMatrix {
        let n = self.streams();
        CMatrix::from_fn(n, n, |i, j| {
            if i == j && !self.feedback[i] {
                ONE
            } else {
                ZERO
            }
        })
    }

    /// Complement of [`Self::matrix`]: ones on the taps that may cancel.
    pub fn feedback_mask(&self) -> CMatrix {
        let n = self.streams();
        CMatrix::from_fn(n, n, |i, j| {
            if i == j && self.feedback[i] {
                ONE
            } else {
                ZERO
            }
        })
    }
}

/// Constraint for the stream detected at 1-based `position` of 1-based
/// `branch`, whose detection order is `order`.
pub fn build_shape_constraint(
    position: usize,
    branch: usize,
    order: &[usize],
) -> Result<ShapeConstraint, MbdfError> {
    let n = order.len();
    check_permutation(order)?;
    if position == 0 || position > n {
        return Err(MbdfError::Position {
            position,
            streams: n,
        });
    }
    if branch == 0 {
        return Err(MbdfError::Branch {
            branch,
            branches: 0,
        });
    }
    let mut feedback = vec![false; n];
    for &k in &order[..position - 1] {
        feedback[k] = true;
    }
    Ok(ShapeConstraint {
        stream: order[position - 1],
        branch,
        position,
        feedback,
    })
}

fn check_permutation(order: &[usize]) -> Result<(), MbdfError> {
    let mut seen = vec![false; order.len()];
    for &k in order {
        if k >= order.len() || seen[k] {
            return Err(MbdfError::Order(order.len()));
        }
        seen[k] = true;
    }
    Ok(())
}

/// `Π = I − Sᴴ (Sᴴ S)⁺ S`.
pub fn projection_matrix(s: &CMatrix) -> CMatrix {
    let n = s.ncols();
    let sh = s.adjoint();
    CMatrix::identity(n, n) - &sh * pseudo_inverse(&(&sh * s)) * s
}

/// Per-branch rearrangement of a base order: identity for the first branch,
/// reversal for the last, and cyclic left shifts by `branch − 2` in between.
pub fn branch_permutation(
    branch: usize,
    branches: usize,
    n: usize,
) -> Result<Vec<usize>, MbdfError> {
    if branch == 0 || branch > branches {
        return Err(MbdfError::Branch { branch, branches });
    }
    let mut p: Vec<usize> = (0..n).collect();
    if branch == 1 || n == 0 {
        return Ok(p);
    }
    if branch == branches {
        p.reverse();
    } else {
        p.rotate_left((branch - 2) % n);
    }
    Ok(p)
}

/// Base orderings per branch from per-stream MMSE values.
///
/// Branch 1 sorts by ascending MMSE. Every other branch uses the spread order:
/// position `j` takes the unused stream maximizing `Σ_{q<j} |MMSE_n − MMSE_{o_q}|`.
/// Ties go to the lowest stream index in both rules.
pub fn order_streams(mmse: &[f64], branches: usize) -> Vec<Vec<usize>> {
    let mut ascending: Vec<usize> = (0..mmse.len()).collect();
    ascending.sort_by(|&a, &b| mmse[a].total_cmp(&mmse[b]).then(a.cmp(&b)));
    let spread = spread_order(mmse);
    (0..branches.max(1))
        .map(|l| {
            if l == 0 {
                ascending.clone()
            } else {
                spread.clone()
            }
        })
        .collect()
}

fn spread_order(mmse: &[f64]) -> Vec<usize> {
    let n = mmse.len();
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..n).filter(|&c| !used[c]) {
            let score: f64 = order
                .iter()
                .map(|&q: &usize| (mmse[cand] - mmse[q]).abs())
                .sum();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((cand, score));
            }
        }
        let (pick, _) = best.expect("at least one unused stream");
        used[pick] = true;
        order.push(pick);
    }
    order
}

/// Detection orders actually run by each branch: branch 1 is the ascending
/// MMSE order, the last branch its reversal, and branches in between cyclic
/// shifts of the spread order.
pub fn detection_orders(mmse: &[f64], branches: usize) -> Vec<Vec<usize>> {
    let base = order_streams(mmse, branches);
    let n = mmse.len();
    (1..=branches)
        .map(|l| {
            let source = if l == branches && l > 1 {
                &base[0]
            } else {
                &base[l - 1]
            };
            let perm = branch_permutation(l, branches, n).expect("branch in range");
            perm.iter().map(|&p| source[p]).collect()
        })
        .collect()
}

/// Feedforward/feedback pair of one stream in one branch.
#[derive(Debug, Clone)]
pub struct StreamFilter {
    pub constraint: ShapeConstraint,
    pub w: CVector,
    pub f: CVector,
    pub mmse: f64,
    pub regularized: bool,
}

impl StreamFilter {
    pub fn stream(&self) -> usize {
        self.constraint.stream
    }
}

/// `σ_s² − wᴴ R w + σ_s² fᴴ f`, clamped at zero.
pub fn stream_mmse(w: &CVector, f: &CVector, stats: &FilterStatistics) -> f64 {
    let sp = stats.symbol_power;
    let quad = w.dotc(&(&stats.covariance * w)).re;
    let value = sp - quad + sp * f.norm_squared();
    if value < -1e-8 {
        warn!("negative MMSE {value:.3e} clamped to zero");
    }
    value.max(0.0)
}

/// Solves the coupled feedforward/feedback equations for one constraint.
pub fn design_filter(
    stats: &FilterStatistics,
    constraint: &ShapeConstraint,
    beta: f64,
) -> Result<StreamFilter, MbdfError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MbdfError::Beta(beta));
    }
    let j = constraint.stream;
    let sp = stats.symbol_power;
    let proj = projection_matrix(&constraint.matrix());
    let q = &stats.cross;
    let qh = q.adjoint();
    let gain = beta / sp;
    let system = &stats.covariance - (q * &proj * &qh).scale(gain);
    let system = (&system + system.adjoint()).scale(0.5);
    let rhs = CMatrix::from_column_slice(stats.taps(), 1, stats.cross_column(j).as_slice());
    let sol = hermitian_solve(&system, &rhs)?;
    if sol.regularized {
        warn!("filter system for stream {j} needed ridge regularization");
    }
    let w: CVector = sol.x.column(0).into_owned();
    let f: CVector = (&proj * (&qh * &w)).scale(gain);
    let mmse = stream_mmse(&w, &f, stats);
    Ok(StreamFilter {
        constraint: constraint.clone(),
        w,
        f,
        mmse,
        regularized: sol.regularized,
    })
}

/// Per-stream MMSE of the unconstrained feedforward-only filter, used to order streams.
pub fn linear_mmse_values(stats: &FilterStatistics) -> Result<Vec<f64>, MbdfError> {
    let sol = hermitian_solve(&stats.covariance, &stats.cross)?;
    let zero = CVector::zeros(stats.streams());
    Ok((0..stats.streams())
        .map(|j| stream_mmse(&sol.x.column(j).into_owned(), &zero, stats))
        .collect())
}

#[derive(Debug, Clone)]
pub struct Branch {
    /// `order[p]` is the stream detected at position `p`.
    pub order: Vec<usize>,
    /// Filters in detection order.
    pub filters: Vec<StreamFilter>,
}

/// All filters of all branches for one channel realization.
#[derive(Debug, Clone)]
pub struct BranchFilterBank {
    pub domain: Domain,
    pub beta: f64,
    pub symbol_power: f64,
    pub ordering_mmse: Vec<f64>,
    pub branches: Vec<Branch>,
}

impl BranchFilterBank {
    pub fn streams(&self) -> usize {
        self.ordering_mmse.len()
    }

    pub fn taps(&self) -> usize {
        self.branches[0].filters[0].w.len()
    }

    /// Norm-scaling parameter of the feedback filter, known only at the two
    /// endpoints `β = 0` (no feedback) and `β = 1` (full cancellation).
    pub fn gamma(&self) -> Option<f64> {
        if self.beta == 0.0 {
            Some(0.0)
        } else if self.beta == 1.0 {
            Some(1.0)
        } else {
            None
        }
    }

    pub fn any_regularized(&self) -> bool {
        self.branches
            .iter()
            .flat_map(|b| &b.filters)
            .any(|f| f.regularized)
    }

    /// Bank with explicit feedforward filters and no feedback, detected in
    /// natural order (used for the matched-filter receiver).
    pub fn feedforward_only(domain: Domain, symbol_power: f64, w: Vec<CVector>) -> Self {
        let n = w.len();
        let order: Vec<usize> = (0..n).collect();
        let filters = w
            .into_iter()
            .enumerate()
            .map(|(j, w)| StreamFilter {
                constraint: build_shape_constraint(j + 1, 1, &order).expect("identity order"),
                w,
                f: CVector::zeros(n),
                mmse: f64::NAN,
                regularized: false,
            })
            .collect();
        Self {
            domain,
            beta: 0.0,
            symbol_power,
            ordering_mmse: vec![f64::NAN; n],
            branches: vec![Branch { order, filters }],
        }
    }
}

/// Designs every branch: orders from the feedforward-only MMSE, then one
/// constrained filter pair per (branch, position).
pub fn design_branch_filters(
    stats: &FilterStatistics,
    branches: usize,
    beta: f64,
) -> Result<BranchFilterBank, MbdfError> {
    let mmse = linear_mmse_values(stats)?;
    design_with_orders(stats, detection_orders(&mmse, branches), beta, mmse)
}

/// Same as [`design_branch_filters`] with caller-supplied detection orders.
pub fn design_with_orders(
    stats: &FilterStatistics,
    orders: Vec<Vec<usize>>,
    beta: f64,
    ordering_mmse: Vec<f64>,
) -> Result<BranchFilterBank, MbdfError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MbdfError::Beta(beta));
    }
    let branches = orders
        .into_iter()
        .enumerate()
        .map(|(l, order)| {
            let filters = (1..=order.len())
                .map(|p| {
                    let c = build_shape_constraint(p, l + 1, &order)?;
                    design_filter(stats, &c, beta)
                })
                .collect::<Result<Vec<_>, MbdfError>>()?;
            Ok(Branch { order, filters })
        })
        .collect::<Result<Vec<_>, MbdfError>>()?;
    Ok(BranchFilterBank {
        domain: stats.domain,
        beta,
        symbol_power: stats.symbol_power,
        ordering_mmse,
        branches,
    })
}

/// `z = wᴴ x − fᴴ ŝ`.
pub fn detect_branch(x: &CVector, w: &CVector, f: &CVector, s_hat: &CVector) -> Complex64 {
    w.dotc(x) - f.dotc(s_hat)
}

/// Feedforward outputs `wᴴ x` for every position of a branch and every
/// column of `obs`, row `p` belonging to position `p`.
fn feedforward_outputs(branch: &Branch, obs: &CMatrix) -> CMatrix {
    let taps = obs.nrows();
    let w = CMatrix::from_fn(taps, branch.filters.len(), |i, p| branch.filters[p].w[i]);
    w.adjoint() * obs
}

/// What the feedback filter multiplies.
#[derive(Debug, Clone, Copy)]
pub enum Feedback<'a> {
    /// Hard decisions made earlier in the same branch.
    Decisions,
    /// Externally supplied symbol estimates, one column per instant.
    Soft(&'a CMatrix),
}

/// Soft outputs and hard decisions of one branch over a block.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `z[(j, t)]` for stream `j` at instant `t`.
    pub z: CMatrix,
    pub decisions: CMatrix,
}

pub fn run_branch(
    branch: &Branch,
    obs: &CMatrix,
    modulation: &Modulation,
    feedback: Feedback<'_>,
) -> BranchOutput {
    let n = branch.order.len();
    let cols = obs.ncols();
    let ff = feedforward_outputs(branch, obs);
    let mut z = CMatrix::zeros(n, cols);
    let mut decisions = CMatrix::zeros(n, cols);
    for t in 0..cols {
        for (p, filt) in branch.filters.iter().enumerate() {
            let j = filt.stream();
            let mut zt = ff[(p, t)];
            for &k in &branch.order[..p] {
                let fk = filt.f[k];
                let sk = match feedback {
                    Feedback::Decisions => decisions[(k, t)],
                    Feedback::Soft(s) => s[(k, t)],
                };
                zt -= fk.conj() * sk;
            }
            z[(j, t)] = zt;
            decisions[(j, t)] = modulation.slice(zt);
        }
    }
    BranchOutput { z, decisions }
}

/// Per-instant outcome of multi-branch detection.
#[derive(Debug, Clone)]
pub struct FrameDecision {
    pub symbols: CMatrix,
    /// 0-based index of the selected branch per instant.
    pub selected: Vec<usize>,
    /// `costs[t][l]`: Euclidean distance of branch `l` at instant `t`.
    pub costs: Vec<Vec<f64>>,
}

/// Runs all branches with hard decision feedback and keeps, per instant, the
/// branch whose decisions best explain `r_IQ` through the imbalance-distorted
/// channel `(A1 H, A2 H*)`. Ties go to the lowest branch.
pub fn detect_frame(
    bank: &BranchFilterBank,
    obs: &CMatrix,
    r_iq: &CMatrix,
    distorted: (&CMatrix, &CMatrix),
    modulation: &Modulation,
) -> Result<FrameDecision, MbdfError> {
    if obs.nrows() != bank.taps() {
        return Err(MbdfError::Observation {
            got: obs.nrows(),
            expected: bank.taps(),
        });
    }
    let outputs: Vec<BranchOutput> = bank
        .branches
        .iter()
        .map(|b| run_branch(b, obs, modulation, Feedback::Decisions))
        .collect();
    let (g1, g2) = distorted;
    let cols = obs.ncols();
    let n = bank.streams();
    let mut symbols = CMatrix::zeros(n, cols);
    let mut selected = Vec::with_capacity(cols);
    let mut costs = Vec::with_capacity(cols);
    for t in 0..cols {
        let r = r_iq.column(t).into_owned();
        let c: Vec<f64> = outputs
            .iter()
            .map(|o| {
                let s: Vec<Complex64> = o.decisions.column(t).iter().copied().collect();
                distorted_residual(g1, g2, &r, &s).sqrt()
            })
            .collect();
        let mut best = 0;
        for (l, &cl) in c.iter().enumerate() {
            if cl < c[best] {
                best = l;
            }
        }
        // Final decision re-slices the winning branch's soft outputs.
        for j in 0..n {
            symbols[(j, t)] = modulation.slice(outputs[best].z[(j, t)]);
        }
        selected.push(best);
        costs.push(c);
    }
    Ok(FrameDecision {
        symbols,
        selected,
        costs,
    })
}

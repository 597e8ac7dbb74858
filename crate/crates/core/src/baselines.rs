//! Reference receivers: matched filter, linear MMSE, (WL-)SIC, likelihood
//! ascent search, and an exhaustive ML search for tiny systems.

use num_complex::Complex64;
use thiserror::Error;

use crate::mbdf::{design_branch_filters, detect_frame, linear_mmse_values, MbdfError};
use crate::numerics::{hermitian_solve, CMatrix, CVector, NumericsError, ZERO};
use crate::signal::{distorted_residual, Domain, FilterStatistics, IqImbalance, Modulation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("effective channel of stream {0} has zero norm")]
    ZeroColumn(usize),
    #[error("exhaustive search limited to 4 streams, got {0}")]
    TooManyStreams(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mbdf(#[from] MbdfError),
}

/// Matched-filter taps `A1 h_j / ‖A1 h_j‖²` on `r_IQ`.
pub fn rmf_filters(h: &CMatrix, iq: &IqImbalance) -> Result<Vec<CVector>, BaselineError> {
    let (g1, _) = iq.distorted_channels(h);
    (0..g1.ncols())
        .map(|j| {
            let col = g1.column(j).into_owned();
            let e = col.norm_squared();
            if e == 0.0 {
                Err(BaselineError::ZeroColumn(j))
            } else {
                Ok(col.unscale(e))
            }
        })
        .collect()
}

pub fn rmf_detect(
    r_iq: &CMatrix,
    h: &CMatrix,
    iq: &IqImbalance,
    modulation: &Modulation,
) -> Result<CMatrix, BaselineError> {
    let taps = rmf_filters(h, iq)?;
    let w = CMatrix::from_columns(&taps);
    let z = w.adjoint() * r_iq;
    Ok(z.map(|v| modulation.slice(v)))
}

/// Feedforward-only MMSE outputs `w_jᴴ x` with `w_j = R⁻¹ q_j`.
pub fn mmse_outputs(obs: &CMatrix, stats: &FilterStatistics) -> Result<CMatrix, BaselineError> {
    let w = hermitian_solve(&stats.covariance, &stats.cross)?.x;
    Ok(w.adjoint() * obs)
}

pub fn mmse_detect(
    obs: &CMatrix,
    stats: &FilterStatistics,
    modulation: &Modulation,
) -> Result<CMatrix, BaselineError> {
    Ok(mmse_outputs(obs, stats)?.map(|v| modulation.slice(v)))
}

/// Successive interference cancellation in ascending-MMSE order.
///
/// After each stage the decided stream's contribution `q_k ŝ_k / σ_s²` is
/// removed from the observation and the next filter is the MMSE filter of
/// the deflated covariance `R − Σ q_k q_kᴴ / σ_s²`. In the widely-linear
/// domain `q_k` is the augmented cross-correlation, so the subtraction runs
/// through the imbalance-distorted channel.
pub fn sic_detect(
    obs: &CMatrix,
    stats: &FilterStatistics,
    modulation: &Modulation,
) -> Result<CMatrix, BaselineError> {
    let n = stats.streams();
    let sp = stats.symbol_power;
    let mmse = linear_mmse_values(stats)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mmse[a].total_cmp(&mmse[b]).then(a.cmp(&b)));

    let mut residual = obs.clone();
    let mut covariance = stats.covariance.clone();
    let mut decisions = CMatrix::zeros(n, obs.ncols());
    for &j in &order {
        let q = stats.cross_column(j);
        let rhs = CMatrix::from_column_slice(q.len(), 1, q.as_slice());
        let w: CVector = hermitian_solve(&covariance, &rhs)?.x.column(0).into_owned();
        for t in 0..obs.ncols() {
            decisions[(j, t)] = modulation.slice(w.dotc(&residual.column(t)));
        }
        for t in 0..obs.ncols() {
            let s = decisions[(j, t)] / sp;
            let mut col = residual.column_mut(t);
            col.axpy(-s, &q, Complex64::new(1.0, 0.0));
        }
        covariance -= (&q * q.adjoint()).unscale(sp);
    }
    Ok(decisions)
}

/// One-symbol-update likelihood ascent from `initial`, per instant.
///
/// Each sweep applies the single symbol change with the largest decrease of
/// `‖r_IQ − A1 H ŝ − A2 H* ŝ*‖²` and stops at a local minimum.
pub fn las_detect(
    r_iq: &CMatrix,
    h: &CMatrix,
    iq: &IqImbalance,
    modulation: &Modulation,
    initial: &CMatrix,
) -> CMatrix {
    let (g1, g2) = iq.distorted_channels(h);
    let mut out = initial.clone();
    for t in 0..r_iq.ncols() {
        let mut s: Vec<Complex64> = initial.column(t).iter().copied().collect();
        let mut e = r_iq.column(t).into_owned();
        for (j, &sj) in s.iter().enumerate() {
            e -= g1.column(j) * sj + g2.column(j) * sj.conj();
        }
        let mut cost = e.norm_squared();
        loop {
            let mut best: Option<(usize, Complex64, CVector, f64)> = None;
            for j in 0..s.len() {
                for &a in modulation.points() {
                    if a == s[j] {
                        continue;
                    }
                    let d = a - s[j];
                    let cand = &e - g1.column(j) * d - g2.column(j) * d.conj();
                    let c = cand.norm_squared();
                    let target = best.as_ref().map_or(cost, |b| b.3);
                    if c < target {
                        best = Some((j, a, cand, c));
                    }
                }
            }
            match best {
                Some((j, a, cand, c)) => {
                    s[j] = a;
                    e = cand;
                    cost = c;
                }
                None => break,
            }
        }
        for (j, &sj) in s.iter().enumerate() {
            out[(j, t)] = sj;
        }
    }
    out
}

/// Exhaustive minimum of the distorted-channel Euclidean cost. Only for up
/// to four streams; used as a test reference.
pub fn ml_detect(
    r_iq: &CMatrix,
    h: &CMatrix,
    iq: &IqImbalance,
    modulation: &Modulation,
) -> Result<CMatrix, BaselineError> {
    let n = h.ncols();
    if n > 4 {
        return Err(BaselineError::TooManyStreams(n));
    }
    let (g1, g2) = iq.distorted_channels(h);
    let m = modulation.points().len();
    let total = m.pow(n as u32);
    let mut out = CMatrix::zeros(n, r_iq.ncols());
    for t in 0..r_iq.ncols() {
        let r = r_iq.column(t).into_owned();
        let mut best = (f64::INFINITY, vec![ZERO; n]);
        for idx in 0..total {
            let s: Vec<Complex64> = (0..n)
                .map(|j| modulation.points()[(idx / m.pow(j as u32)) % m])
                .collect();
            let c = distorted_residual(&g1, &g2, &r, &s);
            if c < best.0 {
                best = (c, s);
            }
        }
        for j in 0..n {
            out[(j, t)] = best.1[j];
        }
    }
    Ok(out)
}

/// Multi-branch decision feedback on `r_IQ` alone (pseudo-covariance ignored).
pub fn mbdf_detect(
    r_iq: &CMatrix,
    stats: &FilterStatistics,
    distorted: (&CMatrix, &CMatrix),
    modulation: &Modulation,
    branches: usize,
    beta: f64,
) -> Result<CMatrix, BaselineError> {
    debug_assert_eq!(stats.domain, Domain::Linear);
    let bank = design_branch_filters(stats, branches, beta)?;
    Ok(detect_frame(&bank, r_iq, r_iq, distorted, modulation)?.symbols)
}

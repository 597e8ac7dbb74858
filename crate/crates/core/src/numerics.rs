//! Complex linear algebra and seeded randomness shared by every other module.
//!
//! Matrices are `nalgebra` dynamic matrices over `Complex64`. Only the handful
//! of operations the detectors need live here: a Hermitian solve with a ridge
//! fallback, the Moore-Penrose pseudo-inverse and circular Gaussian sampling.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use num_complex::Complex64;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix is not positive definite even after ridge regularization")]
    NotPositiveDefinite,
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// Thresholds used by [`hermitian_solve_with`]. The defaults are the ones
/// every detector uses; tests override them to probe the fallback path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveTolerances {
    /// Allowed `‖A − Aᴴ‖_F / ‖A‖_F`.
    pub hermitian_rel: f64,
    /// Allowed `‖A·X − B‖_F / (1 + ‖B‖_F)` before the ridge fallback kicks in.
    pub residual_rel: f64,
    /// Ridge is `ridge_scale · trace(A) / n`.
    pub ridge_scale: f64,
}

impl Default for SolveTolerances {
    fn default() -> Self {
        Self {
            hermitian_rel: 1e-10,
            residual_rel: 1e-8,
            ridge_scale: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: CMatrix,
    /// Set when the plain factorization failed or missed the residual bound
    /// and the ridge-regularized system was solved instead.
    pub regularized: bool,
}

pub fn hermitian_solve(a: &CMatrix, b: &CMatrix) -> Result<Solution, NumericsError> {
    hermitian_solve_with(a, b, &SolveTolerances::default())
}

/// Solves `A·X = B` for Hermitian positive semi-definite `A`.
///
/// A Cholesky factorization is tried first. If it fails, or the residual
/// exceeds the tolerance, the system `(A + εI)·X = B` with
/// `ε = ridge_scale · trace(A)/n` is solved and the result is flagged.
pub fn hermitian_solve_with(
    a: &CMatrix,
    b: &CMatrix,
    tol: &SolveTolerances,
) -> Result<Solution, NumericsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::Dimension(format!(
            "expected square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if b.nrows() != n {
        return Err(NumericsError::Dimension(format!(
            "left side is {n}x{n}, right side has {} rows",
            b.nrows()
        )));
    }
    if !a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(NumericsError::NonFinite("system matrix"));
    }
    let scale = a.norm();
    let asym = (a - a.adjoint()).norm();
    if asym > tol.hermitian_rel * scale.max(f64::MIN_POSITIVE) {
        return Err(NumericsError::NotHermitian(
            asym / scale.max(f64::MIN_POSITIVE),
        ));
    }
    if n == 0 {
        return Ok(Solution {
            x: b.clone(),
            regularized: false,
        });
    }
    // Symmetrize so the factorization sees an exactly Hermitian matrix.
    let sym = (a + a.adjoint()).scale(0.5);
    let bound = tol.residual_rel * (1.0 + b.norm());

    if let Some(chol) = Cholesky::new(sym.clone()) {
        let x = chol.solve(b);
        if !numerically_singular(&chol) && (a * &x - b).norm() <= bound {
            return Ok(Solution {
                x,
                regularized: false,
            });
        }
    }

    let trace: f64 = (0..n).map(|i| sym[(i, i)].re).sum();
    let eps = tol.ridge_scale * trace / n as f64;
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumericsError::NotPositiveDefinite);
    }
    let mut ridged = sym;
    for i in 0..n {
        ridged[(i, i)].re += eps;
    }
    let chol = Cholesky::new(ridged).ok_or(NumericsError::NotPositiveDefinite)?;
    Ok(Solution {
        x: chol.solve(b),
        regularized: true,
    })
}

/// Pivot ratio of the factor below which the matrix is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-12;

fn numerically_singular(chol: &Cholesky<Complex64, Dyn>) -> bool {
    let l = chol.l_dirty();
    let pivots = (0..l.nrows()).map(|i| l[(i, i)].norm_sqr());
    let (lo, hi) = pivots.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
        (lo.min(p), hi.max(p))
    });
    lo <= SINGULAR_PIVOT_RATIO * hi
}

/// Moore-Penrose pseudo-inverse through the SVD. Singular values below
/// `max(m, n) · σ_max · ε_machine` are treated as zero, so the zero matrix
/// maps to the zero matrix.
pub fn pseudo_inverse(a: &CMatrix) -> CMatrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 || a.iter().all(|z| *z == ZERO) {
        return CMatrix::zeros(n, m);
    }
    let svd = SVD::new(a.clone(), true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = m.max(n) as f64 * sigma_max * f64::EPSILON;
    svd.pseudo_inverse(cutoff)
        .expect("cutoff is non-negative and both factors were computed")
}

/// Reproducible random stream: one ChaCha8 generator keyed by the master seed
/// with the stream id selecting an independent ChaCha stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// One zero-mean circular complex Gaussian draw of the given variance.
    pub fn complex_normal(&mut self, variance: f64) -> Complex64 {
        let s = (0.5 * variance).sqrt();
        let re: f64 = StandardNormal.sample(&mut self.inner);
        let im: f64 = StandardNormal.sample(&mut self.inner);
        Complex64::new(s * re, s * im)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. circular complex Gaussian entries, real and imaginary parts
/// each of variance `variance / 2`.
pub fn complex_gaussian_sample(
    rng: &mut SeededRng,
    n: usize,
    variance: f64,
) -> Result<CVector, NumericsError> {
    if variance < 0.0 || variance.is_nan() {
        return Err(NumericsError::NegativeVariance(variance));
    }
    Ok(CVector::from_fn(n, |_, _| rng.complex_normal(variance)))
}

/// Same as [`complex_gaussian_sample`] but filling an `rows × cols` matrix
/// column by column.
pub fn complex_gaussian_matrix(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    variance: f64,
) -> Result<CMatrix, NumericsError> {
    if variance < 0.0 || variance.is_nan() {
        return Err(NumericsError::NegativeVariance(variance));
    }
    Ok(CMatrix::from_fn(rows, cols, |_, _| {
        rng.complex_normal(variance)
    }))
}

pub fn diag(entries: &[Complex64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_column_slice(entries))
}

/// Stacks `x` over its conjugate.
pub fn augment(x: &CMatrix) -> CMatrix {
    let (n, cols) = x.shape();
    let mut out = CMatrix::zeros(2 * n, cols);
    out.rows_mut(0, n).copy_from(x);
    out.rows_mut(n, n).copy_from(&x.conjugate());
    out
}

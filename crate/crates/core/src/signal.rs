//! Uplink multiuser channel, constellations, receiver I/Q imbalance and the
//! second-order statistics (plain and augmented) the receive filters use.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{augment, complex_gaussian_matrix, diag, CMatrix, CVector, SeededRng, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("bit count {bits} is not a multiple of {per_symbol} bits per symbol")]
    BitCount { bits: usize, per_symbol: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `users` terminals with `antennas_per_user` transmit antennas each, received
/// on `receive_antennas` base-station antennas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDims {
    pub users: usize,
    pub antennas_per_user: usize,
    pub receive_antennas: usize,
}

impl SystemDims {
    pub fn new(
        users: usize,
        antennas_per_user: usize,
        receive_antennas: usize,
    ) -> Result<Self, SignalError> {
        let dims = Self {
            users,
            antennas_per_user,
            receive_antennas,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.users == 0 || self.antennas_per_user == 0 || self.receive_antennas == 0 {
            return Err(SignalError::Dims("all counts must be at least 1".into()));
        }
        if self.receive_antennas < self.streams() {
            return Err(SignalError::Dims(format!(
                "{} receive antennas cannot separate {} streams",
                self.receive_antennas,
                self.streams()
            )));
        }
        Ok(())
    }

    /// Total number of transmitted streams, `K·N_U`.
    pub fn streams(&self) -> usize {
        self.users * self.antennas_per_user
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationKind {
    Bpsk,
    Qpsk,
}

/// Gray-labelled constellation scaled to average power `symbol_power`.
///
/// Labels are read most significant bit first. Bit value 0 maps to the
/// positive half-axis:
///
/// | kind | label | point |
/// |------|-------|-------|
/// | BPSK | 0     | `+σ_s` |
/// | BPSK | 1     | `−σ_s` |
/// | QPSK | 00    | `σ_s(+1+j)/√2` |
/// | QPSK | 01    | `σ_s(+1−j)/√2` |
/// | QPSK | 10    | `σ_s(−1+j)/√2` |
/// | QPSK | 11    | `σ_s(−1−j)/√2` |
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    kind: ModulationKind,
    symbol_power: f64,
    points: Vec<Complex64>,
}

impl Modulation {
    pub fn new(kind: ModulationKind, symbol_power: f64) -> Self {
        let a = symbol_power.sqrt();
        let points = match kind {
            ModulationKind::Bpsk => vec![Complex64::new(a, 0.0), Complex64::new(-a, 0.0)],
            ModulationKind::Qpsk => {
                let h = a / 2f64.sqrt();
                vec![
                    Complex64::new(h, h),
                    Complex64::new(h, -h),
                    Complex64::new(-h, h),
                    Complex64::new(-h, -h),
                ]
            }
        };
        Self {
            kind,
            symbol_power,
            points,
        }
    }

    pub fn qpsk() -> Self {
        Self::new(ModulationKind::Qpsk, 1.0)
    }

    pub fn bpsk() -> Self {
        Self::new(ModulationKind::Bpsk, 1.0)
    }

    pub fn kind(&self) -> ModulationKind {
        self.kind
    }

    pub fn symbol_power(&self) -> f64 {
        self.symbol_power
    }

    pub fn bits_per_symbol(&self) -> usize {
        match self.kind {
            ModulationKind::Bpsk => 1,
            ModulationKind::Qpsk => 2,
        }
    }

    /// Points in label order.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Bit `c` (0 = most significant) of `label`.
    pub fn label_bit(&self, label: usize, c: usize) -> u8 {
        ((label >> (self.bits_per_symbol() - 1 - c)) & 1) as u8
    }

    /// Symbol pseudo-power `E[s²]`: `σ_s²` for real constellations, 0 for QPSK.
    pub fn pseudo_power(&self) -> f64 {
        match self.kind {
            ModulationKind::Bpsk => self.symbol_power,
            ModulationKind::Qpsk => 0.0,
        }
    }

    pub fn map_label(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>, SignalError> {
        let c = self.bits_per_symbol();
        if !bits.len().is_multiple_of(c) {
            return Err(SignalError::BitCount {
                bits: bits.len(),
                per_symbol: c,
            });
        }
        Ok(bits
            .chunks(c)
            .map(|chunk| {
                let label = chunk
                    .iter()
                    .fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
                self.points[label]
            })
            .collect())
    }

    /// Minimum-distance label; ties go to the lowest label index.
    pub fn slice_label(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn slice(&self, z: Complex64) -> Complex64 {
        self.points[self.slice_label(z)]
    }

    pub fn demap_hard(&self, symbols: &[Complex64]) -> Vec<u8> {
        let c = self.bits_per_symbol();
        let mut out = Vec::with_capacity(symbols.len() * c);
        for &z in symbols {
            let label = self.slice_label(z);
            out.extend((0..c).map(|i| self.label_bit(label, i)));
        }
        out
    }
}

/// One flat-fading channel draw. Column `j` of `h` is the channel of stream
/// `j`; user `k` owns columns `k·N_U .. (k+1)·N_U`.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: CMatrix,
    pub noise_variance: f64,
}

/// i.i.d. unit-variance circular complex Gaussian channel. The noise variance
/// is attached later from the SNR.
pub fn generate_channel(dims: &SystemDims, rng: &mut SeededRng) -> ChannelRealization {
    let h = complex_gaussian_matrix(rng, dims.receive_antennas, dims.streams(), 1.0)
        .expect("unit variance is valid");
    ChannelRealization {
        h,
        noise_variance: 0.0,
    }
}

/// Per-antenna gain and phase mismatch and the diagonal entries of `A1`, `A2`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqImbalance {
    pub gain: Vec<f64>,
    pub phase: Vec<f64>,
    pub a1: Vec<Complex64>,
    pub a2: Vec<Complex64>,
}

impl IqImbalance {
    pub fn none(n: usize) -> Self {
        make_iq_matrices(&vec![1.0; n], &vec![0.0; n]).expect("equal lengths")
    }

    pub fn len(&self) -> usize {
        self.a1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a1.is_empty()
    }

    pub fn a1_matrix(&self) -> CMatrix {
        diag(&self.a1)
    }

    pub fn a2_matrix(&self) -> CMatrix {
        diag(&self.a2)
    }

    /// `A1·r + A2·r*` applied column by column.
    pub fn apply(&self, r: &CMatrix) -> Result<CMatrix, SignalError> {
        if r.nrows() != self.len() {
            return Err(SignalError::Shape(format!(
                "signal has {} rows, imbalance covers {} antennas",
                r.nrows(),
                self.len()
            )));
        }
        Ok(CMatrix::from_fn(r.nrows(), r.ncols(), |i, t| {
            self.a1[i] * r[(i, t)] + self.a2[i] * r[(i, t)].conj()
        }))
    }

    /// Effective channels `(A1·H, A2·H*)` seen by the symbols and their conjugates.
    pub fn distorted_channels(&self, h: &CMatrix) -> (CMatrix, CMatrix) {
        let g1 = CMatrix::from_fn(h.nrows(), h.ncols(), |i, j| self.a1[i] * h[(i, j)]);
        let g2 = CMatrix::from_fn(h.nrows(), h.ncols(), |i, j| self.a2[i] * h[(i, j)].conj());
        (g1, g2)
    }
}

/// `A1,i = (1 + g_i e^{−jφ_i})/2`, `A2,i = (1 − g_i e^{−jφ_i})/2`.
pub fn make_iq_matrices(gain: &[f64], phase: &[f64]) -> Result<IqImbalance, SignalError> {
    if gain.len() != phase.len() {
        return Err(SignalError::Shape(format!(
            "{} gains but {} phases",
            gain.len(),
            phase.len()
        )));
    }
    let (a1, a2) = gain
        .iter()
        .zip(phase)
        .map(|(&g, &p)| {
            let e = Complex64::from_polar(g, -p);
            ((1.0 + e) * 0.5, (1.0 - e) * 0.5)
        })
        .unzip();
    Ok(IqImbalance {
        gain: gain.to_vec(),
        phase: phase.to_vec(),
        a1,
        a2,
    })
}

/// Ranges for the per-antenna uniform imbalance draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceRanges {
    pub enabled: bool,
    pub gain: [f64; 2],
    pub phase_deg: [f64; 2],
}

impl Default for ImbalanceRanges {
    fn default() -> Self {
        Self {
            enabled: true,
            gain: [0.85, 1.15],
            phase_deg: [-15.0, 15.0],
        }
    }
}

impl ImbalanceRanges {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn draw(&self, n: usize, rng: &mut SeededRng) -> IqImbalance {
        if !self.enabled {
            return IqImbalance::none(n);
        }
        let gain: Vec<f64> = (0..n).map(|_| uniform(rng, self.gain)).collect();
        let phase: Vec<f64> = (0..n)
            .map(|_| uniform(rng, self.phase_deg).to_radians())
            .collect();
        make_iq_matrices(&gain, &phase).expect("equal lengths")
    }
}

fn uniform(rng: &mut SeededRng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Full second-order description of the received data for one channel draw.
///
/// `q_a` holds `E[r_a sᴴ]` column by column, so its column `j` equals `p_a[j]`.
#[derive(Debug, Clone)]
pub struct AugmentedStatistics {
    pub symbol_power: f64,
    pub symbol_pseudo_power: f64,
    pub noise_variance: f64,
    /// `E[r rᴴ]` before the imbalance.
    pub r: CMatrix,
    /// `E[r rᵀ]` before the imbalance.
    pub c: CMatrix,
    pub r_iq: CMatrix,
    pub c_iq: CMatrix,
    pub r_a: CMatrix,
    pub q_a: CMatrix,
    pub p_a: Vec<CVector>,
    /// `E[r_IQ sᴴ]`, the top half of `q_a`.
    pub q_iq: CMatrix,
}

pub fn build_second_order_stats(
    h: &CMatrix,
    modulation: &Modulation,
    noise_variance: f64,
    iq: &IqImbalance,
) -> Result<AugmentedStatistics, SignalError> {
    let n_a = h.nrows();
    if iq.len() != n_a {
        return Err(SignalError::Shape(format!(
            "channel has {n_a} rows, imbalance covers {} antennas",
            iq.len()
        )));
    }
    let sp = modulation.symbol_power();
    let pp = modulation.pseudo_power();
    let a1 = iq.a1_matrix();
    let a2 = iq.a2_matrix();

    let r = (h * h.adjoint()).scale(sp) + CMatrix::identity(n_a, n_a).scale(noise_variance);
    let c = (h * h.transpose()).scale(pp);

    let r_iq = &a1 * &r * a1.adjoint()
        + &a1 * &c * a2.adjoint()
        + &a2 * c.conjugate() * a1.adjoint()
        + &a2 * r.conjugate() * a2.adjoint();
    let c_iq = &a1 * &c * a1.transpose()
        + &a1 * &r * a2.transpose()
        + &a2 * r.conjugate() * a1.transpose()
        + &a2 * c.conjugate() * a2.transpose();

    let mut r_a = CMatrix::zeros(2 * n_a, 2 * n_a);
    r_a.view_mut((0, 0), (n_a, n_a)).copy_from(&r_iq);
    r_a.view_mut((0, n_a), (n_a, n_a)).copy_from(&c_iq);
    r_a.view_mut((n_a, 0), (n_a, n_a))
        .copy_from(&c_iq.conjugate());
    r_a.view_mut((n_a, n_a), (n_a, n_a))
        .copy_from(&r_iq.conjugate());

    // E[r_IQ sᴴ] = A1 H E[s sᴴ] + A2 H* E[s* sᴴ]; E[r_IQ* sᴴ] = A1* H* E[s* sᴴ] + A2* H E[s sᴴ].
    let h_conj = h.conjugate();
    let q_top = (&a1 * h).scale(sp) + (&a2 * &h_conj).scale(pp);
    let q_bottom = (a1.conjugate() * &h_conj).scale(pp) + (a2.conjugate() * h).scale(sp);
    let mut q_a = CMatrix::zeros(2 * n_a, h.ncols());
    q_a.rows_mut(0, n_a).copy_from(&q_top);
    q_a.rows_mut(n_a, n_a).copy_from(&q_bottom);

    let p_a = (0..h.ncols())
        .map(|j| augmented_cross_correlation(h, j, sp, pp, iq))
        .collect();

    Ok(AugmentedStatistics {
        symbol_power: sp,
        symbol_pseudo_power: pp,
        noise_variance,
        r,
        c,
        r_iq,
        c_iq,
        r_a,
        q_a,
        p_a,
        q_iq: q_top,
    })
}

/// `p_{a,j} = E[r_a s_j*]` from the stream's own channel column:
/// top `A1 h_j σ_s² + A2 h_j* p`, bottom `A1* h_j* p + A2* h_j σ_s²`.
fn augmented_cross_correlation(
    h: &CMatrix,
    j: usize,
    symbol_power: f64,
    pseudo_power: f64,
    iq: &IqImbalance,
) -> CVector {
    let n_a = h.nrows();
    DVector::from_fn(2 * n_a, |row, _| {
        let i = row % n_a;
        let hij = h[(i, j)];
        if row < n_a {
            iq.a1[i] * hij * symbol_power + iq.a2[i] * hij.conj() * pseudo_power
        } else {
            iq.a1[i].conj() * hij.conj() * pseudo_power + iq.a2[i].conj() * hij * symbol_power
        }
    })
}

/// Which observation the receive filters act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// `r_IQ` alone (`N_A` taps).
    Linear,
    /// `r_a = [r_IQ; r_IQ*]` (`2N_A` taps).
    WidelyLinear,
}

/// Covariance of the observation and its cross-correlation with the symbols,
/// the only two quantities the MMSE filter designs need.
#[derive(Debug, Clone)]
pub struct FilterStatistics {
    pub domain: Domain,
    pub covariance: CMatrix,
    pub cross: CMatrix,
    pub symbol_power: f64,
}

impl FilterStatistics {
    pub fn taps(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn streams(&self) -> usize {
        self.cross.ncols()
    }

    pub fn cross_column(&self, j: usize) -> CVector {
        self.cross.column(j).into_owned()
    }
}

impl AugmentedStatistics {
    pub fn filter_statistics(&self, domain: Domain) -> FilterStatistics {
        let (covariance, cross) = match domain {
            Domain::Linear => (self.r_iq.clone(), self.q_iq.clone()),
            Domain::WidelyLinear => (self.r_a.clone(), self.q_a.clone()),
        };
        FilterStatistics {
            domain,
            covariance,
            cross,
            symbol_power: self.symbol_power,
        }
    }
}

/// Maps the imbalanced received block to the observation of `domain`.
pub fn observation(r_iq: &CMatrix, domain: Domain) -> CMatrix {
    match domain {
        Domain::Linear => r_iq.clone(),
        Domain::WidelyLinear => augment(r_iq),
    }
}

/// One uncoded transmission block: symbols, the clean received signal and
/// its imbalanced version. Columns are symbol instants.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub bits: Vec<Vec<u8>>,
    pub symbols: CMatrix,
    pub r: CMatrix,
    pub r_iq: CMatrix,
}

/// Modulates per-stream bit vectors (all the same length) onto the rows of a
/// symbol matrix.
pub fn symbols_from_bits(
    modulation: &Modulation,
    bits: &[Vec<u8>],
) -> Result<CMatrix, SignalError> {
    let rows: Vec<Vec<Complex64>> = bits
        .iter()
        .map(|b| modulation.modulate(b))
        .collect::<Result<_, _>>()?;
    let q = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != q) {
        return Err(SignalError::Shape(
            "streams carry different symbol counts".into(),
        ));
    }
    Ok(CMatrix::from_fn(rows.len(), q, |j, t| rows[j][t]))
}

/// `r = H s + n`, then `r_IQ = A1 r + A2 r*`.
pub fn transmit(
    channel: &ChannelRealization,
    iq: &IqImbalance,
    symbols: &CMatrix,
    rng: &mut SeededRng,
) -> Result<(CMatrix, CMatrix), SignalError> {
    if symbols.nrows() != channel.h.ncols() {
        return Err(SignalError::Shape(format!(
            "{} symbol rows for {} channel columns",
            symbols.nrows(),
            channel.h.ncols()
        )));
    }
    let noise = complex_gaussian_matrix(
        rng,
        channel.h.nrows(),
        symbols.ncols(),
        channel.noise_variance,
    )
    .map_err(|e| SignalError::Shape(e.to_string()))?;
    let r = &channel.h * symbols + noise;
    let r_iq = iq.apply(&r)?;
    Ok((r, r_iq))
}

pub fn random_bits(rng: &mut SeededRng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// Draws bits, modulates and transmits `symbols_per_stream` instants.
pub fn random_transmission(
    channel: &ChannelRealization,
    iq: &IqImbalance,
    modulation: &Modulation,
    symbols_per_stream: usize,
    rng: &mut SeededRng,
) -> Result<Transmission, SignalError> {
    let nbits = symbols_per_stream * modulation.bits_per_symbol();
    let bits: Vec<Vec<u8>> = (0..channel.h.ncols())
        .map(|_| random_bits(rng, nbits))
        .collect();
    let symbols = symbols_from_bits(modulation, &bits)?;
    let (r, r_iq) = transmit(channel, iq, &symbols, rng)?;
    Ok(Transmission {
        bits,
        symbols,
        r,
        r_iq,
    })
}

/// `‖r_IQ − (A1 H ŝ + A2 H* ŝ*)‖²` using precomputed `(A1 H, A2 H*)`.
pub fn distorted_residual(g1: &CMatrix, g2: &CMatrix, r_iq: &CVector, s: &[Complex64]) -> f64 {
    let mut total = 0.0;
    for i in 0..g1.nrows() {
        let mut acc = r_iq[i];
        for (j, &sj) in s.iter().enumerate() {
            if sj != ZERO {
                acc -= g1[(i, j)] * sj + g2[(i, j)] * sj.conj();
            }
        }
        total += acc.norm_sqr();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ONE, ZERO};

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn dims_validation() {
        assert!(SystemDims::new(4, 2, 16).is_ok());
        assert!(SystemDims::new(4, 2, 7).is_err());
        assert!(SystemDims::new(0, 2, 7).is_err());
        assert_eq!(SystemDims::new(4, 2, 16).unwrap().streams(), 8);
    }

    #[test]
    fn channel_shape_and_determinism() {
        let dims = SystemDims::new(4, 2, 16).unwrap();
        let a = generate_channel(&dims, &mut SeededRng::new(9, 1));
        let b = generate_channel(&dims, &mut SeededRng::new(9, 1));
        assert_eq!(a.h.shape(), (16, 8));
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn scalar_channel_unit_power() {
        let dims = SystemDims::new(1, 1, 1).unwrap();
        let mut rng = SeededRng::new(77, 0);
        let n = 100_000;
        let p: f64 = (0..n)
            .map(|_| generate_channel(&dims, &mut rng).h[(0, 0)].norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((p - 1.0).abs() < 0.02, "E|h|² = {p}");
    }

    #[test]
    fn iq_matrices_identity_case() {
        let iq = make_iq_matrices(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(iq.a1, vec![ONE, ONE]);
        assert_eq!(iq.a2, vec![ZERO, ZERO]);
    }

    #[test]
    fn iq_matrices_worked_values() {
        let iq = make_iq_matrices(&[0.85], &[15f64.to_radians()]).unwrap();
        assert!(
            close(iq.a1[0], Complex64::new(0.91052, -0.11000), 1e-5),
            "{}",
            iq.a1[0]
        );
        assert!(
            close(iq.a2[0], Complex64::new(0.08948, 0.11000), 1e-5),
            "{}",
            iq.a2[0]
        );

        let conj = make_iq_matrices(&[1.0], &[std::f64::consts::PI]).unwrap();
        assert!(close(conj.a1[0], ZERO, 1e-15));
        assert!(close(conj.a2[0], ONE, 1e-15));
        assert!(make_iq_matrices(&[1.0], &[]).is_err());
    }

    #[test]
    fn apply_imbalance_cases() {
        let mut rng = SeededRng::new(5, 5);
        let r = complex_gaussian_matrix(&mut rng, 3, 1, 1.0).unwrap();
        assert_eq!(IqImbalance::none(3).apply(&r).unwrap(), r);

        let iq = ImbalanceRanges::default().draw(3, &mut rng);
        let real = CMatrix::from_fn(3, 1, |i, _| Complex64::new(i as f64 - 1.3, 0.0));
        assert!((iq.apply(&real).unwrap() - &real).norm() < 1e-14);

        let conj = make_iq_matrices(&[1.0], &[std::f64::consts::PI]).unwrap();
        let out = conj
            .apply(&CMatrix::from_element(1, 1, Complex64::new(0.0, 1.0)))
            .unwrap();
        assert!(close(out[(0, 0)], Complex64::new(0.0, -1.0), 1e-15));
    }

    #[test]
    fn qpsk_table_and_round_trip() {
        let m = Modulation::qpsk();
        let s = m.modulate(&[0, 0]).unwrap()[0];
        let h = 1.0 / 2f64.sqrt();
        assert!(close(s, Complex64::new(h, h), 1e-15));
        for label in 0..4u8 {
            let bits = [label >> 1, label & 1];
            let sym = m.modulate(&bits).unwrap();
            assert_eq!(m.demap_hard(&sym), bits.to_vec());
        }
        assert!(m.modulate(&[0, 1, 1]).is_err());
        let power: f64 = m.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / 4.0;
        assert!((power - 1.0).abs() < 1e-15);
        // Gray: neighbours differ in one bit.
        assert_eq!(m.label_bit(0, 0), 0);
        assert_eq!(m.label_bit(1, 1), 1);
    }

    #[test]
    fn bpsk_mapping() {
        let m = Modulation::new(ModulationKind::Bpsk, 4.0);
        assert_eq!(
            m.modulate(&[0, 1]).unwrap(),
            vec![Complex64::new(2.0, 0.0), Complex64::new(-2.0, 0.0)]
        );
        assert_eq!(
            m.demap_hard(&m.modulate(&[1, 0, 1]).unwrap()),
            vec![1, 0, 1]
        );
    }

    #[test]
    fn slicer_ties_go_to_lowest_label() {
        let m = Modulation::qpsk();
        assert_eq!(m.slice_label(ZERO), 0);
        assert_eq!(m.slice_label(Complex64::new(-1.0, 0.0)), 2);
    }

    fn stats_for(
        kind: ModulationKind,
        iq: &IqImbalance,
        seed: u64,
    ) -> (CMatrix, AugmentedStatistics) {
        let dims = SystemDims::new(2, 2, 6).unwrap();
        let ch = generate_channel(&dims, &mut SeededRng::new(seed, 0));
        let st = build_second_order_stats(&ch.h, &Modulation::new(kind, 1.0), 0.3, iq).unwrap();
        (ch.h, st)
    }

    #[test]
    fn circular_no_imbalance_special_case() {
        let (_, st) = stats_for(ModulationKind::Qpsk, &IqImbalance::none(6), 1);
        assert!((&st.r_iq - &st.r).norm() < 1e-14);
        assert!(st.c_iq.norm() < 1e-14);
        for p in &st.p_a {
            assert!(p.rows(6, 6).norm() == 0.0);
        }
    }

    #[test]
    fn bpsk_no_imbalance_special_case() {
        let (h, st) = stats_for(ModulationKind::Bpsk, &IqImbalance::none(6), 2);
        let expected = &h * h.transpose();
        assert!((&st.c_iq - &expected).norm() < 1e-12);
        assert!(st.c_iq.norm() > 0.1);
    }

    #[test]
    fn qpsk_imbalance_makes_data_noncircular() {
        let iq = ImbalanceRanges::default().draw(6, &mut SeededRng::new(4, 4));
        let (_, st) = stats_for(ModulationKind::Qpsk, &iq, 3);
        let a1 = iq.a1_matrix();
        let a2 = iq.a2_matrix();
        let expected = &a1 * &st.r * a2.transpose() + &a2 * st.r.conjugate() * a1.transpose();
        assert!((&st.c_iq - &expected).norm() < 1e-12);
        assert!(st.c_iq.norm() > 1e-3);
    }

    #[test]
    fn structural_invariants() {
        for (seed, kind) in [(10, ModulationKind::Qpsk), (11, ModulationKind::Bpsk)] {
            let iq = ImbalanceRanges::default().draw(6, &mut SeededRng::new(seed, 9));
            let (_, st) = stats_for(kind, &iq, seed);
            assert!((&st.r_a - st.r_a.adjoint()).norm() < 1e-12);
            assert!((&st.c_iq - st.c_iq.transpose()).norm() < 1e-12);
            assert!((&st.c - st.c.transpose()).norm() < 1e-12);
            let trace: f64 = st.r_a.diagonal().iter().map(|z| z.re).sum();
            let eig = st.r_a.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-10 * trace));
            for (j, p) in st.p_a.iter().enumerate() {
                assert!((st.q_a.column(j) - p).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn stats_shape_mismatch() {
        let h = CMatrix::zeros(4, 2);
        assert!(
            build_second_order_stats(&h, &Modulation::qpsk(), 1.0, &IqImbalance::none(3)).is_err()
        );
    }

    #[test]
    fn residual_is_zero_on_noise_free_model() {
        let dims = SystemDims::new(2, 1, 4).unwrap();
        let mut rng = SeededRng::new(8, 8);
        let ch = generate_channel(&dims, &mut rng);
        let iq = ImbalanceRanges::default().draw(4, &mut rng);
        let tx = random_transmission(&ch, &iq, &Modulation::qpsk(), 3, &mut rng).unwrap();
        let (g1, g2) = iq.distorted_channels(&ch.h);
        for t in 0..3 {
            let s: Vec<Complex64> = tx.symbols.column(t).iter().copied().collect();
            let r = tx.r_iq.column(t).into_owned();
            assert!(distorted_residual(&g1, &g2, &r, &s) < 1e-24);
        }
    }
}

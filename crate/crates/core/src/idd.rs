//! Iterative detection and decoding: soft multi-branch DF detection
//! exchanging extrinsic LLRs with per-stream BCJR decoders.

use num_complex::Complex64;
use thiserror::Error;

use crate::coding::{clamp_llr, max_star, CodingError, ConvCode, Interleaver};
use crate::mbdf::{run_branch, BranchFilterBank, Feedback};
use crate::numerics::{CMatrix, SeededRng, ZERO};
use crate::signal::{
    random_bits, symbols_from_bits, transmit, ChannelRealization, IqImbalance, Modulation,
    SignalError,
};

/// Floor on the estimated output noise variance.
pub const MIN_OUTPUT_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IddError {
    #[error("cannot estimate an output model from zero samples")]
    Empty,
    #[error("reference has {reference} samples, output has {output}")]
    Length { output: usize, reference: usize },
    #[error("{symbols} symbols of {bits} bits cannot carry a terminated codeword")]
    FrameSize { symbols: usize, bits: usize },
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// `z = V s + ξ` with `ξ` circular Gaussian of variance `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOutputModel {
    pub amplitude: Complex64,
    pub variance: f64,
}

/// Time-average estimates `V = ⟨s* z⟩/σ_s²` and `σ² = ⟨|z − V s|²⟩`.
pub fn estimate_output_model(
    z: &[Complex64],
    reference: &[Complex64],
    symbol_power: f64,
) -> Result<GaussianOutputModel, IddError> {
    if z.is_empty() {
        return Err(IddError::Empty);
    }
    if z.len() != reference.len() {
        return Err(IddError::Length {
            output: z.len(),
            reference: reference.len(),
        });
    }
    let n = z.len() as f64;
    let amplitude = z
        .iter()
        .zip(reference)
        .map(|(z, s)| s.conj() * z)
        .sum::<Complex64>()
        / (n * symbol_power);
    let variance = z
        .iter()
        .zip(reference)
        .map(|(z, s)| (z - amplitude * s).norm_sqr())
        .sum::<f64>()
        / n;
    Ok(GaussianOutputModel {
        amplitude,
        variance: variance.max(MIN_OUTPUT_VARIANCE),
    })
}

/// Bit LLRs of one detector output, `ln Σ_{a: b_c=0} e^{−|z−Va|²/2σ²} / Σ_{a: b_c=1} …`.
pub fn detector_extrinsic_llr(
    z: Complex64,
    model: &GaussianOutputModel,
    modulation: &Modulation,
) -> Vec<f64> {
    let c = modulation.bits_per_symbol();
    let metrics: Vec<f64> = modulation
        .points()
        .iter()
        .map(|&a| -(z - model.amplitude * a).norm_sqr() / (2.0 * model.variance))
        .collect();
    (0..c)
        .map(|bit| {
            let mut acc = [f64::NEG_INFINITY; 2];
            for (label, &m) in metrics.iter().enumerate() {
                let b = modulation.label_bit(label, bit) as usize;
                acc[b] = max_star(acc[b], m);
            }
            clamp_llr(acc[0] - acc[1])
        })
        .collect()
}

/// The most reliable candidate, i.e. the LLR of largest magnitude, sign
/// kept. Ties resolve to the first branch. Taking the signed maximum would
/// systematically favour bit 0.
pub fn select_branch_llr(candidates: &[f64]) -> f64 {
    candidates
        .iter()
        .copied()
        .reduce(|best, x| if x.abs() > best.abs() { x } else { best })
        .unwrap_or(0.0)
}

/// `Σ_a a·P(a)` with bit probabilities taken from `llrs`.
pub fn soft_symbol(llrs: &[f64], modulation: &Modulation) -> Complex64 {
    let mut s = ZERO;
    for (label, &a) in modulation.points().iter().enumerate() {
        let p: f64 = llrs
            .iter()
            .enumerate()
            .map(|(c, &l)| {
                let p0 = 1.0 / (1.0 + (-l).exp());
                if modulation.label_bit(label, c) == 0 {
                    p0
                } else {
                    1.0 - p0
                }
            })
            .product();
        s += a * p;
    }
    s
}

/// One coded packet. Coded bits of every stream go through the same
/// interleaver before mapping.
#[derive(Debug, Clone)]
pub struct CodedFrame {
    pub info_bits: Vec<Vec<u8>>,
    pub coded_bits: Vec<Vec<u8>>,
    pub interleaved_bits: Vec<Vec<u8>>,
    pub interleaver: Interleaver,
    pub symbols: CMatrix,
    pub r: CMatrix,
    pub r_iq: CMatrix,
}

impl CodedFrame {
    /// Draws info bits for `symbols_per_stream` coded symbols per stream,
    /// encodes, interleaves, maps and transmits them.
    pub fn generate(
        code: &ConvCode,
        channel: &ChannelRealization,
        iq: &IqImbalance,
        modulation: &Modulation,
        symbols_per_stream: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, IddError> {
        let bits = symbols_per_stream * modulation.bits_per_symbol();
        let info_len = code.info_len(bits).map_err(|_| IddError::FrameSize {
            symbols: symbols_per_stream,
            bits: modulation.bits_per_symbol(),
        })?;
        let streams = channel.h.ncols();
        let interleaver = Interleaver::random(bits, rng);
        let info_bits: Vec<Vec<u8>> = (0..streams).map(|_| random_bits(rng, info_len)).collect();
        let coded_bits: Vec<Vec<u8>> = info_bits.iter().map(|b| code.encode(b)).collect();
        let interleaved_bits = coded_bits
            .iter()
            .map(|c| interleaver.interleave(c))
            .collect::<Result<Vec<_>, _>>()?;
        let symbols = symbols_from_bits(modulation, &interleaved_bits)?;
        let (r, r_iq) = transmit(channel, iq, &symbols, rng)?;
        Ok(Self {
            info_bits,
            coded_bits,
            interleaved_bits,
            interleaver,
            symbols,
            r,
            r_iq,
        })
    }
}

#[derive(Debug, Clone)]
pub struct IddConfig {
    pub iterations: usize,
    /// Keep per-iteration LLR vectors in the outcome.
    pub keep_trace: bool,
}

impl Default for IddConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            keep_trace: false,
        }
    }
}

/// LLRs exchanged in one iteration, per stream, in transmission
/// (interleaved) order except for the decoder-side vectors.
#[derive(Debug, Clone)]
pub struct IddTrace {
    /// `λ2^p`, the decoder extrinsic from the previous iteration.
    pub prior: Vec<Vec<f64>>,
    /// Selected detector extrinsic `λ1`.
    pub detector_extrinsic: Vec<Vec<f64>>,
    /// `Λ1 = λ1 + λ2^p`.
    pub detector_posterior: Vec<Vec<f64>>,
    /// Decoder input `λ1^p` in code order.
    pub decoder_prior: Vec<Vec<f64>>,
    /// Decoder extrinsic `λ2` in code order.
    pub decoder_extrinsic: Vec<Vec<f64>>,
    /// `Λ2 = λ2 + λ1^p` in code order.
    pub decoder_posterior: Vec<Vec<f64>>,
    /// Soft symbols fed back to the next iteration.
    pub soft_symbols: CMatrix,
}

#[derive(Debug, Clone)]
pub struct IddOutcome {
    pub bit_errors: Vec<usize>,
    pub info_bits: usize,
    pub decoded: Vec<Vec<u8>>,
    pub trace: Vec<IddTrace>,
}

impl IddOutcome {
    pub fn ber(&self) -> Vec<f64> {
        self.bit_errors
            .iter()
            .map(|&e| e as f64 / self.info_bits.max(1) as f64)
            .collect()
    }
}

pub fn run_idd(
    frame: &CodedFrame,
    bank: &BranchFilterBank,
    obs: &CMatrix,
    modulation: &Modulation,
    code: &ConvCode,
    cfg: &IddConfig,
) -> Result<IddOutcome, IddError> {
    run_idd_with_priors(frame, bank, obs, modulation, code, cfg, None)
}

/// Like [`run_idd`], optionally seeding the first iteration with externally
/// supplied coded-bit priors (interleaved order).
pub fn run_idd_with_priors(
    frame: &CodedFrame,
    bank: &BranchFilterBank,
    obs: &CMatrix,
    modulation: &Modulation,
    code: &ConvCode,
    cfg: &IddConfig,
    initial_priors: Option<&[Vec<f64>]>,
) -> Result<IddOutcome, IddError> {
    let streams = bank.streams();
    let cols = obs.ncols();
    let c = modulation.bits_per_symbol();
    let nbits = cols * c;
    let info_len = code.info_len(nbits)?;

    let mut priors: Vec<Vec<f64>> = match initial_priors {
        Some(p) => p.to_vec(),
        None => vec![vec![0.0; nbits]; streams],
    };
    let mut have_soft = initial_priors.is_some();
    let mut soft = soft_symbol_matrix(&priors, modulation, cols);
    // Output-model reference for later iterations: decoder a-posteriori
    // symbols, sliced. Soft values shrink with the extrinsic reliability and
    // would drag the amplitude estimate, and the LLRs, towards zero.
    let mut reference = soft.map(|x| modulation.slice(x));

    let mut outcome = IddOutcome {
        bit_errors: Vec::with_capacity(cfg.iterations),
        info_bits: info_len * streams,
        decoded: vec![Vec::new(); streams],
        trace: Vec::new(),
    };

    for _ in 0..cfg.iterations {
        let soft_input = have_soft.then_some(SoftInput {
            symbols: &soft,
            reference: &reference,
        });
        let selected = detector_llrs(bank, obs, modulation, soft_input)?;

        let mut errors = 0;
        let mut posteriors = Vec::with_capacity(streams);
        let mut trace = cfg.keep_trace.then(|| IddTrace {
            prior: priors.clone(),
            detector_extrinsic: selected.clone(),
            detector_posterior: Vec::with_capacity(streams),
            decoder_prior: Vec::with_capacity(streams),
            decoder_extrinsic: Vec::with_capacity(streams),
            decoder_posterior: Vec::with_capacity(streams),
            soft_symbols: CMatrix::zeros(0, 0),
        });
        for j in 0..streams {
            let decoder_prior = frame.interleaver.deinterleave(&selected[j])?;
            let out = code.bcjr_decode(&decoder_prior, &vec![0.0; info_len])?;
            let decided: Vec<u8> = out
                .info_posterior
                .iter()
                .map(|&l| u8::from(l < 0.0))
                .collect();
            errors += decided
                .iter()
                .zip(&frame.info_bits[j])
                .filter(|(a, b)| a != b)
                .count();
            outcome.decoded[j] = decided;
            let next_prior = frame.interleaver.interleave(&out.coded_extrinsic)?;
            let decoder_posterior: Vec<f64> = out
                .coded_extrinsic
                .iter()
                .zip(&decoder_prior)
                .map(|(a, b)| a + b)
                .collect();
            posteriors.push(frame.interleaver.interleave(&decoder_posterior)?);
            if let Some(tr) = trace.as_mut() {
                tr.detector_posterior.push(
                    selected[j]
                        .iter()
                        .zip(&priors[j])
                        .map(|(a, b)| a + b)
                        .collect(),
                );
                tr.decoder_posterior.push(decoder_posterior);
                tr.decoder_prior.push(decoder_prior);
                tr.decoder_extrinsic.push(out.coded_extrinsic);
            }
            priors[j] = next_prior;
        }
        soft = soft_symbol_matrix(&priors, modulation, cols);
        reference = soft_symbol_matrix(&posteriors, modulation, cols).map(|x| modulation.slice(x));
        have_soft = true;
        if let Some(mut tr) = trace {
            tr.soft_symbols = soft.clone();
            outcome.trace.push(tr);
        }
        outcome.bit_errors.push(errors);
    }
    Ok(outcome)
}

/// Detector-side inputs from a previous decoding pass.
#[derive(Debug, Clone, Copy)]
pub struct SoftInput<'a> {
    /// `s̃`, fed back in place of hard decisions.
    pub symbols: &'a CMatrix,
    /// Output-model reference symbols.
    pub reference: &'a CMatrix,
}

/// Selected detector extrinsic LLRs `λ1` per stream, in transmission order.
///
/// Without `soft`, every branch feeds back its own hard decisions and the
/// output model is fitted against them.
pub fn detector_llrs(
    bank: &BranchFilterBank,
    obs: &CMatrix,
    modulation: &Modulation,
    soft: Option<SoftInput<'_>>,
) -> Result<Vec<Vec<f64>>, IddError> {
    let streams = bank.streams();
    let c = modulation.bits_per_symbol();
    let nbits = obs.ncols() * c;
    let feedback = soft.map_or(Feedback::Decisions, |s| Feedback::Soft(s.symbols));
    let mut candidates = vec![vec![Vec::with_capacity(bank.branches.len()); nbits]; streams];
    for branch in &bank.branches {
        let out = run_branch(branch, obs, modulation, feedback);
        for (j, cand) in candidates.iter_mut().enumerate() {
            let z: Vec<Complex64> = out.z.row(j).iter().copied().collect();
            let reference: Vec<Complex64> = match soft {
                Some(s) => s.reference.row(j).iter().copied().collect(),
                None => out.decisions.row(j).iter().copied().collect(),
            };
            let model = estimate_output_model(&z, &reference, bank.symbol_power)?;
            for (t, &zt) in z.iter().enumerate() {
                for (b, l) in detector_extrinsic_llr(zt, &model, modulation)
                    .into_iter()
                    .enumerate()
                {
                    cand[t * c + b].push(l);
                }
            }
        }
    }
    Ok(candidates
        .iter()
        .map(|per_bit| per_bit.iter().map(|c| select_branch_llr(c)).collect())
        .collect())
}

/// Soft symbols of every stream and instant from bit LLRs in transmission order.
pub fn soft_symbol_matrix(priors: &[Vec<f64>], modulation: &Modulation, cols: usize) -> CMatrix {
    let c = modulation.bits_per_symbol();
    CMatrix::from_fn(priors.len(), cols, |j, t| {
        soft_symbol(&priors[j][t * c..(t + 1) * c], modulation)
    })
}

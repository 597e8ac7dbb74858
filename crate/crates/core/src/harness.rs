//! Monte Carlo BER sweeps: configuration, detector registry, per-packet
//! simulation, confidence intervals and CSV output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::baselines::{
    las_detect, mbdf_detect, mmse_detect, rmf_detect, rmf_filters, sic_detect, BaselineError,
};
use crate::coding::ConvCode;
use crate::idd::{run_idd, CodedFrame, IddConfig, IddError};
use crate::mbdf::{design_branch_filters, detect_frame, BranchFilterBank, MbdfError};
use crate::numerics::{CMatrix, SeededRng};
use crate::signal::{
    build_second_order_stats, generate_channel, observation, random_transmission, Domain,
    ImbalanceRanges, Modulation, ModulationKind, SignalError, SystemDims,
};

/// Packets simulated between two checks of the stop rule. Fixed so that the
/// stopping point does not depend on the thread count.
pub const BATCH_PACKETS: usize = 8;
/// Grid searched by [`calibrate_beta`].
pub const BETA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

pub const DEFAULT_UNCODED_SYMBOLS: usize = 500;
pub const DEFAULT_CODED_SYMBOLS: usize = 1000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown detector {name:?}; registered detectors: {registry}")]
    UnknownDetector { name: String, registry: String },
    #[error("detector {0} has no coded mode")]
    NotCoded(DetectorKind),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::UnknownDetector { .. }
                | HarnessError::NotCoded(_)
        )
    }
}

impl From<MbdfError> for HarnessError {
    fn from(e: MbdfError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<BaselineError> for HarnessError {
    fn from(e: BaselineError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<IddError> for HarnessError {
    fn from(e: IddError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<SignalError> for HarnessError {
    fn from(e: SignalError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorKind {
    Rmf,
    Mmse,
    Sic,
    WlSic,
    Las,
    MbDf,
    WlMbDf,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 7] = [
        DetectorKind::Rmf,
        DetectorKind::Mmse,
        DetectorKind::Sic,
        DetectorKind::WlSic,
        DetectorKind::Las,
        DetectorKind::MbDf,
        DetectorKind::WlMbDf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Rmf => "rmf",
            DetectorKind::Mmse => "mmse",
            DetectorKind::Sic => "sic",
            DetectorKind::WlSic => "wl-sic",
            DetectorKind::Las => "las",
            DetectorKind::MbDf => "mb-df",
            DetectorKind::WlMbDf => "wl-mb-df",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, HarnessError> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| HarnessError::UnknownDetector {
                name: name.to_string(),
                registry: Self::ALL.map(DetectorKind::name).join(", "),
            })
    }

    /// Whether the detector uses the error-propagation parameter.
    pub fn uses_beta(self) -> bool {
        matches!(self, DetectorKind::MbDf | DetectorKind::WlMbDf)
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(try_from = "BetaRepr")]
pub enum BetaSetting {
    Fixed(f64),
    Calibrate,
}

impl Default for BetaSetting {
    fn default() -> Self {
        BetaSetting::Fixed(1.0)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<BetaRepr> for BetaSetting {
    type Error = String;

    fn try_from(v: BetaRepr) -> Result<Self, String> {
        match v {
            BetaRepr::Number(b) if (0.0..=1.0).contains(&b) => Ok(BetaSetting::Fixed(b)),
            BetaRepr::Number(b) => Err(format!("beta {b} outside [0, 1]")),
            BetaRepr::Word(w) if w == "calibrate" => Ok(BetaSetting::Calibrate),
            BetaRepr::Word(w) => Err(format!("beta must be a number or \"calibrate\", got {w:?}")),
        }
    }
}

fn default_modulation() -> ModulationKind {
    ModulationKind::Qpsk
}

fn default_branches() -> usize {
    8
}

fn default_max_bit_errors() -> u64 {
    500
}

fn default_iterations() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dims: SystemDims,
    #[serde(default = "default_modulation")]
    pub modulation: ModulationKind,
    pub detectors: Vec<String>,
    #[serde(default = "default_branches")]
    pub branches: usize,
    #[serde(default)]
    pub beta: BetaSetting,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub imbalance: ImbalanceRanges,
    #[serde(default)]
    pub coded: bool,
    pub packets_per_point: usize,
    #[serde(default = "default_max_bit_errors")]
    pub max_bit_errors: u64,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Symbols per stream per packet; defaults to 500 uncoded, 1000 coded.
    #[serde(default)]
    pub symbols_per_packet: Option<usize>,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.dims
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.snr_db.is_empty() {
            return Err(HarnessError::Config("snr_db grid is empty".into()));
        }
        if let Some(x) = self.snr_db.iter().find(|x| !x.is_finite()) {
            return Err(HarnessError::Config(format!(
                "snr_db entry {x} is not finite"
            )));
        }
        if self.detectors.is_empty() {
            return Err(HarnessError::Config("no detectors listed".into()));
        }
        if self.packets_per_point == 0 {
            return Err(HarnessError::Config(
                "packets_per_point must be at least 1".into(),
            ));
        }
        if self.branches == 0 {
            return Err(HarnessError::Config("branches must be at least 1".into()));
        }
        if self.coded && self.iterations == 0 {
            return Err(HarnessError::Config("iterations must be at least 1".into()));
        }
        let im = &self.imbalance;
        if im.enabled
            && (im.gain[0] <= 0.0 || im.gain[1] < im.gain[0] || im.phase_deg[1] < im.phase_deg[0])
        {
            return Err(HarnessError::Config(
                "imbalance ranges must be ordered with positive gain".into(),
            ));
        }
        let kinds = self.detector_kinds()?;
        if self.coded {
            if let Some(&d) = kinds.iter().find(|d| **d == DetectorKind::Las) {
                return Err(HarnessError::NotCoded(d));
            }
            let bits = self.symbols_per_packet() * self.modulation().bits_per_symbol();
            if ConvCode.info_len(bits).is_err() {
                return Err(HarnessError::Config(format!(
                    "{bits} coded bits per stream cannot hold a terminated codeword"
                )));
            }
        }
        if self.symbols_per_packet() == 0 {
            return Err(HarnessError::Config(
                "symbols_per_packet must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn detector_kinds(&self) -> Result<Vec<DetectorKind>, HarnessError> {
        let kinds = self
            .detectors
            .iter()
            .map(|d| DetectorKind::from_name(d))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(HarnessError::Config(format!("detector {k} listed twice")));
            }
        }
        Ok(kinds)
    }

    pub fn modulation(&self) -> Modulation {
        Modulation::new(self.modulation, 1.0)
    }

    pub fn symbols_per_packet(&self) -> usize {
        self.symbols_per_packet.unwrap_or(if self.coded {
            DEFAULT_CODED_SYMBOLS
        } else {
            DEFAULT_UNCODED_SYMBOLS
        })
    }

    pub fn code_rate(&self) -> f64 {
        if self.coded {
            ConvCode.rate()
        } else {
            1.0
        }
    }

    pub fn noise_variance(&self, snr_db: f64) -> f64 {
        let m = self.modulation();
        snr_to_noise_variance(
            snr_db,
            self.dims.streams(),
            m.symbol_power(),
            self.code_rate(),
            m.bits_per_symbol(),
        )
    }
}

/// `σ² = K·N_U·σ_s² / (R·C·10^(snr/10))`.
pub fn snr_to_noise_variance(
    snr_db: f64,
    streams: usize,
    symbol_power: f64,
    rate: f64,
    bits_per_symbol: usize,
) -> f64 {
    streams as f64 * symbol_power / (rate * bits_per_symbol as f64 * 10f64.powf(snr_db / 10.0))
}

/// Wilson score interval at 95% as `(center, half_width)`.
pub fn wilson_interval(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 0.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    (center, half)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerRecord {
    pub detector: String,
    pub snr_db: f64,
    pub iteration: usize,
    pub trials_bits: u64,
    pub bit_errors: u64,
    pub ber: f64,
    pub ci_halfwidth: f64,
    pub seed: u64,
}

impl BerRecord {
    pub fn new(
        detector: &str,
        snr_db: f64,
        iteration: usize,
        counts: ErrorCount,
        seed: u64,
    ) -> Self {
        let (_, half) = wilson_interval(counts.errors, counts.bits);
        Self {
            detector: detector.to_string(),
            snr_db,
            iteration,
            trials_bits: counts.bits,
            bit_errors: counts.errors,
            ber: if counts.bits == 0 {
                0.0
            } else {
                counts.errors as f64 / counts.bits as f64
            },
            ci_halfwidth: half,
            seed,
        }
    }

    /// Wilson interval bounds.
    pub fn interval(&self) -> (f64, f64) {
        let (c, h) = wilson_interval(self.bit_errors, self.trials_bits);
        (c - h, c + h)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCount {
    pub errors: u64,
    pub bits: u64,
}

impl std::ops::AddAssign for ErrorCount {
    fn add_assign(&mut self, o: Self) {
        self.errors += o.errors;
        self.bits += o.bits;
    }
}

/// FNV-1a over the detector name and the two indices.
pub fn stream_id(detector: &str, snr_index: usize, packet_index: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(detector.as_bytes());
    eat(&[0xff]);
    eat(&(snr_index as u64).to_le_bytes());
    eat(&(packet_index as u64).to_le_bytes());
    h
}

fn count_errors(decisions: &CMatrix, bits: &[Vec<u8>], modulation: &Modulation) -> ErrorCount {
    let mut out = ErrorCount::default();
    for (j, truth) in bits.iter().enumerate() {
        let row: Vec<_> = decisions.row(j).iter().copied().collect();
        let decided = modulation.demap_hard(&row);
        out.errors += decided.iter().zip(truth).filter(|(a, b)| a != b).count() as u64;
        out.bits += truth.len() as u64;
    }
    out
}

/// Simulates one packet. Returns one count for uncoded runs and one per
/// iteration for coded runs.
pub fn simulate_packet(
    cfg: &SimConfig,
    detector: DetectorKind,
    noise_variance: f64,
    beta: f64,
    rng: &mut SeededRng,
) -> Result<Vec<ErrorCount>, HarnessError> {
    let m = cfg.modulation();
    let mut channel = generate_channel(&cfg.dims, rng);
    channel.noise_variance = noise_variance;
    let iq = cfg.imbalance.draw(cfg.dims.receive_antennas, rng);
    let q = cfg.symbols_per_packet();

    if cfg.coded {
        let code = ConvCode;
        let frame = CodedFrame::generate(&code, &channel, &iq, &m, q, rng)?;
        let stats = build_second_order_stats(&channel.h, &m, noise_variance, &iq)?;
        let bank: BranchFilterBank = match detector {
            DetectorKind::Rmf => BranchFilterBank::feedforward_only(
                Domain::Linear,
                m.symbol_power(),
                rmf_filters(&channel.h, &iq)?,
            ),
            DetectorKind::Mmse => {
                design_branch_filters(&stats.filter_statistics(Domain::Linear), 1, 0.0)?
            }
            DetectorKind::Sic => {
                design_branch_filters(&stats.filter_statistics(Domain::Linear), 1, 1.0)?
            }
            DetectorKind::WlSic => {
                design_branch_filters(&stats.filter_statistics(Domain::WidelyLinear), 1, 1.0)?
            }
            DetectorKind::MbDf => {
                design_branch_filters(&stats.filter_statistics(Domain::Linear), cfg.branches, beta)?
            }
            DetectorKind::WlMbDf => design_branch_filters(
                &stats.filter_statistics(Domain::WidelyLinear),
                cfg.branches,
                beta,
            )?,
            DetectorKind::Las => return Err(HarnessError::NotCoded(detector)),
        };
        let obs = observation(&frame.r_iq, bank.domain);
        let out = run_idd(
            &frame,
            &bank,
            &obs,
            &m,
            &code,
            &IddConfig {
                iterations: cfg.iterations,
                keep_trace: false,
            },
        )?;
        let bits = out.info_bits as u64;
        return Ok(out
            .bit_errors
            .iter()
            .map(|&e| ErrorCount {
                errors: e as u64,
                bits,
            })
            .collect());
    }

    let tx = random_transmission(&channel, &iq, &m, q, rng)?;
    let decisions = match detector {
        DetectorKind::Rmf => rmf_detect(&tx.r_iq, &channel.h, &iq, &m)?,
        DetectorKind::Las => {
            let stats = build_second_order_stats(&channel.h, &m, noise_variance, &iq)?;
            let init = mmse_detect(&tx.r_iq, &stats.filter_statistics(Domain::Linear), &m)?;
            las_detect(&tx.r_iq, &channel.h, &iq, &m, &init)
        }
        _ => {
            let stats = build_second_order_stats(&channel.h, &m, noise_variance, &iq)?;
            let lin = || stats.filter_statistics(Domain::Linear);
            let wl = || stats.filter_statistics(Domain::WidelyLinear);
            let (g1, g2) = iq.distorted_channels(&channel.h);
            match detector {
                DetectorKind::Mmse => mmse_detect(&tx.r_iq, &lin(), &m)?,
                DetectorKind::Sic => sic_detect(&tx.r_iq, &lin(), &m)?,
                DetectorKind::WlSic => {
                    sic_detect(&observation(&tx.r_iq, Domain::WidelyLinear), &wl(), &m)?
                }
                DetectorKind::MbDf => {
                    mbdf_detect(&tx.r_iq, &lin(), (&g1, &g2), &m, cfg.branches, beta)?
                }
                DetectorKind::WlMbDf => {
                    let bank = design_branch_filters(&wl(), cfg.branches, beta)?;
                    let obs = observation(&tx.r_iq, Domain::WidelyLinear);
                    detect_frame(&bank, &obs, &tx.r_iq, (&g1, &g2), &m)?.symbols
                }
                DetectorKind::Rmf | DetectorKind::Las => unreachable!(),
            }
        }
    };
    Ok(vec![count_errors(&decisions, &tx.bits, &m)])
}

/// Simulates one (detector, SNR) point until `packets_per_point` packets or
/// `max_bit_errors` errors in the last iteration, checked per batch.
pub fn run_point(
    cfg: &SimConfig,
    detector: DetectorKind,
    snr_index: usize,
    beta: f64,
) -> Result<Vec<BerRecord>, HarnessError> {
    let snr_db = cfg.snr_db[snr_index];
    let noise = cfg.noise_variance(snr_db);
    let iterations = if cfg.coded { cfg.iterations } else { 1 };
    let mut totals = vec![ErrorCount::default(); iterations];
    let mut done = 0;
    while done < cfg.packets_per_point && totals[iterations - 1].errors < cfg.max_bit_errors {
        let end = (done + BATCH_PACKETS).min(cfg.packets_per_point);
        let batch = (done..end)
            .into_par_iter()
            .map(|p| {
                let mut rng = SeededRng::new(cfg.seed, stream_id(detector.name(), snr_index, p));
                simulate_packet(cfg, detector, noise, beta, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for counts in batch {
            for (t, c) in totals.iter_mut().zip(counts) {
                *t += c;
            }
        }
        done = end;
    }
    log::debug!(
        "{detector} at {snr_db} dB: {done} packets, {:?}",
        totals[iterations - 1]
    );
    let records: Vec<BerRecord> = totals
        .into_iter()
        .enumerate()
        .map(|(i, c)| BerRecord::new(detector.name(), snr_db, i + 1, c, cfg.seed))
        .collect();
    if records.iter().any(|r| !r.ber.is_finite()) {
        return Err(HarnessError::Numerical(format!(
            "non-finite BER for {detector}"
        )));
    }
    Ok(records)
}

/// Runs every (detector, SNR) point. Rows come back sorted by detector order
/// in the config, then SNR, then iteration.
pub fn run_sweep(cfg: &SimConfig) -> Result<Vec<BerRecord>, HarnessError> {
    cfg.validate()?;
    let kinds = cfg.detector_kinds()?;
    let beta = match cfg.beta {
        BetaSetting::Fixed(b) => b,
        BetaSetting::Calibrate if kinds.iter().any(|k| k.uses_beta()) => {
            calibrate_beta(cfg)?.chosen
        }
        BetaSetting::Calibrate => 1.0,
    };
    let mut records = Vec::new();
    for (di, &kind) in kinds.iter().enumerate() {
        for si in 0..cfg.snr_db.len() {
            for r in run_point(cfg, kind, si, beta)? {
                records.push((di, si, r));
            }
        }
    }
    records.sort_by_key(|r| (r.0, r.1, r.2.iteration));
    Ok(records.into_iter().map(|(_, _, r)| r).collect())
}

#[derive(Debug, Clone)]
pub struct BetaCalibration {
    pub detector: DetectorKind,
    pub snr_db: f64,
    /// `(β, BER)` over the grid.
    pub scores: Vec<(f64, f64)>,
    pub chosen: f64,
}

/// Grid search of β at the middle SNR of the sweep, for the first listed
/// detector that uses it. Lowest BER wins, ties to the smaller β.
pub fn calibrate_beta(cfg: &SimConfig) -> Result<BetaCalibration, HarnessError> {
    let kinds = cfg.detector_kinds()?;
    let detector = kinds
        .iter()
        .copied()
        .find(|k| k.uses_beta())
        .ok_or_else(|| HarnessError::Config("no listed detector uses beta".into()))?;
    let si = cfg.snr_db.len() / 2;
    let mut scores = Vec::with_capacity(BETA_GRID.len());
    for &b in &BETA_GRID {
        let rec = run_point(cfg, detector, si, b)?;
        scores.push((b, rec.last().expect("one record per iteration").ber));
    }
    let chosen = scores
        .iter()
        .fold(None::<(f64, f64)>, |best, &(b, ber)| match best {
            Some((_, e)) if e <= ber => best,
            _ => Some((b, ber)),
        })
        .expect("grid is nonempty")
        .0;
    Ok(BetaCalibration {
        detector,
        snr_db: cfg.snr_db[si],
        scores,
        chosen,
    })
}

pub const CSV_HEADER: &str =
    "detector,snr_db,iteration,trials_bits,bit_errors,ber,ci_halfwidth,seed";

/// `printf("%g")` with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn to_csv(records: &[BerRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.detector,
            format_sig6(r.snr_db),
            r.iteration,
            r.trials_bits,
            r.bit_errors,
            format_sig6(r.ber),
            format_sig6(r.ci_halfwidth),
            r.seed
        ));
    }
    out
}

pub fn write_csv(records: &[BerRecord], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, to_csv(records)).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

//! Widely-linear multi-branch decision-feedback detection for multiuser
//! MIMO receivers with I/Q imbalance, reference detectors, a rate-1/2
//! convolutional code with BCJR decoding, iterative detection and decoding,
//! and a seeded Monte Carlo BER harness.

pub mod baselines;
pub mod coding;
pub mod harness;
pub mod idd;
pub mod mbdf;
pub mod numerics;
pub mod selfcheck;
pub mod signal;

pub use harness::{run_sweep, BerRecord, DetectorKind, HarnessError, SimConfig};
pub use mbdf::{design_branch_filters, detect_frame, BranchFilterBank};
pub use numerics::{CMatrix, CVector, SeededRng};
pub use signal::{
    build_second_order_stats, AugmentedStatistics, Domain, IqImbalance, Modulation, SystemDims,
};

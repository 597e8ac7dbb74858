//! Quick consistency checks run by `wlmbdf validate`. Each check compares
//! the library against an independent route on a handful of random draws.

use num_complex::Complex64;

use crate::baselines::sic_detect;
use crate::coding::ConvCode;
use crate::harness::snr_to_noise_variance;
use crate::mbdf::{build_shape_constraint, design_branch_filters, design_filter, detect_frame};
use crate::numerics::{complex_gaussian_matrix, hermitian_solve, CMatrix, SeededRng};
use crate::signal::{
    build_second_order_stats, generate_channel, observation, random_bits, random_transmission,
    Domain, ImbalanceRanges, Modulation, SystemDims,
};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        solver_residual(seed),
        snr_formula(),
        statistics_structure(seed),
        feedback_constraint(seed),
        bcjr_enumeration(seed),
        circular_reduction(seed),
        sic_equivalence(seed),
    ]
}

fn solver_residual(seed: u64) -> CheckOutcome {
    let mut rng = SeededRng::new(seed, 1);
    let mut worst: f64 = 0.0;
    for n in [2, 8, 32] {
        let g = complex_gaussian_matrix(&mut rng, n, n, 1.0).expect("valid variance");
        let a = &g * g.adjoint() + CMatrix::identity(n, n);
        let b = complex_gaussian_matrix(&mut rng, n, 3, 1.0).expect("valid variance");
        match hermitian_solve(&a, &b) {
            Ok(sol) => worst = worst.max((&a * &sol.x - &b).norm() / b.norm()),
            Err(e) => return outcome("hermitian solve", false, e.to_string()),
        }
    }
    outcome(
        "hermitian solve",
        worst < 1e-10,
        format!("worst relative residual {worst:.2e}"),
    )
}

fn snr_formula() -> CheckOutcome {
    let v = snr_to_noise_variance(10.0, 8, 1.0, 1.0, 2);
    outcome(
        "snr to noise variance",
        (v - 0.4).abs() < 1e-15,
        format!("{v}"),
    )
}

fn statistics_structure(seed: u64) -> CheckOutcome {
    let mut rng = SeededRng::new(seed, 2);
    let dims = SystemDims::new(2, 2, 6).expect("valid dims");
    let m = Modulation::qpsk();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let ch = generate_channel(&dims, &mut rng);
        let iq = ImbalanceRanges::default().draw(6, &mut rng);
        let st = match build_second_order_stats(&ch.h, &m, 0.3, &iq) {
            Ok(st) => st,
            Err(e) => return outcome("augmented statistics", false, e.to_string()),
        };
        worst = worst.max((&st.r_a - st.r_a.adjoint()).norm());
        for (j, p) in st.p_a.iter().enumerate() {
            worst = worst.max((st.q_a.column(j) - p).norm());
        }
    }
    outcome(
        "augmented statistics",
        worst < 1e-12,
        format!("max deviation {worst:.2e}"),
    )
}

fn feedback_constraint(seed: u64) -> CheckOutcome {
    let mut rng = SeededRng::new(seed, 3);
    let dims = SystemDims::new(2, 2, 6).expect("valid dims");
    let m = Modulation::qpsk();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let ch = generate_channel(&dims, &mut rng);
        let iq = ImbalanceRanges::default().draw(6, &mut rng);
        let st = build_second_order_stats(&ch.h, &m, 0.2, &iq).expect("consistent shapes");
        let fs = st.filter_statistics(Domain::WidelyLinear);
        let order = vec![2, 0, 3, 1];
        for p in 1..=4 {
            let c = build_shape_constraint(p, 1, &order).expect("valid order");
            match design_filter(&fs, &c, 0.7) {
                Ok(filt) => worst = worst.max((c.matrix() * &filt.f).norm()),
                Err(e) => return outcome("feedback shape constraint", false, e.to_string()),
            }
        }
    }
    outcome(
        "feedback shape constraint",
        worst <= 1e-10,
        format!("max |S f| {worst:.2e}"),
    )
}

fn bcjr_enumeration(seed: u64) -> CheckOutcome {
    let code = ConvCode;
    let mut rng = SeededRng::new(seed, 4);
    let n_info = 5;
    let codewords: Vec<(Vec<u8>, Vec<u8>)> = (0..1u32 << n_info)
        .map(|x| {
            let info: Vec<u8> = (0..n_info).map(|i| ((x >> i) & 1) as u8).collect();
            let cw = code.encode(&info);
            (info, cw)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let coded: Vec<f64> = random_bits(&mut rng, code.coded_len(n_info))
            .iter()
            .enumerate()
            .map(|(i, &b)| (i as f64 * 0.37).sin() * 3.0 + if b == 0 { 0.5 } else { -0.5 })
            .collect();
        let out = match code.bcjr_decode(&coded, &vec![0.0; n_info]) {
            Ok(o) => o,
            Err(e) => return outcome("BCJR against enumeration", false, e.to_string()),
        };
        for i in 0..n_info {
            let mut num = 0.0;
            let mut den = 0.0;
            for (info, cw) in &codewords {
                let metric: f64 = cw
                    .iter()
                    .zip(&coded)
                    .map(|(&b, &l)| if b == 0 { 0.5 * l } else { -0.5 * l })
                    .sum();
                if info[i] == 0 {
                    num += metric.exp();
                } else {
                    den += metric.exp();
                }
            }
            worst = worst.max((out.info_posterior[i] - (num / den).ln()).abs());
        }
    }
    outcome(
        "BCJR against enumeration",
        worst < 1e-6,
        format!("max LLR error {worst:.2e}"),
    )
}

fn circular_reduction(seed: u64) -> CheckOutcome {
    let dims = SystemDims::new(2, 2, 8).expect("valid dims");
    let m = Modulation::qpsk();
    let mut mismatches = 0;
    let mut lower: f64 = 0.0;
    for k in 0..20 {
        let mut rng = SeededRng::new(seed, 100 + k);
        let mut ch = generate_channel(&dims, &mut rng);
        ch.noise_variance = 0.3;
        let iq = ImbalanceRanges::disabled().draw(8, &mut rng);
        let tx = random_transmission(&ch, &iq, &m, 20, &mut rng).expect("consistent shapes");
        let st = build_second_order_stats(&ch.h, &m, 0.3, &iq).expect("consistent shapes");
        let (g1, g2) = iq.distorted_channels(&ch.h);
        let mut run = |domain| -> Result<CMatrix, String> {
            let bank = design_branch_filters(&st.filter_statistics(domain), 4, 1.0)
                .map_err(|e| e.to_string())?;
            for f in bank.branches.iter().flat_map(|b| &b.filters) {
                if domain == Domain::WidelyLinear {
                    let n = f.w.len() / 2;
                    lower = lower.max(f.w.rows(n, n).norm());
                }
            }
            let obs = observation(&tx.r_iq, domain);
            detect_frame(&bank, &obs, &tx.r_iq, (&g1, &g2), &m)
                .map(|d| d.symbols)
                .map_err(|e| e.to_string())
        };
        let (wl, lin) = match (run(Domain::WidelyLinear), run(Domain::Linear)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return outcome("circular reduction", false, e),
        };
        mismatches += wl.iter().zip(lin.iter()).filter(|(a, b)| a != b).count();
    }
    outcome(
        "circular reduction",
        mismatches == 0 && lower <= 1e-10,
        format!("{mismatches} mismatched decisions, max conjugate-tap norm {lower:.2e}"),
    )
}

fn sic_equivalence(seed: u64) -> CheckOutcome {
    let dims = SystemDims::new(2, 2, 6).expect("valid dims");
    let m = Modulation::qpsk();
    let mut mismatches = 0;
    for k in 0..20 {
        let mut rng = SeededRng::new(seed, 200 + k);
        let mut ch = generate_channel(&dims, &mut rng);
        ch.noise_variance = 0.4;
        let iq = ImbalanceRanges::default().draw(6, &mut rng);
        let tx = random_transmission(&ch, &iq, &m, 20, &mut rng).expect("consistent shapes");
        let st = build_second_order_stats(&ch.h, &m, 0.4, &iq).expect("consistent shapes");
        let fs = st.filter_statistics(Domain::WidelyLinear);
        let obs = observation(&tx.r_iq, Domain::WidelyLinear);
        let (g1, g2) = iq.distorted_channels(&ch.h);
        let df = design_branch_filters(&fs, 1, 1.0)
            .and_then(|bank| detect_frame(&bank, &obs, &tx.r_iq, (&g1, &g2), &m));
        let (df, sic) = match (df, sic_detect(&obs, &fs, &m)) {
            (Ok(a), Ok(b)) => (a.symbols, b),
            (Err(e), _) => return outcome("WL-SIC equals single-branch DF", false, e.to_string()),
            (_, Err(e)) => return outcome("WL-SIC equals single-branch DF", false, e.to_string()),
        };
        mismatches += df
            .iter()
            .zip(sic.iter())
            .filter(|(a, b): &(&Complex64, &Complex64)| a != b)
            .count();
    }
    outcome(
        "WL-SIC equals single-branch DF",
        mismatches == 0,
        format!("{mismatches} mismatched decisions"),
    )
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

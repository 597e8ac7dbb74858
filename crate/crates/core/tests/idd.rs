use wlmbdf::coding::ConvCode;
use wlmbdf::idd::{
    detector_llrs, run_idd, run_idd_with_priors, soft_symbol, soft_symbol_matrix, CodedFrame,
    IddConfig, SoftInput,
};
use wlmbdf::mbdf::{design_branch_filters, BranchFilterBank};
use wlmbdf::numerics::{CMatrix, SeededRng};
use wlmbdf::signal::{
    build_second_order_stats, generate_channel, observation, Domain, ImbalanceRanges, Modulation,
    SystemDims,
};

struct Setup {
    frame: CodedFrame,
    bank: BranchFilterBank,
    obs: CMatrix,
}

fn setup(seed: u64, k: u64, noise: f64, symbols: usize) -> Setup {
    let dims = SystemDims::new(2, 2, 8).unwrap();
    let m = Modulation::qpsk();
    let mut rng = SeededRng::new(seed, k);
    let mut ch = generate_channel(&dims, &mut rng);
    ch.noise_variance = noise;
    let iq = ImbalanceRanges::default().draw(8, &mut rng);
    let frame = CodedFrame::generate(&ConvCode, &ch, &iq, &m, symbols, &mut rng).unwrap();
    let st = build_second_order_stats(&ch.h, &m, noise, &iq).unwrap();
    let bank = design_branch_filters(&st.filter_statistics(Domain::WidelyLinear), 4, 1.0).unwrap();
    let obs = observation(&frame.r_iq, Domain::WidelyLinear);
    Setup { frame, bank, obs }
}

fn cfg(iterations: usize) -> IddConfig {
    IddConfig {
        iterations,
        keep_trace: true,
    }
}

#[test]
fn noise_free_frames_decode_at_first_iteration() {
    for k in 0..5 {
        let s = setup(11, k, 1e-9, 200);
        let out = run_idd(
            &s.frame,
            &s.bank,
            &s.obs,
            &Modulation::qpsk(),
            &ConvCode,
            &cfg(1),
        )
        .unwrap();
        assert_eq!(out.bit_errors, vec![0]);
        assert_eq!(out.decoded, s.frame.info_bits);
    }
}

#[test]
fn llr_bookkeeping_is_additive() {
    let s = setup(12, 0, 1.5, 300);
    let out = run_idd(
        &s.frame,
        &s.bank,
        &s.obs,
        &Modulation::qpsk(),
        &ConvCode,
        &cfg(3),
    )
    .unwrap();
    assert_eq!(out.trace.len(), 3);
    for tr in &out.trace {
        for j in 0..tr.prior.len() {
            for b in 0..tr.prior[j].len() {
                assert_eq!(
                    tr.detector_posterior[j][b],
                    tr.detector_extrinsic[j][b] + tr.prior[j][b]
                );
            }
            for b in 0..tr.decoder_prior[j].len() {
                assert_eq!(
                    tr.decoder_posterior[j][b],
                    tr.decoder_extrinsic[j][b] + tr.decoder_prior[j][b]
                );
            }
        }
    }
    for w in out.trace.windows(2) {
        for j in 0..w[0].decoder_extrinsic.len() {
            let next = s
                .frame
                .interleaver
                .interleave(&w[0].decoder_extrinsic[j])
                .unwrap();
            assert_eq!(
                w[1].prior[j], next,
                "decoder extrinsic becomes the next detector prior"
            );
        }
    }
}

#[test]
fn soft_symbols_are_bounded() {
    let m = Modulation::qpsk();
    let edge = (m.symbol_power() / 2.0).sqrt();
    let mut rng = SeededRng::new(13, 0);
    for _ in 0..1000 {
        let l: Vec<f64> = (0..2)
            .map(|_| rand::Rng::random_range(&mut rng, -60.0..60.0))
            .collect();
        let s = soft_symbol(&l, &m);
        assert!(s.re.abs() <= edge + 1e-12 && s.im.abs() <= edge + 1e-12);
    }
    assert_eq!(soft_symbol(&[0.0, 0.0], &m).norm(), 0.0);
    let b = Modulation::bpsk();
    assert_eq!(soft_symbol(&[0.0], &b).norm(), 0.0);
    assert!(soft_symbol(&[200.0], &b).norm() <= b.symbol_power().sqrt() + 1e-12);
}

#[test]
fn detector_output_ignores_own_prior() {
    let m = Modulation::qpsk();
    let s = setup(14, 0, 1.0, 200);
    let cols = s.obs.ncols();
    let mut rng = SeededRng::new(14, 1);
    let priors: Vec<Vec<f64>> = (0..s.bank.streams())
        .map(|_| {
            (0..2 * cols)
                .map(|_| rand::Rng::random_range(&mut rng, -6.0..6.0))
                .collect()
        })
        .collect();
    let reference = soft_symbol_matrix(&priors, &m, cols).map(|x| m.slice(x));
    let run = |p: &[Vec<f64>]| {
        let soft = soft_symbol_matrix(p, &m, cols);
        detector_llrs(
            &s.bank,
            &s.obs,
            &m,
            Some(SoftInput {
                symbols: &soft,
                reference: &reference,
            }),
        )
        .unwrap()
    };
    let base = run(&priors);
    for (j, bit) in [(0, 0), (1, 37), (3, 2 * cols - 1)] {
        let mut zeroed = priors.clone();
        zeroed[j][bit] = 0.0;
        assert_eq!(run(&zeroed)[j][bit], base[j][bit], "stream {j} bit {bit}");
    }
}

#[test]
fn genie_priors_do_not_hurt() {
    let m = Modulation::qpsk();
    let (mut cold, mut genie) = (0, 0);
    for k in 0..10 {
        let s = setup(15, k, 2.5, 300);
        let priors: Vec<Vec<f64>> = s
            .frame
            .interleaved_bits
            .iter()
            .map(|bits| {
                bits.iter()
                    .map(|&b| if b == 0 { 8.0 } else { -8.0 })
                    .collect()
            })
            .collect();
        let c = run_idd(&s.frame, &s.bank, &s.obs, &m, &ConvCode, &cfg(1)).unwrap();
        let g = run_idd_with_priors(
            &s.frame,
            &s.bank,
            &s.obs,
            &m,
            &ConvCode,
            &cfg(1),
            Some(&priors),
        )
        .unwrap();
        cold += c.bit_errors[0];
        genie += g.bit_errors[0];
    }
    assert!(cold > 0, "operating point should produce cold-start errors");
    assert!(genie <= cold, "genie {genie} vs cold {cold}");
}

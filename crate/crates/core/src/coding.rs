//! Rate-1/2 feedforward convolutional code with generators (7, 5) octal,
//! random interleaving, and log-domain BCJR decoding.
//!
//! LLRs follow `L = ln P(b = 0) / P(b = 1)`, matching the bit 0 ↔ +1 mapping
//! of the constellations.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::numerics::SeededRng;

/// Magnitude every LLR leaving this module is clamped to.
pub const LLR_CLAMP: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("coded length {0} is not twice an info length plus tail")]
    CodedLength(usize),
}

pub fn clamp_llr(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-LLR_CLAMP, LLR_CLAMP)
    }
}

/// Jacobian logarithm `ln(eᵃ + eᵇ)`.
#[inline]
pub fn max_star(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    a.max(b) + (-(a - b).abs()).exp().ln_1p()
}

/// Terminated 4-state code; the encoder appends two zero tail bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCode;

/// One trellis section: outputs and next state for `(state, input)`.
/// The state holds the previous input in bit 1 and the one before in bit 0.
#[inline]
fn step(state: usize, input: usize) -> (usize, [u8; 2]) {
    let s1 = (state >> 1) & 1;
    let s2 = state & 1;
    let o0 = (input ^ s1 ^ s2) as u8;
    let o1 = (input ^ s2) as u8;
    ((input << 1) | s1, [o0, o1])
}

impl ConvCode {
    pub const STATES: usize = 4;
    pub const TAIL: usize = 2;

    pub fn rate(&self) -> f64 {
        0.5
    }

    pub fn coded_len(&self, info_len: usize) -> usize {
        2 * (info_len + Self::TAIL)
    }

    pub fn info_len(&self, coded_len: usize) -> Result<usize, CodingError> {
        if !coded_len.is_multiple_of(2) || coded_len < 2 * Self::TAIL {
            return Err(CodingError::CodedLength(coded_len));
        }
        Ok(coded_len / 2 - Self::TAIL)
    }

    pub fn encode(&self, info: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.coded_len(info.len()));
        let mut state = 0;
        for &u in info.iter().chain([0u8, 0].iter()) {
            let (next, o) = step(state, (u & 1) as usize);
            out.extend_from_slice(&o);
            state = next;
        }
        out
    }

    /// Log-MAP forward-backward pass.
    ///
    /// `coded_prior` holds one LLR per coded bit (tail included), `info_prior`
    /// one per information bit. Returns the information-bit a-posteriori LLRs
    /// and the coded-bit extrinsic LLRs (a-posteriori minus prior).
    pub fn bcjr_decode(
        &self,
        coded_prior: &[f64],
        info_prior: &[f64],
    ) -> Result<BcjrOutput, CodingError> {
        let n_info = self.info_len(coded_prior.len())?;
        if info_prior.len() != n_info {
            return Err(CodingError::Length {
                expected: n_info,
                got: info_prior.len(),
            });
        }
        let steps = n_info + Self::TAIL;
        let ns = Self::STATES;
        let half = |l: f64, bit: u8| if bit == 0 { 0.5 * l } else { -0.5 * l };
        let ninf = f64::NEG_INFINITY;

        // gamma[k][state][input]
        let gamma: Vec<[[f64; 2]; 4]> = (0..steps)
            .map(|k| {
                let mut g = [[ninf; 2]; 4];
                for (s, gs) in g.iter_mut().enumerate() {
                    for u in 0..2 {
                        let info_term = if k < n_info {
                            half(info_prior[k], u as u8)
                        } else if u == 1 {
                            continue;
                        } else {
                            0.0
                        };
                        let (_, o) = step(s, u);
                        gs[u] = info_term
                            + half(coded_prior[2 * k], o[0])
                            + half(coded_prior[2 * k + 1], o[1]);
                    }
                }
                g
            })
            .collect();

        let mut alpha = vec![[ninf; 4]; steps + 1];
        alpha[0][0] = 0.0;
        for k in 0..steps {
            let mut next = [ninf; 4];
            for s in 0..ns {
                if alpha[k][s] == ninf {
                    continue;
                }
                for u in 0..2 {
                    let (t, _) = step(s, u);
                    next[t] = max_star(next[t], alpha[k][s] + gamma[k][s][u]);
                }
            }
            let norm = next.iter().copied().fold(ninf, f64::max);
            alpha[k + 1] = next.map(|v| v - norm);
        }

        let mut beta = vec![[ninf; 4]; steps + 1];
        beta[steps][0] = 0.0;
        for k in (0..steps).rev() {
            let mut cur = [ninf; 4];
            for (s, c) in cur.iter_mut().enumerate() {
                for u in 0..2 {
                    let (t, _) = step(s, u);
                    *c = max_star(*c, gamma[k][s][u] + beta[k + 1][t]);
                }
            }
            let norm = cur.iter().copied().fold(ninf, f64::max);
            beta[k] = cur.map(|v| v - norm);
        }

        let mut info_posterior = Vec::with_capacity(n_info);
        let mut coded_extrinsic = Vec::with_capacity(coded_prior.len());
        for k in 0..steps {
            let mut info_acc = [ninf; 2];
            let mut coded_acc = [[ninf; 2]; 2];
            for s in 0..ns {
                for u in 0..2 {
                    let m = alpha[k][s] + gamma[k][s][u];
                    if m == ninf {
                        continue;
                    }
                    let (t, o) = step(s, u);
                    let v = m + beta[k + 1][t];
                    info_acc[u] = max_star(info_acc[u], v);
                    for c in 0..2 {
                        coded_acc[c][o[c] as usize] = max_star(coded_acc[c][o[c] as usize], v);
                    }
                }
            }
            if k < n_info {
                info_posterior.push(clamp_llr(info_acc[0] - info_acc[1]));
            }
            for c in 0..2 {
                let post = coded_acc[c][0] - coded_acc[c][1];
                coded_extrinsic.push(clamp_llr(post - coded_prior[2 * k + c]));
            }
        }
        Ok(BcjrOutput {
            info_posterior,
            coded_extrinsic,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcjrOutput {
    pub info_posterior: Vec<f64>,
    pub coded_extrinsic: Vec<f64>,
}

/// Fixed permutation: `interleave(x)[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaver {
    perm: Vec<usize>,
}

impl Interleaver {
    pub fn identity(len: usize) -> Self {
        Self {
            perm: (0..len).collect(),
        }
    }

    pub fn random(len: usize, rng: &mut SeededRng) -> Self {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        Self { perm }
    }

    pub fn from_permutation(perm: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return None;
            }
        }
        Some(Self { perm })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn interleave<T: Copy>(&self, x: &[T]) -> Result<Vec<T>, CodingError> {
        self.check(x.len())?;
        Ok(self.perm.iter().map(|&p| x[p]).collect())
    }

    pub fn deinterleave<T: Copy + Default>(&self, y: &[T]) -> Result<Vec<T>, CodingError> {
        self.check(y.len())?;
        let mut x = vec![T::default(); y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        Ok(x)
    }

    fn check(&self, len: usize) -> Result<(), CodingError> {
        if len != self.perm.len() {
            return Err(CodingError::Length {
                expected: self.perm.len(),
                got: len,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn encoder_examples() {
        let code = ConvCode;
        assert_eq!(code.encode(&[0; 6]), vec![0; 16]);
        // Register input 1, 0, 0: the single info bit plus the tail.
        assert_eq!(code.encode(&[1]), vec![1, 1, 1, 0, 1, 1]);
        assert_eq!(&code.encode(&[1, 0, 0])[..6], &[1, 1, 1, 0, 1, 1]);
        assert_eq!(code.coded_len(10), 24);
        assert_eq!(code.info_len(24), Ok(10));
        assert!(code.info_len(7).is_err());
    }

    fn to_llr(bits: &[u8], mag: f64) -> Vec<f64> {
        bits.iter()
            .map(|&b| if b == 0 { mag } else { -mag })
            .collect()
    }

    #[test]
    fn saturated_priors_decode_exactly() {
        let code = ConvCode;
        let mut rng = SeededRng::new(5, 0);
        let info: Vec<u8> = (0..40).map(|_| rng.random_range(0..2u8)).collect();
        let coded = code.encode(&info);
        let out = code
            .bcjr_decode(&to_llr(&coded, 50.0), &vec![0.0; 40])
            .unwrap();
        let decided: Vec<u8> = out
            .info_posterior
            .iter()
            .map(|&l| u8::from(l < 0.0))
            .collect();
        assert_eq!(decided, info);
        for (e, &b) in out.coded_extrinsic.iter().zip(&coded) {
            assert_eq!(*e > 0.0, b == 0);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let out = ConvCode.bcjr_decode(&[0.0; 20], &[0.0; 8]).unwrap();
        assert!(out.info_posterior.iter().all(|x| x.abs() < 1e-12));
        assert!(out.coded_extrinsic.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn length_errors() {
        assert!(ConvCode.bcjr_decode(&[0.0; 20], &[0.0; 7]).is_err());
        assert!(ConvCode.bcjr_decode(&[0.0; 21], &[0.0; 8]).is_err());
    }

    #[test]
    fn extrinsic_ignores_own_prior() {
        let code = ConvCode;
        let mut rng = SeededRng::new(8, 1);
        let prior: Vec<f64> = (0..24).map(|_| rng.random_range(-4.0..4.0)).collect();
        let base = code.bcjr_decode(&prior, &[0.0; 10]).unwrap();
        for k in 0..prior.len() {
            let mut p = prior.clone();
            p[k] = 0.0;
            let e = code.bcjr_decode(&p, &[0.0; 10]).unwrap().coded_extrinsic[k];
            assert!((e - base.coded_extrinsic[k]).abs() < 1e-9, "bit {k}");
        }
    }

    #[test]
    fn interleaver_basics() {
        let id = Interleaver::identity(5);
        assert_eq!(
            id.interleave(&[1, 2, 3, 4, 5]).unwrap(),
            vec![1, 2, 3, 4, 5]
        );
        let a = Interleaver::random(64, &mut SeededRng::new(3, 3));
        let b = Interleaver::random(64, &mut SeededRng::new(3, 3));
        assert_eq!(a, b);
        assert!(a.interleave(&[0u8; 3]).is_err());
        assert!(a.deinterleave(&[0u8; 65]).is_err());
        assert!(Interleaver::from_permutation(vec![0, 0]).is_none());
        assert!(Interleaver::from_permutation(vec![1, 0]).is_some());
    }

    proptest! {
        #[test]
        fn interleaver_round_trip(seed in any::<u64>(), len in 1usize..300) {
            let il = Interleaver::random(len, &mut SeededRng::new(seed, 0));
            let x: Vec<u32> = (0..len as u32).collect();
            let y = il.interleave(&x).unwrap();
            prop_assert_eq!(il.deinterleave(&y).unwrap(), x);
        }

        #[test]
        fn noiseless_round_trip(bits in proptest::collection::vec(0u8..2, 1..64)) {
            let code = ConvCode;
            let coded = code.encode(&bits);
            let out = code.bcjr_decode(&to_llr(&coded, 4.0), &vec![0.0; bits.len()]).unwrap();
            let decided: Vec<u8> = out.info_posterior.iter().map(|&l| u8::from(l < 0.0)).collect();
            prop_assert_eq!(decided, bits);
        }
    }
}

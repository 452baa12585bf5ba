//! Mixture-of-Gaussians output head whose means are shifted by the linear
//! prediction of the current sample.
//!
//! The network emits raw vectors `[z_w, z_mu, z_s]` describing the excitation
//! density. Because the prediction `p_n` is a known constant at sample `n`,
//! the speech density is the same mixture with every mean moved by `p_n`:
//! gains and scales are shared, `mu = z_mu + p_n`.


use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::grad::{logsumexp, Graph, GradError, Rng, Tensor, Var};

/// Raw log-scales are clamped to this range before exponentiation.
pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 5.0;
pub const DEFAULT_SHARPEN: f64 = 0.7;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpMdnError {
    #[error("non-finite network head value")]
    NonFiniteHeads,
    #[error("head width {width} does not fit {mixtures} mixtures (expected {expected})")]
    HeadWidth {
        width: usize,
        mixtures: usize,
        expected: usize,
    },
    #[error("sharpening factor must be in (0, 1], got {0}")]
    SharpenFactor(f64),
    #[error(transparent)]
    Graph(#[from] GradError),
}

/// Width of the output layer for `mixtures` components (2 for a single Gaussian).
pub fn head_width(mixtures: usize) -> usize {
    if mixtures == 1 {
        2
    } else {
        3 * mixtures
    }
}

/// Raw network outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NetHeads {
    /// Gain logits; empty for a single Gaussian.
    pub z_w: Vec<f64>,
    pub z_mu: Vec<f64>,
    /// Raw log-scales.
    pub z_s: Vec<f64>,
}

impl NetHeads {
    /// Splits an output row laid out as `[z_w, z_mu, z_s]` (`[z_mu, z_s]` when N=1).
    pub fn from_row(row: &[f64], mixtures: usize) -> Result<Self, LpMdnError> {
        let expected = head_width(mixtures);
        if row.len() != expected {
            return Err(LpMdnError::HeadWidth {
                width: row.len(),
                mixtures,
                expected,
            });
        }
        Ok(if mixtures == 1 {
            Self {
                z_w: Vec::new(),
                z_mu: vec![row[0]],
                z_s: vec![row[1]],
            }
        } else {
            let n = mixtures;
            Self {
                z_w: row[..n].to_vec(),
                z_mu: row[n..2 * n].to_vec(),
                z_s: row[2 * n..].to_vec(),
            }
        })
    }

    pub fn mixtures(&self) -> usize {
        self.z_mu.len()
    }

    fn is_finite(&self) -> bool {
        self.z_w.iter().chain(&self.z_mu).chain(&self.z_s).all(|v| v.is_finite())
    }
}

/// Gains, means and scales of a Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MogParams {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub s: Vec<f64>,
}

impl MogParams {
    pub fn mixtures(&self) -> usize {
        self.w.len()
    }

    /// `Σ wᵢ μᵢ`
    pub fn mean(&self) -> f64 {
        self.w.iter().zip(&self.mu).map(|(w, m)| w * m).sum()
    }

    /// Index of the largest gain.
    pub fn dominant(&self) -> usize {
        (0..self.w.len()).fold(0, |best, i| if self.w[i] > self.w[best] { i } else { best })
    }
}

/// Speech mixture from raw heads and the prediction `p_n`:
/// `w = softmax(z_w)`, `mu = z_mu + p_n`, `s = exp(clamp(z_s))`.
pub fn heads_to_mog(heads: &NetHeads, prediction: f64) -> Result<MogParams, LpMdnError> {
    if !heads.is_finite() || !prediction.is_finite() {
        return Err(LpMdnError::NonFiniteHeads);
    }
    let n = heads.mixtures();
    let w = if heads.z_w.is_empty() {
        vec![1.0; n]
    } else {
        let m = heads.z_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = heads.z_w.iter().map(|z| (z - m).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    };
    let mu = heads.z_mu.iter().map(|z| z + prediction).collect();
    let s = heads
        .z_s
        .iter()
        .map(|z| z.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp())
        .collect();
    Ok(MogParams { w, mu, s })
}

/// `−log Σᵢ wᵢ·N(x; μᵢ, sᵢ²)`, evaluated with log-sum-exp.
pub fn mog_nll(dist: &MogParams, x: f64) -> f64 {
    let comps: Vec<f64> = (0..dist.mixtures())
        .map(|i| {
            let u = (x - dist.mu[i]) / dist.s[i];
            dist.w[i].ln() - dist.s[i].ln() - HALF_LOG_2PI - 0.5 * u * u
        })
        .collect();
    -logsumexp(&comps)
}

/// Tolerance of [`shift_invariance_check`], relative to the NLL magnitude.
pub const SHIFT_TOLERANCE: f64 = 1e-12;

/// Whether the shifted speech density scores `x` exactly like the excitation
/// density scores the residual `x − p`.
pub fn shift_invariance_check(heads: &NetHeads, prediction: f64, x: f64) -> bool {
    let (Ok(speech), Ok(excitation)) = (heads_to_mog(heads, prediction), heads_to_mog(heads, 0.0)) else {
        return false;
    };
    let a = mog_nll(&speech, x);
    let b = mog_nll(&excitation, x - prediction);
    (a - b).abs() <= SHIFT_TOLERANCE * a.abs().max(1.0)
}

/// Ancestral sample: pick a component by gain, then draw from it.
pub fn mog_sample(dist: &MogParams, rng: &mut Rng) -> f64 {
    let i = if dist.mixtures() == 1 {
        0
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = dist.mixtures() - 1;
        for (i, w) in dist.w.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let z: f64 = StandardNormal.sample(rng);
    dist.mu[i] + dist.s[i] * z
}

/// Scales every component's spread by `factor` in voiced frames.
pub fn sharpen(dist: &MogParams, voiced: bool, factor: f64) -> Result<MogParams, LpMdnError> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(LpMdnError::SharpenFactor(factor));
    }
    let mut out = dist.clone();
    if voiced {
        out.s.iter_mut().for_each(|s| *s *= factor);
    }
    Ok(out)
}

/// Graph outputs of the head over a batch of samples.
pub struct HeadLoss {
    /// Mean NLL over all rows (scalar).
    pub nll: Var,
    /// Per-row mixture mean `Σ wᵢ μᵢ` (`rows × 1`).
    pub mixture_mean: Var,
}

/// Differentiable NLL for `rows` samples: `heads` is `rows × head_width`,
/// `prediction` and `target` are `rows × 1` constants.
pub fn head_loss(g: &mut Graph, heads: Var, prediction: Var, target: Var, mixtures: usize) -> Result<HeadLoss, LpMdnError> {
    let width = g.value(heads).cols();
    let expected = head_width(mixtures);
    if width != expected {
        return Err(LpMdnError::HeadWidth {
            width,
            mixtures,
            expected,
        });
    }
    if mixtures == 1 {
        let z_mu = g.slice_cols(heads, 0, 1)?;
        let z_s = g.slice_cols(heads, 1, 2)?;
        let mu = g.add(z_mu, prediction)?;
        let log_s = g.clamp(z_s, LOG_SCALE_MIN, LOG_SCALE_MAX)?;
        let neg = g.scale(log_s, -1.0)?;
        let inv_s = g.exp(neg)?;
        let d = g.sub(target, mu)?;
        let u = g.mul(d, inv_s)?;
        let u2 = g.square(u)?;
        let quad = g.affine(u2, 0.5, HALF_LOG_2PI)?;
        let per = g.add(quad, log_s)?;
        let nll = g.mean(per)?;
        return Ok(HeadLoss { nll, mixture_mean: mu });
    }

    let rows = g.value(heads).rows();
    let n = mixtures;
    let ones = g.constant(Tensor::full(&[1, n], 1.0))?;
    let spread = |g: &mut Graph, col: Var| g.matmul(col, ones);

    let z_w = g.slice_cols(heads, 0, n)?;
    let z_mu = g.slice_cols(heads, n, 2 * n)?;
    let z_s = g.slice_cols(heads, 2 * n, 3 * n)?;

    let lse_w = g.logsumexp(z_w)?;
    let lse_w = spread(g, lse_w)?;
    let log_w = g.sub(z_w, lse_w)?;
    let p = spread(g, prediction)?;
    let mu = g.add(z_mu, p)?;
    let log_s = g.clamp(z_s, LOG_SCALE_MIN, LOG_SCALE_MAX)?;
    let neg = g.scale(log_s, -1.0)?;
    let inv_s = g.exp(neg)?;
    let x = spread(g, target)?;
    let d = g.sub(x, mu)?;
    let u = g.mul(d, inv_s)?;
    let u2 = g.square(u)?;
    let quad = g.affine(u2, -0.5, -HALF_LOG_2PI)?;
    let comp = g.sub(quad, log_s)?;
    let comp = g.add(comp, log_w)?;
    let log_lik = g.logsumexp(comp)?;
    let mean_ll = g.mean(log_lik)?;
    let nll = g.scale(mean_ll, -1.0)?;

    let w = g.softmax(z_w)?;
    let wm = g.mul(w, mu)?;
    let mixture_mean = g.sum_last(wm)?;
    debug_assert_eq!(g.value(mixture_mean).rows(), rows);
    Ok(HeadLoss { nll, mixture_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::gradcheck::check_gradients;
    use crate::grad::seeded_rng;
    use std::f64::consts::PI;
    use proptest::prelude::*;

    type Rng = super::Rng;

    fn single(mu: f64, z_s: f64) -> NetHeads {
        NetHeads {
            z_w: vec![],
            z_mu: vec![mu],
            z_s: vec![z_s],
        }
    }

    fn random_heads(rng: &mut Rng, n: usize) -> NetHeads {
        NetHeads {
            z_w: if n == 1 { vec![] } else { (0..n).map(|_| rng.random_range(-3.0..3.0)).collect() },
            z_mu: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            z_s: (0..n).map(|_| rng.random_range(-4.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_prediction_keeps_means() {
        let h = single(0.123, -1.0);
        let d = heads_to_mog(&h, 0.0).unwrap();
        assert_eq!(d.mu, vec![0.123]);
    }

    #[test]
    fn prediction_shifts_mean_only() {
        let h = single(0.1, 0.0);
        let d = heads_to_mog(&h, 0.34).unwrap();
        assert!((d.mu[0] - 0.44).abs() < 1e-15);
        assert_eq!(d.w, vec![1.0]);
        assert_eq!(d.s, vec![1.0]);
    }

    #[test]
    fn scales_are_clamped() {
        let d = heads_to_mog(&single(0.0, -50.0), 0.0).unwrap();
        assert_eq!(d.s[0], LOG_SCALE_MIN.exp());
        let d = heads_to_mog(&single(0.0, 50.0), 0.0).unwrap();
        assert_eq!(d.s[0], LOG_SCALE_MAX.exp());
    }

    #[test]
    fn non_finite_heads_rejected() {
        assert_eq!(heads_to_mog(&single(f64::NAN, 0.0), 0.0), Err(LpMdnError::NonFiniteHeads));
    }

    #[test]
    fn analytic_nll_values() {
        let d = heads_to_mog(&single(0.0, 0.0), 0.0).unwrap();
        assert!((mog_nll(&d, 0.0) - 0.918_938_5).abs() < 1e-6);
        assert!((mog_nll(&d, 1.0) - 1.418_938_5).abs() < 1e-6);
        assert!((mog_nll(&d, 0.0) - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn two_component_nll_by_direct_summation() {
        let d = MogParams {
            w: vec![0.5, 0.5],
            mu: vec![-1.0, 1.0],
            s: vec![1.0, 1.0],
        };
        let density = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp() / (2.0 * PI).sqrt();
        let direct = -(0.5 * density(0.0, -1.0) + 0.5 * density(0.0, 1.0)).ln();
        assert!((mog_nll(&d, 0.0) - direct).abs() < 1e-14);
        assert!((mog_nll(&d, 0.0) - 1.418_938_5).abs() < 1e-6);
    }

    #[test]
    fn head_width_parsing() {
        assert_eq!(head_width(1), 2);
        assert_eq!(head_width(4), 12);
        let h = NetHeads::from_row(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        assert_eq!(h.z_w, vec![1.0, 2.0]);
        assert_eq!(h.z_mu, vec![3.0, 4.0]);
        assert_eq!(h.z_s, vec![5.0, 6.0]);
        assert!(NetHeads::from_row(&[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn shift_identity_examples() {
        assert!(shift_invariance_check(&single(0.2, -2.0), 0.0, 0.7));
        let mut rng = seeded_rng(12);
        let h = random_heads(&mut rng, 3);
        assert!(shift_invariance_check(&h, 0.34, 0.2));
    }

    #[test]
    fn shift_identity_sweep() {
        let mut rng = seeded_rng(2024);
        for i in 0..10_000 {
            let n = 1 + i % 4;
            let h = random_heads(&mut rng, n);
            let p = rng.random_range(-1.0..1.0);
            let x = rng.random_range(-1.0..1.0);
            assert!(shift_invariance_check(&h, p, x), "draw {i}");
        }
    }

    #[test]
    fn sampling_picks_certain_component() {
        let d = MogParams {
            w: vec![1.0, 0.0],
            mu: vec![5.0, -5.0],
            s: vec![0.1, 0.1],
        };
        let mut rng = seeded_rng(1);
        for _ in 0..1000 {
            assert!(mog_sample(&d, &mut rng) > 4.0);
        }
    }

    #[test]
    fn sampling_at_scale_floor_returns_mean() {
        let d = heads_to_mog(&single(0.25, -100.0), 0.0).unwrap();
        let mut rng = seeded_rng(3);
        let x = mog_sample(&d, &mut rng);
        assert!((x - 0.25).abs() < 0.01);
    }

    #[test]
    fn sample_moments() {
        let d = MogParams {
            w: vec![1.0],
            mu: vec![0.3],
            s: vec![0.2],
        };
        let mut rng = seeded_rng(99);
        let xs: Vec<f64> = (0..100_000).map(|_| mog_sample(&d, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((mean - 0.3).abs() < 0.002, "{mean}");
        assert!((std - 0.2).abs() < 0.002, "{std}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = MogParams {
            w: vec![0.2, 0.8],
            mu: vec![0.0, 1.0],
            s: vec![0.5, 0.1],
        };
        let a: Vec<f64> = {
            let mut r = seeded_rng(5);
            (0..100).map(|_| mog_sample(&d, &mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = seeded_rng(5);
            (0..100).map(|_| mog_sample(&d, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sharpen_examples() {
        let d = MogParams {
            w: vec![1.0],
            mu: vec![0.1],
            s: vec![0.2],
        };
        assert_eq!(sharpen(&d, false, 0.7).unwrap(), d);
        let v = sharpen(&d, true, 0.7).unwrap();
        assert!((v.s[0] - 0.14).abs() < 1e-15);
        assert_eq!(v.mu, d.mu);
        assert!(matches!(sharpen(&d, true, 0.0), Err(LpMdnError::SharpenFactor(_))));
        assert!(sharpen(&d, true, 1.5).is_err());
    }

    #[test]
    fn sharpened_variance_ratio() {
        let h = single(0.05, -2.0);
        let d = heads_to_mog(&h, 0.1).unwrap();
        let sharp = sharpen(&d, true, 0.7).unwrap();
        let var = |dist: &MogParams| {
            let mut rng = seeded_rng(7);
            let xs: Vec<f64> = (0..100_000).map(|_| mog_sample(dist, &mut rng)).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let ratio = var(&sharp) / var(&d);
        assert!((ratio / 0.49 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn graph_nll_matches_scalar_path() {
        let mut rng = seeded_rng(40);
        for n in [1usize, 3] {
            let rows = 5;
            let w = head_width(n);
            let heads: Vec<f64> = (0..rows * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pred: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect();
            let tgt: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut g = Graph::new();
            let hv = g.constant(Tensor::new(&[rows, w], heads.clone()).unwrap()).unwrap();
            let pv = g.constant(Tensor::new(&[rows, 1], pred.clone()).unwrap()).unwrap();
            let tv = g.constant(Tensor::new(&[rows, 1], tgt.clone()).unwrap()).unwrap();
            let out = head_loss(&mut g, hv, pv, tv, n).unwrap();
            let mut want = 0.0;
            for r in 0..rows {
                let d = heads_to_mog(&NetHeads::from_row(&heads[r * w..(r + 1) * w], n).unwrap(), pred[r]).unwrap();
                want += mog_nll(&d, tgt[r]);
                assert!((g.value(out.mixture_mean).data()[r] - d.mean()).abs() < 1e-14);
            }
            want /= rows as f64;
            assert!((g.value(out.nll).item() - want).abs() < 1e-13);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for n in [1usize, 2, 3] {
            for trial in 0..10u64 {
                let mut rng = seeded_rng(500 + trial);
                let rows = 4;
                let w = head_width(n);
                // keep raw log-scales inside the clamp so the function is smooth
                let heads: Vec<f64> = (0..rows * w).map(|_| rng.random_range(-1.5..1.0)).collect();
                let pred = Tensor::new(&[rows, 1], (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
                let tgt = Tensor::new(&[rows, 1], (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
                let inputs = vec![Tensor::new(&[rows, w], heads).unwrap()];
                let report = check_gradients(
                    &inputs,
                    |xs| {
                        let mut g = Graph::new();
                        let h = g.variable(xs[0].clone()).unwrap();
                        let p = g.constant(pred.clone()).unwrap();
                        let t = g.constant(tgt.clone()).unwrap();
                        let out = head_loss(&mut g, h, p, t, n).unwrap();
                        (g, vec![h], out.nll)
                    },
                    1e-5,
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "n={n} trial {trial}: {}", report.max_rel_error);
            }
        }
    }

    proptest! {
        #[test]
        fn gains_normalized_scales_positive(
            zw in proptest::collection::vec(-20.0f64..20.0, 2..6),
            p in -1.0f64..1.0,
        ) {
            let n = zw.len();
            let h = NetHeads { z_w: zw, z_mu: vec![0.0; n], z_s: vec![0.0; n] };
            let d = heads_to_mog(&h, p).unwrap();
            prop_assert!((d.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.s.iter().all(|&s| s > 0.0));
        }

        #[test]
        fn sharpen_preserves_means_and_dominant(
            zw in proptest::collection::vec(-5.0f64..5.0, 1..5),
            factor in 0.05f64..1.0,
        ) {
            let n = zw.len();
            let h = NetHeads { z_w: if n == 1 { vec![] } else { zw }, z_mu: vec![0.3; n], z_s: vec![-1.0; n] };
            let d = heads_to_mog(&h, 0.1).unwrap();
            let s = sharpen(&d, true, factor).unwrap();
            prop_assert_eq!(s.dominant(), d.dominant());
            prop_assert_eq!(&s.mu, &d.mu);
            prop_assert_eq!(&s.w, &d.w);
        }
    }
}

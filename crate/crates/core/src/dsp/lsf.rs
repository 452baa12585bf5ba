//! LP coefficients ↔ line spectral frequencies.
//!
//! With `A(z) = 1 − Σ αᵢ z⁻ⁱ`, the sum and difference polynomials
//! `P(z) = A(z) + z⁻⁽ᴹ⁺¹⁾A(1/z)` and `Q(z) = A(z) − z⁻⁽ᴹ⁺¹⁾A(1/z)` have all
//! their roots on the unit circle, interleaved, starting with a root of `P`.

use std::f64::consts::PI;

use super::lpc::reflection_coefficients;
use super::DspError;

const GRID_POINTS: usize = 2048;
/// Finest search grid tried when near-coincident roots hide between grid points.
const MAX_GRID_POINTS: usize = 1 << 20;
const ROOT_TOL: f64 = 1e-12;

fn sum_diff_polys(coeffs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = coeffs.len();
    let mut a = Vec::with_capacity(m + 2);
    a.push(1.0);
    a.extend(coeffs.iter().map(|c| -c));
    a.push(0.0);
    let p = (0..=m + 1).map(|k| a[k] + a[m + 1 - k]).collect();
    let q = (0..=m + 1).map(|k| a[k] - a[m + 1 - k]).collect();
    (p, q)
}

/// `e^{jω(M+1)/2}·P(e^{jω})`, which is real for the symmetric `P`.
fn eval_sym(p: &[f64], w: f64) -> f64 {
    let half = (p.len() - 1) as f64 / 2.0;
    p.iter().enumerate().map(|(k, c)| c * (w * (half - k as f64)).cos()).sum()
}

/// Imaginary counterpart for the antisymmetric `Q`.
fn eval_anti(q: &[f64], w: f64) -> f64 {
    let half = (q.len() - 1) as f64 / 2.0;
    q.iter().enumerate().map(|(k, c)| c * (w * (half - k as f64)).sin()).sum()
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sign changes of `f` on the open interval `(0, π)` over a `points` grid,
/// refined by bisection.
fn roots(f: impl Fn(f64) -> f64, points: usize) -> Vec<f64> {
    let step = PI / points as f64;
    let mut out = Vec::new();
    let mut prev_w = step;
    let mut prev = f(prev_w);
    for j in 2..points {
        let w = j as f64 * step;
        let v = f(w);
        if v == 0.0 {
            out.push(w);
        } else if prev != 0.0 && (v < 0.0) != (prev < 0.0) {
            out.push(bisect(&f, prev_w, w));
        }
        prev_w = w;
        prev = v;
    }
    out
}

/// Line spectral frequencies of a stable predictor, ascending in `(0, π)`.
pub fn lpc_to_lsf(coeffs: &[f64]) -> Result<Vec<f64>, DspError> {
    reflection_coefficients(coeffs)?;
    let m = coeffs.len();
    let (p, q) = sum_diff_polys(coeffs);
    let (np, nq) = ((m + 1) / 2, m / 2);
    let mut points = GRID_POINTS;
    let (rp, rq) = loop {
        let rp = roots(|w| eval_sym(&p, w), points);
        let rq = roots(|w| eval_anti(&q, w), points);
        if (rp.len() == np && rq.len() == nq) || points >= MAX_GRID_POINTS {
            break (rp, rq);
        }
        points *= 8;
    };
    if rp.len() != np || rq.len() != nq {
        return Err(DspError::RootCount {
            found: rp.len() + rq.len(),
            expected: m,
        });
    }
    let mut lsf = Vec::with_capacity(m);
    for i in 0..m {
        lsf.push(if i % 2 == 0 { rp[i / 2] } else { rq[i / 2] });
    }
    if let Some(index) = first_non_increasing(&lsf) {
        return Err(DspError::NonMonotoneLsf { index });
    }
    Ok(lsf)
}

fn first_non_increasing(lsf: &[f64]) -> Option<usize> {
    let mut prev = 0.0;
    for (i, &w) in lsf.iter().enumerate() {
        if !(w > prev && w < PI) {
            return Some(i);
        }
        prev = w;
    }
    None
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn product_of_pairs<'a>(start: Vec<f64>, angles: impl Iterator<Item = &'a f64>) -> Vec<f64> {
    angles.fold(start, |acc, w| poly_mul(&acc, &[1.0, -2.0 * w.cos(), 1.0]))
}

/// Predictor coefficients from strictly increasing line spectral frequencies.
pub fn lsf_to_lpc(lsf: &[f64]) -> Result<Vec<f64>, DspError> {
    if let Some(index) = first_non_increasing(lsf) {
        return Err(DspError::NonMonotoneLsf { index });
    }
    let m = lsf.len();
    let even = lsf.iter().step_by(2);
    let odd = lsf.iter().skip(1).step_by(2);
    let (p, q) = if m % 2 == 0 {
        (product_of_pairs(vec![1.0, 1.0], even), product_of_pairs(vec![1.0, -1.0], odd))
    } else {
        (product_of_pairs(vec![1.0], even), product_of_pairs(vec![1.0, 0.0, -1.0], odd))
    };
    debug_assert_eq!(p.len(), m + 2);
    debug_assert_eq!(q.len(), m + 2);
    Ok((1..=m).map(|k| -0.5 * (p[k] + q[k])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::is_stable;
    use crate::grad::seeded_rng;
    use rand::Rng;

    /// Stable predictor built from sampled pole pairs (and one real pole for odd orders).
    fn random_stable(order: usize, rng: &mut crate::grad::Rng) -> Vec<f64> {
        let mut poly = vec![1.0];
        for _ in 0..order / 2 {
            let r: f64 = rng.random_range(0.1..0.98);
            let th: f64 = rng.random_range(0.05..PI - 0.05);
            poly = poly_mul(&poly, &[1.0, -2.0 * r * th.cos(), r * r]);
        }
        if order % 2 == 1 {
            let r: f64 = rng.random_range(-0.9..0.9);
            poly = poly_mul(&poly, &[1.0, -r]);
        }
        poly[1..].iter().map(|c| -c).collect()
    }

    #[test]
    fn flat_predictor_lsf() {
        let lsf = lpc_to_lsf(&[0.0, 0.0]).unwrap();
        assert!((lsf[0] - PI / 3.0).abs() < 1e-11);
        assert!((lsf[1] - 2.0 * PI / 3.0).abs() < 1e-11);
        let back = lsf_to_lpc(&lsf).unwrap();
        assert!(back.iter().all(|c| c.abs() < 1e-11));
    }

    #[test]
    fn roundtrip_random_stable_filters() {
        let mut rng = seeded_rng(99);
        for order in [1usize, 2, 3, 7, 10, 16] {
            for _ in 0..20 {
                let a = random_stable(order, &mut rng);
                assert!(is_stable(&a));
                let lsf = lpc_to_lsf(&a).unwrap();
                assert_eq!(lsf.len(), order);
                let back = lsf_to_lpc(&lsf).unwrap();
                let err = a.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(err < 1e-8, "order {order}: {err}");
            }
        }
    }

    #[test]
    fn near_coincident_roots_are_resolved() {
        // Reflection coefficients close to ±1 put LSF pairs closer together
        // than the coarse search grid.
        let mut rng = seeded_rng(7);
        for _ in 0..200 {
            let mut a: Vec<f64> = Vec::new();
            for _ in 0..16 {
                let k: f64 = rng.random_range(-0.95..0.95);
                let prev = a.clone();
                a = (0..prev.len()).map(|j| prev[j] - k * prev[prev.len() - 1 - j]).collect();
                a.push(k);
            }
            let back = lsf_to_lpc(&lpc_to_lsf(&a).unwrap()).unwrap();
            let err = a.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(lsf_to_lpc(&[1.0, 0.5]), Err(DspError::NonMonotoneLsf { index: 1 })));
        assert!(matches!(lsf_to_lpc(&[0.5, 0.5]), Err(DspError::NonMonotoneLsf { index: 1 })));
        assert!(matches!(lsf_to_lpc(&[0.0, 0.5]), Err(DspError::NonMonotoneLsf { index: 0 })));
        assert!(matches!(lpc_to_lsf(&[0.0, 1.2]), Err(DspError::UnstableFilter { .. })));
    }

    #[test]
    fn lsfs_from_any_lsf_set_give_stable_filters() {
        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let mut w: Vec<f64> = (0..10).map(|_| rng.random_range(0.01..PI - 0.01)).collect();
            w.sort_by(f64::total_cmp);
            w.dedup();
            let a = lsf_to_lpc(&w).unwrap();
            assert!(is_stable(&a));
        }
    }
}

//! Whole-sequence GRU recurrence with a hand-written backward pass.
//!
//! Inputs are the precomputed input projections `x` (`steps·batch × 3H`,
//! time-major, columns `[z | r | h̃]` with biases folded in) and the
//! recurrent matrices `U_zr` (`2H × H`) and `U_h` (`H × H`):
//!
//! ```text
//! z, r = σ(x_zr + h·U_zrᵀ)
//! h̃    = tanh(x_h + (r ⊙ h)·U_hᵀ)
//! h'   = h + z ⊙ (h̃ − h)
//! ```

use super::graph::sigmoid;
use super::linalg::{gemm, MatRef};

/// Gate activations kept for the backward pass, `steps·batch × 3H` as `[z | r | h̃]`.
#[derive(Debug)]
pub(crate) struct GruCache {
    pub gates: Vec<f64>,
}

/// Returns all states (`steps·batch × H`) from a zero initial state.
pub(crate) fn gru_forward(x: &[f64], u_zr: &[f64], u_h: &[f64], batch: usize, hd: usize) -> (Vec<f64>, GruCache) {
    let rows = x.len() / (3 * hd);
    let steps = rows / batch;
    let mut out = vec![0.0; rows * hd];
    let mut gates = vec![0.0; rows * 3 * hd];
    let zero = vec![0.0; batch * hd];
    let mut rec = vec![0.0; batch * 2 * hd];
    let mut rh = vec![0.0; batch * hd];
    let mut rec_h = vec![0.0; batch * hd];
    let uzr = MatRef::new(u_zr, 2 * hd, hd).t();
    let uh = MatRef::new(u_h, hd, hd).t();
    for n in 0..steps {
        let (done, rest) = out.split_at_mut(n * batch * hd);
        let prev: &[f64] = if n == 0 { &zero } else { &done[(n - 1) * batch * hd..] };
        let cur = &mut rest[..batch * hd];
        gemm(MatRef::new(prev, batch, hd), uzr, &mut rec, 0.0);
        for b in 0..batch {
            let row = n * batch + b;
            let xr = &x[row * 3 * hd..(row + 1) * 3 * hd];
            let gr = &mut gates[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..2 * hd {
                gr[j] = sigmoid(xr[j] + rec[b * 2 * hd + j]);
            }
            for j in 0..hd {
                rh[b * hd + j] = gr[hd + j] * prev[b * hd + j];
            }
        }
        gemm(MatRef::new(&rh, batch, hd), uh, &mut rec_h, 0.0);
        for b in 0..batch {
            let row = n * batch + b;
            let xr = &x[row * 3 * hd..(row + 1) * 3 * hd];
            let gr = &mut gates[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..hd {
                let c = (xr[2 * hd + j] + rec_h[b * hd + j]).tanh();
                gr[2 * hd + j] = c;
                let h = prev[b * hd + j];
                cur[b * hd + j] = h + gr[j] * (c - h);
            }
        }
    }
    (out, GruCache { gates })
}

/// Accumulates gradients into `dx`, `du_zr`, `du_h` (any may be skipped)
/// given `g = ∂L/∂states`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward(
    g: &[f64],
    states: &[f64],
    cache: &GruCache,
    u_zr: &[f64],
    u_h: &[f64],
    batch: usize,
    hd: usize,
    dx: Option<&mut [f64]>,
    du_zr: Option<&mut [f64]>,
    du_h: Option<&mut [f64]>,
) {
    let rows = states.len() / hd;
    let steps = rows / batch;
    let gates = &cache.gates;
    let mut d_zr = vec![0.0; rows * 2 * hd];
    let mut d_h = vec![0.0; rows * hd];
    let mut carry = vec![0.0; batch * hd];
    let mut d_rh = vec![0.0; batch * hd];
    let mut via_zr = vec![0.0; batch * hd];
    let uzr = MatRef::new(u_zr, 2 * hd, hd);
    let uh = MatRef::new(u_h, hd, hd);
    let prev_at = |n: usize, b: usize, j: usize| if n == 0 { 0.0 } else { states[((n - 1) * batch + b) * hd + j] };
    for n in (0..steps).rev() {
        let block = n * batch..(n + 1) * batch;
        // carry becomes the total gradient on h_n; keep the direct (1 − z) path.
        let mut direct = vec![0.0; batch * hd];
        for b in 0..batch {
            let row = n * batch + b;
            let gr = &gates[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..hd {
                let dh = g[row * hd + j] + carry[b * hd + j];
                let (z, c) = (gr[j], gr[2 * hd + j]);
                let h = prev_at(n, b, j);
                d_h[row * hd + j] = dh * z * (1.0 - c * c);
                d_zr[row * 2 * hd + j] = dh * (c - h) * z * (1.0 - z);
                direct[b * hd + j] = dh * (1.0 - z);
            }
        }
        let dh_block = &d_h[block.start * hd..block.end * hd];
        gemm(MatRef::new(dh_block, batch, hd), uh, &mut d_rh, 0.0);
        for b in 0..batch {
            let row = n * batch + b;
            let gr = &gates[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..hd {
                let r = gr[hd + j];
                let h = prev_at(n, b, j);
                d_zr[row * 2 * hd + hd + j] = d_rh[b * hd + j] * h * r * (1.0 - r);
                direct[b * hd + j] += d_rh[b * hd + j] * r;
            }
        }
        let dzr_block = &d_zr[block.start * 2 * hd..block.end * 2 * hd];
        gemm(MatRef::new(dzr_block, batch, 2 * hd), uzr, &mut via_zr, 0.0);
        for (c, (d, v)) in carry.iter_mut().zip(direct.iter().zip(&via_zr)) {
            *c = d + v;
        }
    }

    // Previous states and r ⊙ h_prev for every row, for the weight gradients.
    let mut prev = vec![0.0; rows * hd];
    prev[batch * hd..].copy_from_slice(&states[..(rows - batch.min(rows)) * hd]);
    if let Some(du) = du_zr {
        gemm(MatRef::new(&d_zr, rows, 2 * hd).t(), MatRef::new(&prev, rows, hd), du, 1.0);
    }
    if let Some(du) = du_h {
        let rh: Vec<f64> = prev
            .chunks(hd)
            .zip(gates.chunks(3 * hd))
            .flat_map(|(p, gr)| p.iter().zip(&gr[hd..2 * hd]).map(|(h, r)| h * r).collect::<Vec<_>>())
            .collect();
        gemm(MatRef::new(&d_h, rows, hd).t(), MatRef::new(&rh, rows, hd), du, 1.0);
    }
    if let Some(dx) = dx {
        for (row, d) in dx.chunks_mut(3 * hd).enumerate() {
            for (a, v) in d[..2 * hd].iter_mut().zip(&d_zr[row * 2 * hd..(row + 1) * 2 * hd]) {
                *a += v;
            }
            for (a, v) in d[2 * hd..].iter_mut().zip(&d_h[row * hd..(row + 1) * hd]) {
                *a += v;
            }
        }
    }
}

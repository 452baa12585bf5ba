//! Layers built on the autodiff tape: weight-normalized dense, 1×3
//! convolution and transposed convolution, and a GRU.
//!
//! Weight matrices are stored output-major (`out × in`) so weight
//! normalization is row-wise per output unit; `forward` computes `x·Wᵀ + b`.

use crate::grad::{sigmoid, weight_norm_effective, xavier_init, GradError, Graph, ParamId, ParamStore, Rng, Tensor, Var};

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("same element count")
}

/// Xavier direction for an `out × in` matrix and a gain equal to its row norms,
/// so the effective weights start out equal to the direction.
fn weight_norm_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rows: usize, cols: usize, rng: &mut Rng) -> (ParamId, ParamId) {
    let v = xavier_init([fan_in, fan_out], rng);
    let v = Tensor::new(&[rows, cols], v.into_data()).expect("fan product matches");
    let gains: Vec<f64> = (0..rows).map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let g = Tensor::new(&[rows], gains).expect("one gain per row");
    (
        store.insert(&format!("{name}.v"), v, true),
        store.insert(&format!("{name}.g"), g, true),
    )
}

/// Dense layer with row-wise weight normalization.
#[derive(Clone, Debug)]
pub struct FcLayer {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl FcLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let (v, g) = weight_norm_init(store, name, inputs, outputs, outputs, inputs, rng);
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[outputs]), true);
        Self { v, g, b, inputs, outputs }
    }

    /// `x·W_effᵀ + b` for `x` of shape `rows × inputs`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let v = g.param(store, self.v)?;
        let s = g.param(store, self.g)?;
        let w = g.weight_norm(v, s)?;
        let y = g.matmul_bt(x, w)?;
        let b = g.param(store, self.b)?;
        g.add(y, b)
    }

    /// Effective `out × in` weights.
    pub fn effective(&self, store: &ParamStore) -> Result<Tensor, GradError> {
        weight_norm_effective(store.get(self.v), store.get(self.g))
    }
}

/// Width-3 convolution over time, channels last. Implemented as a dense layer
/// over `[x_{t−1}, x_t, x_{t+1}]`.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub fc: FcLayer,
    pub channels_in: usize,
}

impl Conv1dLayer {
    pub const WIDTH: usize = 3;

    pub fn new(store: &mut ParamStore, name: &str, channels_in: usize, channels_out: usize, rng: &mut Rng) -> Self {
        Self {
            fc: FcLayer::new(store, name, Self::WIDTH * channels_in, channels_out, rng),
            channels_in,
        }
    }

    /// Output row `j` sees input rows `centres[j] − 1 ..= centres[j] + 1`.
    pub fn forward_at(&self, g: &mut Graph, store: &ParamStore, x: Var, centres: &[usize]) -> Result<Var, GradError> {
        let rows = g.value(x).rows();
        if centres.iter().any(|&c| c == 0 || c + 1 >= rows) {
            return Err(GradError::ShapeMismatch {
                op: "conv1d",
                left: vec![rows],
                right: vec![centres.len()],
            });
        }
        let prev = g.gather_rows(x, centres.iter().map(|c| c - 1).collect())?;
        let cur = g.gather_rows(x, centres.to_vec())?;
        let next = g.gather_rows(x, centres.iter().map(|c| c + 1).collect())?;
        let taps = g.concat_cols(&[prev, cur, next])?;
        self.fc.forward(g, store, taps)
    }

    /// Valid convolution: `T` rows in, `T − 2` rows out.
    pub fn forward_valid(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let rows = g.value(x).rows();
        let centres: Vec<usize> = (1..rows.saturating_sub(1)).collect();
        self.forward_at(g, store, x, &centres)
    }

    /// Same-length convolution with the edge frames replicated.
    pub fn forward_same(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let rows = g.value(x).rows();
        let mut index = Vec::with_capacity(rows + 2);
        index.push(0);
        index.extend(0..rows);
        index.push(rows.saturating_sub(1));
        let padded = g.gather_rows(x, index)?;
        self.forward_valid(g, store, padded)
    }
}

/// Transposed convolution whose kernel width equals its stride: every input
/// frame becomes `stride` output rows, with one bias per output channel.
#[derive(Clone, Debug)]
pub struct TransposedConvLayer {
    /// `(stride · channels_out) × channels_in` direction, weight-normalized per row.
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl TransposedConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels_in: usize, channels_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let (v, g) = weight_norm_init(store, name, channels_in, stride * channels_out, stride * channels_out, channels_in, rng);
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[channels_out]), true);
        Self {
            v,
            g,
            b,
            stride,
            channels_in,
            channels_out,
        }
    }

    /// `T × channels_in` → `(T·stride) × channels_out`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let frames = g.value(x).rows();
        let v = g.param(store, self.v)?;
        let s = g.param(store, self.g)?;
        let w = g.weight_norm(v, s)?;
        let y = g.matmul_bt(x, w)?;
        let y = g.reshape(y, &[frames * self.stride, self.channels_out])?;
        let b = g.param(store, self.b)?;
        g.add(y, b)
    }
}

/// Gated recurrent unit, gates ordered `[update z, reset r, candidate]`.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = h + z ⊙ (h̃ − h)`.
#[derive(Clone, Debug)]
pub struct GruLayer {
    /// `3H × in`
    pub w: ParamId,
    /// `2H × H`, update and reset gates.
    pub u_zr: ParamId,
    /// `H × H`
    pub u_h: ParamId,
    /// `3H`
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

fn stack_xavier(blocks: usize, fan_in: usize, hidden: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(blocks * hidden * fan_in);
    for _ in 0..blocks {
        data.extend(transposed(&xavier_init([fan_in, hidden], rng)).into_data());
    }
    Tensor::new(&[blocks * hidden, fan_in], data).expect("stacked blocks")
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w = store.insert(&format!("{name}.w"), stack_xavier(3, inputs, hidden, rng), true);
        let u_zr = store.insert(&format!("{name}.u_zr"), stack_xavier(2, hidden, hidden, rng), true);
        let u_h = store.insert(&format!("{name}.u_h"), stack_xavier(1, hidden, hidden, rng), true);
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[3 * hidden]), true);
        Self {
            w,
            u_zr,
            u_h,
            b,
            inputs,
            hidden,
        }
    }

    /// Input projections `x·Wᵀ + b` for all rows at once (`rows × 3H`).
    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let w = g.param(store, self.w)?;
        let y = g.matmul_bt(x, w)?;
        let b = g.param(store, self.b)?;
        g.add(y, b)
    }

    /// Runs the recurrence over precomputed projections laid out time-major
    /// (row `n·batch + b`), starting from a zero state. Returns all states in
    /// the same layout.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, projected: Var, batch: usize) -> Result<Var, GradError> {
        let rows = g.value(projected).rows();
        let hd = self.hidden;
        if batch == 0 || rows % batch != 0 || g.value(projected).cols() != 3 * hd {
            return Err(GradError::ShapeMismatch {
                op: "gru",
                left: g.value(projected).shape().to_vec(),
                right: vec![batch, 3 * hd],
            });
        }
        let u_zr = g.param(store, self.u_zr)?;
        let u_h = g.param(store, self.u_h)?;
        g.gru_sequence(projected, u_zr, u_h, batch)
    }

    /// One step from a given state; `x` is `batch × inputs`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var, GradError> {
        let hd = self.hidden;
        let p = self.project(g, store, x)?;
        let xzr = g.slice_cols(p, 0, 2 * hd)?;
        let xh = g.slice_cols(p, 2 * hd, 3 * hd)?;
        let u_zr = g.param(store, self.u_zr)?;
        let u_h = g.param(store, self.u_h)?;
        self.cell(g, xzr, xh, h, u_zr, u_h)
    }

    fn cell(&self, g: &mut Graph, xzr: Var, xh: Var, h: Var, u_zr: Var, u_h: Var) -> Result<Var, GradError> {
        let hd = self.hidden;
        let rec = g.matmul_bt(h, u_zr)?;
        let pre = g.add(xzr, rec)?;
        let zr = g.sigmoid(pre)?;
        let z = g.slice_cols(zr, 0, hd)?;
        let r = g.slice_cols(zr, hd, 2 * hd)?;
        let rh = g.mul(r, h)?;
        let rec_h = g.matmul_bt(rh, u_h)?;
        let pre_h = g.add(xh, rec_h)?;
        let cand = g.tanh(pre_h)?;
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }
}

/// Dense `out × in` matrix copied out of the store for tape-free inference.
#[derive(Clone, Debug)]
pub struct DenseWeights {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseWeights {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    /// `out += W·x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks(self.cols)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Column `j` as a vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + j]).collect()
    }
}

/// Recurrent weights of a [`GruLayer`] for tape-free inference.
#[derive(Clone, Debug)]
pub struct GruWeights {
    pub hidden: usize,
    pub u_zr: DenseWeights,
    pub u_h: DenseWeights,
}

impl GruWeights {
    pub fn from_layer(layer: &GruLayer, store: &ParamStore) -> Self {
        Self {
            hidden: layer.hidden,
            u_zr: DenseWeights::from_tensor(store.get(layer.u_zr)),
            u_h: DenseWeights::from_tensor(store.get(layer.u_h)),
        }
    }
}

/// Hidden state carried between inference steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GruState {
    pub h: Vec<f64>,
}

impl GruState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![0.0; hidden] }
    }
}

/// Advances `state` given the input projection `W x + b` (length `3H`).
pub fn gru_step(weights: &GruWeights, state: &mut GruState, projected: &[f64]) {
    let hd = weights.hidden;
    let mut zr = projected[..2 * hd].to_vec();
    weights.u_zr.matvec_acc(&state.h, &mut zr);
    zr.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f64> = zr[hd..].iter().zip(&state.h).map(|(r, h)| r * h).collect();
    let mut cand = projected[2 * hd..].to_vec();
    weights.u_h.matvec_acc(&rh, &mut cand);
    for i in 0..hd {
        let c = cand[i].tanh();
        state.h[i] += zr[i] * (c - state.h[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::gradcheck::check_gradients;
    use crate::grad::seeded_rng;
    use rand::Rng as _;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fc_weight_norm_starts_at_direction() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let fc = FcLayer::new(&mut store, "fc", 5, 3, &mut rng);
        let eff = fc.effective(&store).unwrap();
        for (a, b) in eff.data().iter().zip(store.get(fc.v).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fc_forward_matches_manual() {
        let mut rng = seeded_rng(2);
        let mut store = ParamStore::new();
        let fc = FcLayer::new(&mut store, "fc", 4, 2, &mut rng);
        store.set_data(fc.b, vec![0.5, -0.25]).unwrap();
        let x = random(&[3, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = fc.forward(&mut g, &store, xv).unwrap();
        let w = fc.effective(&store).unwrap();
        for r in 0..3 {
            for o in 0..2 {
                let want: f64 = (0..4).map(|i| x.row(r)[i] * w.row(o)[i]).sum::<f64>() + [0.5, -0.25][o];
                assert!((g.value(y).row(r)[o] - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fc_gradients() {
        for seed in 0..5u64 {
            let mut rng = seeded_rng(10 + seed);
            let mut store = ParamStore::new();
            let fc = FcLayer::new(&mut store, "fc", 3, 2, &mut rng);
            store.set_data(fc.b, vec![0.1, -0.2]).unwrap();
            let x = random(&[4, 3], &mut rng);
            let ids = [fc.v, fc.g, fc.b];
            let inputs: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).chain([x]).collect();
            let report = check_gradients(
                &inputs,
                |xs| {
                    let mut g = Graph::new();
                    let v = g.variable(xs[0].clone()).unwrap();
                    let gn = g.variable(xs[1].clone()).unwrap();
                    let b = g.variable(xs[2].clone()).unwrap();
                    let x = g.variable(xs[3].clone()).unwrap();
                    let w = g.weight_norm(v, gn).unwrap();
                    let y = g.matmul_bt(x, w).unwrap();
                    let y = g.add(y, b).unwrap();
                    let y = g.tanh(y).unwrap();
                    let out = g.sum(y).unwrap();
                    (g, vec![v, gn, b, x], out)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        }
    }

    /// Analytic parameter gradients through `forward` equal those of the
    /// hand-built expression checked above.
    #[test]
    fn fc_param_grads_reach_store() {
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        let fc = FcLayer::new(&mut store, "fc", 3, 2, &mut rng);
        let x = random(&[4, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = fc.forward(&mut g, &store, xv).unwrap();
        let out = g.sum(y).unwrap();
        g.backward(out).unwrap();
        g.accumulate_param_grads(&mut store);
        // d sum / d b = number of rows
        assert_eq!(store.get(fc.b).grad().unwrap(), &[4.0, 4.0]);
        assert!(store.get(fc.v).grad().is_some());
    }

    fn conv_identity(store: &mut ParamStore, c: usize, rng: &mut Rng) -> Conv1dLayer {
        let conv = Conv1dLayer::new(store, "conv", c, c, rng);
        let mut v = vec![0.0; c * 3 * c];
        for o in 0..c {
            v[o * 3 * c + c + o] = 1.0;
        }
        store.set_data(conv.fc.v, v).unwrap();
        store.set_data(conv.fc.g, vec![1.0; c]).unwrap();
        conv
    }

    #[test]
    fn centre_tap_identity_conv() {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        let conv = conv_identity(&mut store, 3, &mut rng);
        let x = random(&[7, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = conv.forward_same(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn impulse_shows_reversed_kernel() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let conv = Conv1dLayer::new(&mut store, "conv", 1, 1, &mut rng);
        let k = [0.2, -0.5, 0.9];
        store.set_data(conv.fc.v, k.to_vec()).unwrap();
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        store.set_data(conv.fc.g, vec![norm]).unwrap();
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[9, 1], x).unwrap()).unwrap();
        let y = conv.forward_same(&mut g, &store, xv).unwrap();
        let y = g.value(y).data();
        let want = [0.0, 0.0, 0.0, 0.9, -0.5, 0.2, 0.0, 0.0, 0.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{y:?}");
        }
    }

    #[test]
    fn two_convs_reach_two_frames_each_way() {
        let mut rng = seeded_rng(7);
        let mut store = ParamStore::new();
        let c1 = Conv1dLayer::new(&mut store, "c1", 2, 2, &mut rng);
        let c2 = Conv1dLayer::new(&mut store, "c2", 2, 2, &mut rng);
        let base = random(&[11, 2], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let a = c1.forward_same(&mut g, &store, xv).unwrap();
            let a = g.tanh(a).unwrap();
            let b = c2.forward_same(&mut g, &store, a).unwrap();
            g.value(b).clone()
        };
        let y0 = run(&base);
        let mut moved = base.clone();
        moved.data_mut()[5 * 2] += 1.0;
        let y1 = run(&moved);
        for t in 0..11 {
            let changed = y0.row(t).iter().zip(y1.row(t)).any(|(a, b)| (a - b).abs() > 1e-12);
            assert_eq!(changed, (3..=7).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn valid_conv_length() {
        let mut rng = seeded_rng(8);
        let mut store = ParamStore::new();
        let conv = Conv1dLayer::new(&mut store, "c", 2, 4, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(random(&[10, 2], &mut rng)).unwrap();
        let y = conv.forward_valid(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 4]);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = seeded_rng(9);
        let mut store = ParamStore::new();
        let conv = Conv1dLayer::new(&mut store, "c", 2, 3, &mut rng);
        let x = random(&[6, 2], &mut rng);
        let ids = [conv.fc.v, conv.fc.g];
        let inputs: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).chain([x]).collect();
        let report = check_gradients(
            &inputs,
            |xs| {
                let mut g = Graph::new();
                let v = g.variable(xs[0].clone()).unwrap();
                let gn = g.variable(xs[1].clone()).unwrap();
                let x = g.variable(xs[2].clone()).unwrap();
                // same computation as forward_same, with the weights as variables
                let w = g.weight_norm(v, gn).unwrap();
                let padded = g.gather_rows(x, vec![0, 0, 1, 2, 3, 4, 5, 5]).unwrap();
                let prev = g.slice_rows(padded, 0, 6).unwrap();
                let cur = g.slice_rows(padded, 1, 7).unwrap();
                let next = g.slice_rows(padded, 2, 8).unwrap();
                let taps = g.concat_cols(&[prev, cur, next]).unwrap();
                let y = g.matmul_bt(taps, w).unwrap();
                let y = g.tanh(y).unwrap();
                let out = g.sum(y).unwrap();
                (g, vec![v, gn, x], out)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);

        // forward_same computes the same values as the hand-built expression
        let mut g = Graph::new();
        let xv = g.constant(inputs[2].clone()).unwrap();
        let y = conv.forward_same(&mut g, &store, xv).unwrap();
        let w = conv.fc.effective(&store).unwrap();
        let xr = |t: isize| inputs[2].row(t.clamp(0, 5) as usize).to_vec();
        for t in 0..6isize {
            let taps: Vec<f64> = [xr(t - 1), xr(t), xr(t + 1)].concat();
            for o in 0..3 {
                let want: f64 = taps.iter().zip(w.row(o)).map(|(a, b)| a * b).sum();
                assert!((g.value(y).row(t as usize)[o] - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn transposed_conv_blocks() {
        let mut rng = seeded_rng(11);
        let mut store = ParamStore::new();
        let up = TransposedConvLayer::new(&mut store, "up", 1, 1, 120, &mut rng);
        store.set_data(up.v, vec![1.0; 120]).unwrap();
        store.set_data(up.g, vec![1.0; 120]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let y = up.forward(&mut g, &store, xv).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[360, 1]);
        for (n, v) in y.data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][n / 120]);
        }
    }

    #[test]
    fn transposed_conv_frames_are_independent() {
        let mut rng = seeded_rng(12);
        let mut store = ParamStore::new();
        let up = TransposedConvLayer::new(&mut store, "up", 3, 2, 4, &mut rng);
        let x = random(&[5, 3], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = up.forward(&mut g, &store, xv).unwrap();
            g.value(y).clone()
        };
        let y0 = run(&x);
        let mut x1 = x.clone();
        x1.data_mut()[2 * 3 + 1] += 0.7;
        let y1 = run(&x1);
        for r in 0..20 {
            let changed = y0.row(r).iter().zip(y1.row(r)).any(|(a, b)| a != b);
            assert_eq!(changed, (8..12).contains(&r), "row {r}");
        }
    }

    #[test]
    fn gru_with_half_update_and_zero_weights() {
        // z = σ(0) = 0.5 and h̃ = tanh(0) = 0, so h' = 0.5·h
        let mut rng = seeded_rng(13);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 2, 3, &mut rng);
        for id in [gru.w, gru.u_zr, gru.u_h] {
            let n = store.get(id).len();
            store.set_data(id, vec![0.0; n]).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 2], &mut rng)).unwrap();
        let h = g.constant(Tensor::new(&[1, 3], vec![0.4, -0.8, 1.0]).unwrap()).unwrap();
        let h1 = gru.step(&mut g, &store, x, h).unwrap();
        assert_eq!(g.value(h1).data(), &[0.2, -0.4, 0.5]);

        let w = GruWeights::from_layer(&gru, &store);
        let mut st = GruState { h: vec![0.4, -0.8, 1.0] };
        gru_step(&w, &mut st, &[0.0; 9]);
        assert_eq!(st.h, vec![0.2, -0.4, 0.5]);
    }

    #[test]
    fn gru_state_bounded() {
        let mut rng = seeded_rng(14);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 2, 4, &mut rng);
        let w = GruWeights::from_layer(&gru, &store);
        let mut st = GruState::zeros(4);
        for _ in 0..500 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(-20.0..20.0)).collect();
            gru_step(&w, &mut st, &p);
            assert!(st.h.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn gru_sequence_matches_inference_steps() {
        let mut rng = seeded_rng(15);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 3, 5, &mut rng);
        store.set_data(gru.b, (0..15).map(|i| 0.05 * i as f64 - 0.3).collect()).unwrap();
        let (batch, steps) = (2, 6);
        let x = random(&[steps * batch, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let p = gru.project(&mut g, &store, xv).unwrap();
        let hs = gru.run(&mut g, &store, p, batch).unwrap();
        let proj = g.value(p).clone();
        let hs = g.value(hs).clone();

        let w = GruWeights::from_layer(&gru, &store);
        for b in 0..batch {
            let mut st = GruState::zeros(5);
            for n in 0..steps {
                gru_step(&w, &mut st, proj.row(n * batch + b));
                for (a, e) in st.h.iter().zip(hs.row(n * batch + b)) {
                    assert!((a - e).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn gru_gradients_through_time() {
        for seed in 0..5u64 {
            let mut rng = seeded_rng(30 + seed);
            let mut store = ParamStore::new();
            let gru = GruLayer::new(&mut store, "gru", 2, 3, &mut rng);
            store.set_data(gru.b, (0..9).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            let x = random(&[4 * 2, 2], &mut rng);
            let ids = [gru.w, gru.u_zr, gru.u_h, gru.b];
            let inputs: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).chain([x]).collect();
            let report = check_gradients(
                &inputs[4..],
                |xs| {
                    let mut g = Graph::new();
                    let x = g.variable(xs[0].clone()).unwrap();
                    let p = gru.project(&mut g, &store, x).unwrap();
                    let hs = gru.run(&mut g, &store, p, 2).unwrap();
                    let sq = g.square(hs).unwrap();
                    let out = g.sum(sq).unwrap();
                    (g, vec![x], out)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "input grads: {}", report.max_rel_error);

            let mut g = Graph::new();
            let xv = g.constant(inputs[4].clone()).unwrap();
            let p = gru.project(&mut g, &store, xv).unwrap();
            let hs = gru.run(&mut g, &store, p, 2).unwrap();
            let sq = g.square(hs).unwrap();
            let out = g.sum(sq).unwrap();
            g.backward(out).unwrap();
            let mut s = store.clone();
            s.zero_grads();
            g.accumulate_param_grads(&mut s);
            let h = 1e-5;
            let eval = |st: &ParamStore| {
                let mut g = Graph::new();
                let xv = g.constant(inputs[4].clone()).unwrap();
                let p = gru.project(&mut g, st, xv).unwrap();
                let hs = gru.run(&mut g, st, p, 2).unwrap();
                let sq = g.square(hs).unwrap();
                g.value(sq).data().iter().sum::<f64>()
            };
            for id in ids {
                let analytic = s.get(id).grad().unwrap().to_vec();
                for i in 0..store.get(id).len() {
                    let mut plus = store.clone();
                    plus.get_mut(id).data_mut()[i] += h;
                    let mut minus = store.clone();
                    minus.get_mut(id).data_mut()[i] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let rel = crate::grad::gradcheck::relative_error(analytic[i], fd);
                    assert!(rel < 1e-6, "{} [{i}]: {} vs {fd}", store.name(id), analytic[i]);
                }
            }
        }
    }

    #[test]
    fn fused_sequence_matches_chained_steps() {
        let mut rng = seeded_rng(16);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 3, 4, &mut rng);
        store.set_data(gru.b, (0..12).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let (batch, steps) = (3, 7);
        let x = random(&[steps * batch, 3], &mut rng);
        let weights = random(&[steps * batch, 4], &mut rng);

        let run = |fused: bool| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone()).unwrap();
            let hs = if fused {
                let p = gru.project(&mut g, &store, xv).unwrap();
                gru.run(&mut g, &store, p, batch).unwrap()
            } else {
                let mut h = g.constant(Tensor::zeros(&[batch, 4])).unwrap();
                let mut states = Vec::new();
                for n in 0..steps {
                    let xn = g.slice_rows(xv, n * batch, (n + 1) * batch).unwrap();
                    h = gru.step(&mut g, &store, xn, h).unwrap();
                    states.push(h);
                }
                g.concat_rows(&states).unwrap()
            };
            let wv = g.constant(weights.clone()).unwrap();
            let prod = g.mul(hs, wv).unwrap();
            let out = g.sum(prod).unwrap();
            g.backward(out).unwrap();
            let mut s = store.clone();
            s.zero_grads();
            g.accumulate_param_grads(&mut s);
            let grads: Vec<Vec<f64>> = [gru.w, gru.u_zr, gru.u_h, gru.b].iter().map(|id| s.get(*id).grad().unwrap().to_vec()).collect();
            (g.value(hs).data().to_vec(), g.grad(xv).unwrap().to_vec(), grads)
        };
        let (a, b) = (run(true), run(false));
        let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12);
        assert!(close(&a.0, &b.0));
        assert!(close(&a.1, &b.1));
        for (p, q) in a.2.iter().zip(&b.2) {
            assert!(close(p, q));
        }
    }
}

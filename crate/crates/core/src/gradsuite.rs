//! Finite-difference gradient checks for every differentiable building block
//! of the model: layers, weight normalization, the mixture NLL and the
//! spectral power loss.

use rand::Rng as _;
use thiserror::Error;

use crate::grad::gradcheck::{compare, GradReport};
use crate::grad::{seeded_rng, GradError, Graph, ParamStore, Rng, Tensor, Var};
use crate::lpmdn::{head_loss, head_width, LpMdnError};
use crate::net::{Conv1dLayer, FcLayer, GruLayer, TransposedConvLayer};
use crate::trainer::{PowerLossBasis, TrainError};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Fc,
    Conv,
    TransposedConv,
    Gru,
    WeightNorm,
    MogNll,
    PowerLoss,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Fc,
        Component::Conv,
        Component::TransposedConv,
        Component::Gru,
        Component::WeightNorm,
        Component::MogNll,
        Component::PowerLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Fc => "fc",
            Component::Conv => "conv1x3",
            Component::TransposedConv => "transposed_conv",
            Component::Gru => "gru_unroll3",
            Component::WeightNorm => "weight_norm",
            Component::MogNll => "mog_nll",
            Component::PowerLoss => "power_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub component: Component,
    pub trials: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Head(#[from] LpMdnError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Runs `trials` seeded checks of every component. With `corrupt`, that
/// component's analytic gradient is deliberately perturbed so the check must
/// fail.
pub fn run_suite(trials: usize, seed: u64, corrupt: Option<Component>) -> Result<Vec<ComponentResult>, SuiteError> {
    Component::ALL
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut report = GradReport::default();
            for t in 0..trials {
                let mut rng = seeded_rng(seed);
                rng.set_stream((i * 1000 + t) as u64);
                report.merge(&check_component(c, t, &mut rng, corrupt == Some(c))?);
            }
            Ok(ComponentResult {
                component: c,
                trials,
                max_rel_error: report.max_rel_error,
                max_abs_error: report.max_abs_error,
                checked: report.checked,
            })
        })
        .collect()
}

/// Plain-text table, one row per component.
pub fn format_table(results: &[ComponentResult]) -> String {
    let mut out = format!("{:<16} {:>6} {:>8} {:>12} {:>12}  result\n", "component", "trials", "checked", "max_rel", "max_abs");
    for r in results {
        out.push_str(&format!(
            "{:<16} {:>6} {:>8} {:>12.3e} {:>12.3e}  {}\n",
            r.component.name(),
            r.trials,
            r.checked,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, SuiteError> {
    let c = g.constant(w.clone())?;
    let p = g.mul(y, c)?;
    Ok(g.sum(p)?)
}

fn check_component(c: Component, trial: usize, rng: &mut Rng, corrupt: bool) -> Result<GradReport, SuiteError> {
    let mut store = ParamStore::new();
    match c {
        Component::Fc => {
            let fc = FcLayer::new(&mut store, "fc", 4, 3, rng);
            store.set_data(fc.b, random(&[3], rng, 0.5).into_data())?;
            let x = random(&[5, 4], rng, 1.0);
            let w = random(&[5, 3], rng, 1.0);
            check_problem(&store, &[x], corrupt, |g, st, v| {
                let y = fc.forward(g, st, v[0])?;
                let y = g.tanh(y)?;
                weighted_sum(g, y, &w)
            })
        }
        Component::Conv => {
            let conv = Conv1dLayer::new(&mut store, "conv", 3, 2, rng);
            store.set_data(conv.fc.b, random(&[2], rng, 0.5).into_data())?;
            let x = random(&[7, 3], rng, 1.0);
            let w = random(&[5, 2], rng, 1.0);
            check_problem(&store, &[x], corrupt, |g, st, v| {
                let y = conv.forward_valid(g, st, v[0])?;
                let y = g.tanh(y)?;
                weighted_sum(g, y, &w)
            })
        }
        Component::TransposedConv => {
            let up = TransposedConvLayer::new(&mut store, "up", 3, 2, 4, rng);
            store.set_data(up.b, random(&[2], rng, 0.5).into_data())?;
            let x = random(&[3, 3], rng, 1.0);
            let w = random(&[12, 2], rng, 1.0);
            check_problem(&store, &[x], corrupt, |g, st, v| {
                let y = up.forward(g, st, v[0])?;
                weighted_sum(g, y, &w)
            })
        }
        Component::Gru => {
            let (steps, batch) = (3, 2);
            let gru = GruLayer::new(&mut store, "gru", 2, 3, rng);
            store.set_data(gru.b, random(&[9], rng, 0.5).into_data())?;
            let x = random(&[steps * batch, 2], rng, 1.0);
            let w = random(&[steps * batch, 3], rng, 1.0);
            check_problem(&store, &[x], corrupt, |g, st, v| {
                let p = gru.project(g, st, v[0])?;
                let h = gru.run(g, st, p, batch)?;
                weighted_sum(g, h, &w)
            })
        }
        Component::WeightNorm => {
            let v0 = random(&[4, 3], rng, 1.0);
            let gain = Tensor::new(&[4], (0..4).map(|_| rng.random_range(0.5..1.5)).collect())?;
            let w = random(&[4, 3], rng, 1.0);
            check_problem(&store, &[v0, gain], corrupt, |g, _, v| {
                let y = g.weight_norm(v[0], v[1])?;
                weighted_sum(g, y, &w)
            })
        }
        Component::MogNll => {
            let mixtures = 1 + trial % 3;
            let rows = 6;
            let heads = random(&[rows, head_width(mixtures)], rng, 2.0);
            let pred = random(&[rows, 1], rng, 0.5);
            let target = random(&[rows, 1], rng, 0.5);
            let w = random(&[rows, 1], rng, 1.0);
            check_problem(&store, &[heads], corrupt, |g, _, v| {
                let p = g.constant(pred.clone())?;
                let t = g.constant(target.clone())?;
                let out = head_loss(g, v[0], p, t, mixtures)?;
                let m = weighted_sum(g, out.mixture_mean, &w)?;
                Ok(g.add(out.nll, m)?)
            })
        }
        Component::PowerLoss => {
            let basis = PowerLossBasis::new(48, 16, 8)?;
            let x = random(&[2, 48], rng, 0.5);
            let target = random(&[2, 48], rng, 0.5).into_data();
            check_problem(&store, &[x], corrupt, |g, _, v| Ok(basis.loss(g, v[0], &target)?))
        }
    }
}

/// Analytic gradients of the inputs and of every trainable parameter in
/// `store`, compared against central differences.
fn check_problem<F>(store: &ParamStore, inputs: &[Tensor], corrupt: bool, build: F) -> Result<GradReport, SuiteError>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var, SuiteError>,
{
    let eval = |st: &ParamStore, xs: &[Tensor]| -> Result<f64, SuiteError> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|x| g.variable(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut g, st, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|x| g.variable(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, store, &vars)?;
    g.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    g.accumulate_param_grads(&mut with_grads);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for &id in &ids {
        let t = with_grads.get(id);
        analytic.push(t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec));
    }

    let h = FD_STEP;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].len()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let fp = eval(store, &work)?;
            work[k].data_mut()[j] = x0 - h;
            let fm = eval(store, &work)?;
            work[k].data_mut()[j] = x0;
            *gj = (fp - fm) / (2.0 * h);
        }
        numeric.push(grad);
    }
    let mut st = store.clone();
    for &id in &ids {
        let mut grad = vec![0.0; store.get(id).len()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let x0 = store.get(id).data()[j];
            st.get_mut(id).data_mut()[j] = x0 + h;
            let fp = eval(&st, inputs)?;
            st.get_mut(id).data_mut()[j] = x0 - h;
            let fm = eval(&st, inputs)?;
            st.get_mut(id).data_mut()[j] = x0;
            *gj = (fp - fm) / (2.0 * h);
        }
        numeric.push(grad);
    }

    if corrupt {
        let a = &mut analytic[0][0];
        *a += 0.1 * a.abs().max(1.0);
    }
    Ok(compare(&analytic, &numeric))
}

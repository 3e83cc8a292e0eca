//! Central finite-difference verification of analytic gradients.
//!
//! A forward closure builds a graph and returns any-shaped output; the checker
//! contracts it with a fixed random weight tensor to get a scalar, runs
//! backward once, then compares every checked entry against
//! `(L(θ+h) - L(θ-h)) / 2h`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradient magnitudes below this are compared absolutely.
pub const FD_MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Check at most this many entries per tensor (randomly chosen).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: FD_STEP,
            rel_tol: FD_REL_TOL,
            max_entries: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(FD_MAGNITUDE_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err >= self.max_rel_error {
            self.max_rel_error = err;
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error >= self.max_rel_error || self.worst.is_empty() {
            self.worst = other.worst;
        }
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
    }
}

fn entries(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_entries {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn contract(g: &mut Graph, out: Var, weights: &mut Option<Tensor>, seed: u64) -> Result<Var> {
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng)
    });
    g.weighted_sum(out, w)
}

/// Checks gradients with respect to the `inputs` tensors.
pub fn check_inputs<F>(
    store: &ParamStore,
    mode: Mode,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let eval = |xs: &[Tensor], weights: &mut Option<Tensor>| -> Result<f64> {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = forward(&mut g, &vars)?;
        let l = contract(&mut g, out, weights, cfg.seed)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = forward(&mut g, &vars)?;
    let loss = contract(&mut g, out, &mut weights, cfg.seed)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for k in entries(inputs[t].len(), cfg, t as u64) {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + cfg.step;
            let plus = eval(&work, &mut weights)?;
            work[t].data_mut()[k] = orig - cfg.step;
            let minus = eval(&work, &mut weights)?;
            work[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(|| format!("input {t}[{k}]"), grad.data()[k], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to trainable parameters (all, or `only`).
pub fn check_params<F>(
    store: &ParamStore,
    mode: Mode,
    only: Option<&[ParamId]>,
    cfg: &GradCheckConfig,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut weights = None;
    let eval = |s: &ParamStore, weights: &mut Option<Tensor>| -> Result<f64> {
        let mut g = Graph::new(s, mode);
        let out = forward(&mut g)?;
        let l = contract(&mut g, out, weights, cfg.seed)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(store, mode);
    let out = forward(&mut g)?;
    let loss = contract(&mut g, out, &mut weights, cfg.seed)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    drop(g);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect(),
    };
    if ids.is_empty() {
        return Err(ReidError::InvalidArgument("no parameters to check".into()));
    }
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in ids {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let name = &store.param(id).name;
        for k in entries(analytic.len(), cfg, id.index() as u64 + 1000) {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = eval(&work, &mut weights)?;
            work.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = eval(&work, &mut weights)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(|| format!("{name}[{k}]"), analytic.data()[k], numeric);
        }
    }
    Ok(report)
}

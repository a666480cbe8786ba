//! Central finite-difference checks of recorded gradients.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward code it validates.

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<Mismatch>,
    /// Probes excluded because a non-differentiable point (ReLU or max-pool
    /// switch) lies inside the difference stencil.
    pub kinks: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn worst_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |m| m.rel_err)
    }

    fn add(&mut self, m: Mismatch, kink: bool) {
        if kink {
            self.kinks.push(m);
            return;
        }
        self.checked += 1;
        if self.worst.as_ref().is_none_or(|w| m.rel_err > w.rel_err) {
            self.worst = Some(m);
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences at h = 1e-5 on O(1) losses resolve gradients to
/// about 1e-10 absolute, so smaller magnitudes are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Relative error above which a probe is examined for a kink.
const SUSPECT: f64 = 1e-5;

/// Indices to probe: all of them for small tensors, otherwise an evenly
/// strided subset of `max_per_tensor` entries.
fn probe_indices(len: usize, max_per_tensor: usize) -> Vec<usize> {
    if len <= max_per_tensor {
        return (0..len).collect();
    }
    let stride = len as f64 / max_per_tensor as f64;
    (0..max_per_tensor).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
}

fn eval_loss(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(store, Mode::Eval, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Second differences at steps h/2, h and 2h agree for a smooth function
/// but not when a kink lies within the stencil.
fn straddles_kink(eval: &mut impl FnMut(f64) -> Result<f64>, h: f64, f0: f64) -> Result<bool> {
    let mut curv = [0.0; 3];
    for (c, s) in curv.iter_mut().zip([h / 2.0, h, 2.0 * h]) {
        *c = (eval(s)? - 2.0 * f0 + eval(-s)?) / (s * s);
    }
    let noise = 1e3 * f64::EPSILON * f0.abs().max(1.0) / (h * h / 4.0);
    let scale = curv.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let spread = curv.iter().fold(0.0f64, |m, c| m.max((c - curv[1]).abs()));
    Ok(spread > 0.1 * scale + noise)
}

/// Compares the gradients of every trainable parameter and every input
/// against central differences with step `h`. Probes whose stencil
/// straddles a kink are reported in [`GradCheckReport::kinks`] instead of
/// counting as mismatches.
pub fn check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_per_tensor: usize,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new(store, Mode::Eval, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let f0 = g.value(loss).data()[0];
    let (pgrads, ngrads) = g.backward_all(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in 0..store.len() {
        let p = store.by_id(id);
        if !p.trainable {
            continue;
        }
        let analytic = pgrads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        for idx in probe_indices(p.tensor.len(), max_per_tensor) {
            let orig = p.tensor.data()[idx];
            let mut eval = |delta: f64| {
                work.by_id_mut(id).tensor.data_mut()[idx] = orig + delta;
                let v = eval_loss(&work, inputs, &f);
                work.by_id_mut(id).tensor.data_mut()[idx] = orig;
                v
            };
            let m = probe(&mut eval, h, f0, p.name.clone(), idx, analytic[idx])?;
            report.add(m.0, m.1);
        }
    }

    let mut work_inputs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = ngrads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for idx in probe_indices(inputs[k].len(), max_per_tensor) {
            let orig = inputs[k].data()[idx];
            let mut eval = |delta: f64| {
                work_inputs[k].data_mut()[idx] = orig + delta;
                let v = eval_loss(store, &work_inputs, &f);
                work_inputs[k].data_mut()[idx] = orig;
                v
            };
            let m = probe(&mut eval, h, f0, format!("input{k}"), idx, analytic[idx])?;
            report.add(m.0, m.1);
        }
    }
    Ok(report)
}

fn probe(
    eval: &mut impl FnMut(f64) -> Result<f64>,
    h: f64,
    f0: f64,
    what: String,
    index: usize,
    analytic: f64,
) -> Result<(Mismatch, bool)> {
    let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
    let err = rel_err(analytic, numeric, REL_FLOOR);
    let kink = err > SUSPECT && straddles_kink(eval, h, f0)?;
    Ok((Mismatch { what, index, analytic, numeric, rel_err: err }, kink))
}

//! Central finite-difference gradient checks.

use serde::Serialize;

use crate::error::Result;
use crate::numcore::params::{Grads, ParamStore};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 (exact invariances) are judged on absolute error, which
    /// is dominated by rounding at `h = 1e-5`.
    pub denom_floor: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-4,
        }
    }
}

impl CheckSettings {
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.denom_floor)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central differences for every
/// scalar of every parameter in `store`.
pub fn check_params(
    store: &ParamStore,
    settings: CheckSettings,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    analytic: impl Fn(&ParamStore) -> Result<Grads>,
) -> Result<Vec<ParamReport>> {
    let grads = analytic(store)?;
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + settings.step;
            let plus = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - settings.step;
            let minus = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * settings.step);
            let a = grads.get(id).data()[k];
            max_rel = max_rel.max(settings.rel_err(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        out.push(ParamReport {
            name: store.name(id).to_string(),
            elements: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < settings.tolerance,
        });
    }
    Ok(out)
}

/// Checks the gradient of a scalar function of plain input tensors built on a
/// fresh tape. Returns the max relative error over all inputs.
pub fn check_inputs(
    inputs: &[Tensor],
    settings: CheckSettings,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let y = build(&mut t, &vars)?;
        Ok(t.value(y).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    tape.backward(y)?;
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = tape.grad(*v).unwrap_or(&zero).clone();
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + settings.step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = orig - settings.step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * settings.step);
            worst = worst.max(settings.rel_err(g.data()[k], numeric));
        }
    }
    Ok(worst)
}

//! Central finite-difference verification of analytic gradients.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Step ladder for model parameters, largest first.
pub const PARAM_FD_STEPS: [f64; 5] = [1e-3, 2.5e-4, 6.25e-5, 1.5625e-5, 3.90625e-6];

/// Denominator floor for the relative error, so that gradients which are
/// zero on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tol
    }

    fn record(&mut self, rel: f64, at: (usize, usize)) {
        self.checked += 1;
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = Some(at);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every entry of every input against central differences.
///
/// `f` must build a scalar from the given input vars; non-scalar operations
/// should be reduced inside `f` (e.g. with a fixed random projection).
pub fn grad_check<F>(inputs: &[Tensor], tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    grad_check_inputs(&ParamStore::new(), inputs, tol, f)
}

/// [`grad_check`] with parameters from `store` available to `f`.
pub fn grad_check_inputs<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new(store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(&tape, *var)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(relative_error(analytic.data()[e], numeric), (k, e));
        }
    }
    Ok(report)
}

/// Checks selected parameter entries `(param, flat index)` of a model loss.
///
/// Model losses sit around 1 while single-entry gradients can be 1e-8, so
/// small steps drown in rounding, and large steps can cross a ReLU kink.
/// Each entry is therefore differenced over [`PARAM_FD_STEPS`] and the
/// estimate is taken where two neighbouring steps agree best.
pub fn grad_check_params<F>(
    store: &ParamStore,
    entries: &[(ParamId, usize)],
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Var>,
{
    let tape = Tape::new(store);
    let out = f(&tape)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
    };
    let mut probe = store.clone();
    for (k, &(pid, e)) in entries.iter().enumerate() {
        let analytic = grads.param(pid).map_or(0.0, |g| g[e]);
        let orig = store.tensor(pid).data()[e];
        let mut eval_at = |x: f64| -> Result<f64> {
            probe.get_mut(pid).tensor.data_mut()[e] = x;
            let tape = Tape::new(&probe);
            let out = f(&tape)?;
            Ok(tape.scalar(out))
        };
        let mut estimates = Vec::with_capacity(PARAM_FD_STEPS.len());
        for h in PARAM_FD_STEPS {
            estimates.push((eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h));
        }
        probe.get_mut(pid).tensor.data_mut()[e] = orig;
        let numeric = most_consistent(&estimates);
        report.record(relative_error(analytic, numeric), (k, e));
    }
    Ok(report)
}

/// The finer estimate of the neighbouring pair that differs least.
fn most_consistent(estimates: &[f64]) -> f64 {
    estimates
        .windows(2)
        .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
        .map_or(estimates[0], |w| w[1])
}

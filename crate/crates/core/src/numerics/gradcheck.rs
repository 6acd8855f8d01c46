//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over components of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    /// (input index, component) of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Options beyond the step size.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Multiplies the analytic gradient before comparison. `1.0` in normal
    /// use; other values inject a known fault to test the harness itself.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            analytic_scale: 1.0,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("checked function must return a scalar".into()));
    }
    Ok(tape.value(out).item())
}

/// Compare the tape gradient of a scalar function of several tensors with
/// central differences.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    tape.backward(out)?;

    let again = evaluate(&f, inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(v);
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[i] * opts.analytic_scale;
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.components += 1;
            if report.components == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form: returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    finite_diff_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), opts).map(|r| r.max_rel_err)
}

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Largest `|analytic − numeric|` over all coordinates.
    pub max_abs_error: f64,
    /// Largest `|analytic|`; `max_abs_error / grad_inf_norm` is the
    /// normwise error, meaningful where single coordinates sit at roundoff.
    pub grad_inf_norm: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub checked: usize,
    pub diagnostic: Option<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Multiplies the analytic gradient before comparison. Only useful for
    /// proving that the checker catches a wrong gradient.
    #[doc(hidden)]
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            analytic_scale: 1.0,
        }
    }
}

/// Compares the tape gradient of `loss_fn` at `params` against central
/// differences. The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    op_name: &str,
    params: &[Tensor],
    opts: GradCheckOptions,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let fail = |diag: String| GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: f64::INFINITY,
        max_abs_error: f64::INFINITY,
        grad_inf_norm: 0.0,
        tolerance: opts.tolerance,
        passed: false,
        checked: 0,
        diagnostic: Some(diag),
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Ok(fail(format!("loss is {} at the base point", loss.item())));
    }
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(loss_fn(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let (mut max_abs, mut inf_norm) = (0.0f64, 0.0f64);
    let mut worst = String::new();
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(fail(format!("non-finite loss perturbing param {pi}[{j}]")));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[j] * opts.analytic_scale;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            max_abs = max_abs.max((a - numeric).abs());
            inf_norm = inf_norm.max(a.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = format!("worst at param {pi}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        grad_inf_norm: inf_norm,
        tolerance: opts.tolerance,
        passed: max_rel <= opts.tolerance,
        checked,
        diagnostic: (max_rel > opts.tolerance).then_some(worst),
    })
}

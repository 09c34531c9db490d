//! Central finite-difference gradient checking at `f64`.
//!
//! The checker evaluates a scalar-valued tensor function twice per probed
//! element (`x ± step`) and compares the quotient against the tape's
//! analytic gradient. Relative error uses a small floor in the denominator
//! so that near-zero gradients are compared absolutely, below the noise of
//! the difference quotient itself.

use super::{arg_err, Tape, Tensor, TensorError, TensorId};

/// Default probe step for `f64` checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.worst {
            Some((i, j)) => write!(
                f,
                "max rel err {:.3e} over {} probes (worst input {} elem {}: analytic {:.6e}, numeric {:.6e})",
                self.max_rel_err, self.probes, i, j, self.analytic_at_worst, self.numeric_at_worst
            ),
            None => write!(f, "no probes"),
        }
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_, _>>()?;
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(arg_err("grad_check", "function under test must return a scalar"));
    }
    Ok(tape.item(out))
}

/// Check the analytic gradient of `f` at specific `(input, element)` probes.
pub fn grad_check_at<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    probes: &[(usize, usize)],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    if step <= 0.0 {
        return Err(arg_err("grad_check", "step must be positive"));
    }
    // analytic gradients from one tape pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_, _>>()?;
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(arg_err("grad_check", "function under test must return a scalar"));
    }
    tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> =
        ids.iter().map(|id| tape.grad(*id).map(|g| g.to_vec())).collect();
    drop(tape);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        probes: 0,
    };
    for &(i, j) in probes {
        if i >= inputs.len() || j >= inputs[i].data.len() {
            return Err(arg_err("grad_check", format!("probe ({i}, {j}) out of range")));
        }
        if !inputs[i].requires_grad {
            return Err(arg_err("grad_check", format!("input {i} does not require grad")));
        }
        let a = analytic[i]
            .as_ref()
            .map(|g| g[j])
            .ok_or_else(|| arg_err("grad_check", format!("no gradient reached input {i}")))?;
        let orig = work[i].data[j];
        work[i].data[j] = orig + step;
        let fp = eval_scalar(&f, &work)?;
        work[i].data[j] = orig - step;
        let fm = eval_scalar(&f, &work)?;
        work[i].data[j] = orig;
        let n = (fp - fm) / (2.0 * step);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        report.probes += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel;
            report.worst = Some((i, j));
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    Ok(report)
}

/// Check every element of every grad-requiring input.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.requires_grad {
            for j in 0..t.data.len() {
                probes.push((i, j));
            }
        }
    }
    if probes.is_empty() {
        return Err(arg_err("grad_check", "no input requires grad"));
    }
    grad_check_at(f, inputs, step, &probes)
}

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::ParamSet;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all scalar parameters of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, tensors: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, perturbing every element of every
/// parameter. `f` must be deterministic.
pub fn finite_diff_check<F>(f: F, params: &ParamSet<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut tensors: Vec<Tensor<f64>> = params.tensors().to_vec();

    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).expect("every param leaf receives a gradient"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for p in 0..tensors.len() {
        for i in 0..tensors[p].len() {
            let orig = tensors[p].data()[i];
            tensors[p].data_mut()[i] = orig + eps;
            let up = evaluate(&f, &tensors)?;
            tensors[p].data_mut()[i] = orig - eps;
            let down = evaluate(&f, &tensors)?;
            tensors[p].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name_at(p).to_string(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

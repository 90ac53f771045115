use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Relative error with an absolute floor so that two near-zero derivatives
/// do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Compares backward gradients of `f` against central differences.
///
/// `probe` selects which flat entries of each parameter are perturbed; `None`
/// probes every entry.
pub fn grad_check_probed<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    probe: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    let mut total = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        if !analytic.is_finite() {
            return Err(Error::non_finite(format!("analytic gradient of parameter {pi}")));
        }
        let entries = match probe {
            Some(p) => p(pi, params[pi].len()),
            None => (0..params[pi].len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for &j in &entries {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let fp = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let fm = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::non_finite(format!(
                    "finite difference of parameter {pi} entry {j}"
                )));
            }
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
        total += entries.len();
        checks.push(ParamCheck {
            index: pi,
            probes: entries.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        probes: total,
        passed: max_rel_err < tol,
    })
}

/// Checks every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_probed(f, params, eps, tol, None)
}

use super::{Graph, NumericsError, Tensor, Var};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// `max |g_analytic − g_fd| / max(1, |g_analytic|, |g_fd|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the parameter handles it is given. It is
/// called once on a graph with gradient-tracking leaves and then twice per
/// coordinate on fresh graphs with perturbed values.
pub fn fd_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<FdReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::BadStep(eps));
    }
    let mut graph = Graph::new();
    let vars = params
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vs = perturbed
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let l = f(&mut g, &vs)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "fd_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for pi in 0..params.len() {
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;

            let fd = (up - down) / (2.0 * eps);
            let an = analytic[pi].data()[c];
            let rel = (an - fd).abs() / 1f64.max(an.abs()).max(fd.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

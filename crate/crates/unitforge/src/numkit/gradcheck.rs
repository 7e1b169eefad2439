//! Central finite-difference gradient checking.

use super::{Graph, NumkitError, Tensor, VarId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar function against central finite
/// differences.
///
/// `f` rebuilds the loss from scratch on every call, so it must be
/// deterministic. The relative error per coordinate is
/// `|a - n| / max(1, |a|, |n|)`, which behaves like an absolute error for
/// small gradients and a relative one for large gradients.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumkitError>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId, NumkitError>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(NumkitError::InvalidArgument(format!("bad step size {h}")));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64, NumkitError> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        g.value(loss).scalar_value()
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<VarId> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(NumkitError::NonScalarRoot);
    }
    let grad_ids = g.backward(loss, &ids)?;
    let analytic: Vec<Tensor> = grad_ids.iter().map(|&id| g.value(id).clone()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        tol,
        pass: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(NumkitError::NonFinite("grad_check finite difference"));
            }
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

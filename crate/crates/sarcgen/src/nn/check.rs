//! Finite-difference gradient verification. The loss closure must treat
//! anything that the analytic gradient treats as constant (frozen rewards,
//! detached KL coefficients) as fixed inputs, so the comparison checks the
//! surrogate actually implemented rather than the full chain rule through
//! non-differentiable machinery.

use crate::error::Result;
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_tiny: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative disagreement between an analytic and a numeric derivative.
/// Pairs where both magnitudes fall below `tiny` are compared absolutely
/// (they must agree within `tiny`) and excluded from the relative statistic.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central finite differences of `loss` over every scalar in `params`,
/// compared against `analytic` (indexed like the param set).
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    analytic: &[Option<Tensor>],
    mut loss: F,
    eps: f64,
    tiny: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst = None;
    for idx in 0..params.len() {
        for k in 0..params.tensor(idx).len() {
            let orig = params.tensor(idx).data[k];
            params.tensor_mut(idx).data[k] = orig + eps;
            let up = loss(params)?;
            params.tensor_mut(idx).data[k] = orig - eps;
            let down = loss(params)?;
            params.tensor_mut(idx).data[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic
                .get(idx)
                .and_then(|t| t.as_ref())
                .map(|t| t.data[k])
                .unwrap_or(0.0);
            if fd.abs() < tiny && an.abs() < tiny {
                skipped += 1;
                continue;
            }
            checked += 1;
            let rel = rel_error(an, fd);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((params.name(idx).to_string(), k, an, fd));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped_tiny: skipped,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn quadratic_matches() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::row_vector(vec![1.5, -0.4, 2.0]))
            .unwrap();
        let analytic = {
            let mut g = Graph::new(&ps);
            let x = g.param("x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap()
        };
        let report = finite_difference_check(
            &mut ps,
            &analytic.by_param,
            |p| {
                let mut g = Graph::new(p);
                let x = g.param("x")?;
                let sq = g.mul(x, x)?;
                let loss = g.sum(sq);
                Ok(g.value(loss).at(0, 0))
            },
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
        assert_eq!(report.checked, 3);
    }
}

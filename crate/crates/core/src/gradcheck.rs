//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{DesError, Result};
use crate::tensor::Tensor;

/// Step used by the gradient suites.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
    /// Checked coordinates whose `±eps` probes landed on a different smooth
    /// piece than the unperturbed point (see [`Graph::branch_fingerprint`]).
    /// Central differences are not meaningful there.
    pub kinks: usize,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    Ok((g.value(out).item()?, g.branch_fingerprint()))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences at every coordinate of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, eps, &coords)
}

/// As [`finite_difference_check`], restricted to the listed flat coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(DesError::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    let base = g.value(out).item()?;
    if !base.is_finite() {
        return Err(DesError::NonFinite {
            what: "objective at the unperturbed point".into(),
            coordinate: 0,
        });
    }
    let analytic = g.backward(out)?.wrt(&g, xi);
    let fingerprint = g.branch_fingerprint();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: coords.first().copied().unwrap_or(0),
        coordinates_checked: 0,
        kinks: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(DesError::InvalidInput(format!(
                "coordinate {i} out of range for {} values",
                x.numel()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, fp_plus) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, fp_minus) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if fp_plus != fingerprint || fp_minus != fingerprint {
            report.kinks += 1;
        }
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DesError::NonFinite {
                what: "perturbed objective".into(),
                coordinate: i,
            });
        }
        // Divide by the step actually realized in floating point.
        let numeric = (plus - minus) / ((orig + eps) - (orig - eps));
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
        report.coordinates_checked += 1;
    }
    Ok(report)
}

/// Anything that owns the parameters a loss reads.
pub trait ParamHolder {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl ParamHolder for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Checks parameter gradients by perturbing the listed `(parameter, flat
/// index)` coordinates in place. `worst_coordinate` indexes into `coords`.
/// The store is restored before returning.
pub fn finite_difference_check_params<M, F>(
    model: &mut M,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    M: ParamHolder,
    F: Fn(&M, &mut Graph) -> Result<NodeId>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(DesError::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let scalar = |m: &M| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = f(m, &mut g)?;
        Ok((g.value(out).item()?, g.branch_fingerprint()))
    };
    let (analytic, fingerprint) = {
        let mut g = Graph::new();
        let out = f(model, &mut g)?;
        if !g.value(out).item()?.is_finite() {
            return Err(DesError::NonFinite {
                what: "objective at the unperturbed point".into(),
                coordinate: 0,
            });
        }
        let grads = g.backward(out)?;
        (g.param_grads(&grads, model.params()), g.branch_fingerprint())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates_checked: 0,
        kinks: 0,
    };
    for (k, &(id, i)) in coords.iter().enumerate() {
        if id.0 >= model.params().len() || i >= model.params().get(id).numel() {
            return Err(DesError::InvalidInput(format!("parameter coordinate ({}, {i}) out of range", id.0)));
        }
        let orig = model.params().get(id).data()[i];
        model.params_mut().get_mut(id).data_mut()[i] = orig + eps;
        let plus = scalar(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig - eps;
        let minus = scalar(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig;
        let ((plus, fp_plus), (minus, fp_minus)) = (plus?, minus?);
        if fp_plus != fingerprint || fp_minus != fingerprint {
            report.kinks += 1;
        }
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DesError::NonFinite {
                what: format!("perturbed objective at `{}`", model.params().name(id)),
                coordinate: i,
            });
        }
        let numeric = (plus - minus) / ((orig + eps) - (orig - eps));
        let err = (analytic[id.0].data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = k;
        }
        report.coordinates_checked += 1;
    }
    Ok(report)
}

use super::{Matrix, Parameter, SeededRng};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default bound on coordinates probed per parameter.
pub const DEFAULT_PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares the analytic gradients returned by `f` against central finite
/// differences.
///
/// `f` maps a parameter set to `(value, gradients)` with one gradient per
/// parameter. Parameters with at most `max_probes` entries are checked
/// exhaustively; larger ones at `max_probes` coordinates drawn from `rng`.
pub fn check_gradient<F>(
    f: F,
    params: &[Parameter],
    rng: &mut SeededRng,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Parameter]) -> Result<(f64, Vec<Matrix>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates_checked: 0,
        worst: None,
    };
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        if analytic[pi].shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                param.name,
                analytic[pi].shape(),
                param.shape()
            )));
        }
        let len = param.value.as_slice().len();
        let coords: Vec<usize> = if len <= max_probes {
            (0..len).collect()
        } else {
            let all: Vec<usize> = (0..len).collect();
            rng.sample_without_replacement(&all, max_probes)
        };
        for idx in coords {
            let base = param.value.as_slice()[idx];
            probe[pi].value.as_mut_slice()[idx] = base + FD_STEP;
            let (plus, _) = f(&probe)?;
            probe[pi].value.as_mut_slice()[idx] = base - FD_STEP;
            let (minus, _) = f(&probe)?;
            probe[pi].value.as_mut_slice()[idx] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective non-finite when perturbing {}[{idx}]",
                    param.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[pi].as_slice()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((param.name.clone(), idx));
            }
        }
    }
    Ok(report)
}

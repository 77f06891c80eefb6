//! Central finite-difference checks against analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative error, so entries whose true gradient is
/// (numerically) zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Serialize)]
pub struct ArrayCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub arrays: Vec<ArrayCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays
            .iter()
            .map(|a| a.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Compare `analytic[i]` against `(f(x + ε e_j) - f(x - ε e_j)) / 2ε` for
/// every entry `j` of every input array. `f` is evaluated on perturbed
/// copies of `inputs` and must be a pure function of them.
pub fn check<F>(
    names: &[String],
    inputs: &[Tensor],
    analytic: &[Tensor],
    epsilon: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut arrays = Vec::with_capacity(inputs.len());
    for (a, name) in names.iter().enumerate() {
        let mut best = ArrayCheck {
            name: name.clone(),
            entries: inputs[a].numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..inputs[a].numel() {
            let orig = inputs[a].data()[j];
            work[a].data_mut()[j] = orig + epsilon;
            let plus = f(&work)?;
            work[a].data_mut()[j] = orig - epsilon;
            let minus = f(&work)?;
            work[a].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let an = analytic[a].data()[j];
            let err = relative_error(an, numeric);
            if err > best.max_rel_error || j == 0 {
                best.max_rel_error = best.max_rel_error.max(err);
                best.worst_index = j;
                best.analytic = an;
                best.numeric = numeric;
            }
        }
        arrays.push(best);
    }
    Ok(GradCheckReport { epsilon, arrays })
}

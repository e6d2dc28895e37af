//! Finite-difference verification of analytic gradients. Runs a loss
//! function twice per parameter scalar (central differences) and compares
//! against one backward pass, in f64.

use ndarray::Array2;

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare analytic gradients against central finite differences.
///
/// `loss` must be a deterministic pure function of the store. `analytic`
/// holds (name, gradient) pairs from a backward pass at the unperturbed
/// point. Every scalar of every listed tensor is checked.
pub fn check_gradients<F>(
    params: &ParamStore<f64>,
    analytic: &[(String, Array2<f64>)],
    loss: F,
    h: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> f64,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for (name, grad) in analytic {
        let (rows, cols) = grad.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = work.get(name)[[r, c]];
                work.get_mut(name)[[r, c]] = orig + h;
                let up = loss(&work);
                work.get_mut(name)[[r, c]] = orig - h;
                let down = loss(&work);
                work.get_mut(name)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = rel_err(grad[[r, c]], fd, floor);
                report.checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_param = format!("{name}[{r},{c}]");
                }
            }
        }
    }
    report
}

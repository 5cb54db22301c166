use super::Tensor;

/// Floor in the relative-error denominator; gradients far below it are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries: usize,
}

/// Central finite-difference check of `analytic` against `f` for every
/// entry of every parameter.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor<f64>], analytic: &[Tensor<f64>], h: f64) -> FdReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work = params.to_vec();
    let mut report = FdReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = f(&work);
            work[pi].data_mut()[ei] = orig - h;
            let minus = f(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_err || report.entries == 1 {
                report.max_rel_err = err;
                report.worst = (pi, ei);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

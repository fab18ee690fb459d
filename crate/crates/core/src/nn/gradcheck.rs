/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Index of the parameter with the largest relative error.
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// `(f(p + h e_i) - f(p - h e_i)) / 2h`
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], i: usize, h: f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let plus = f(&p);
    p[i] = params[i] - h;
    let minus = f(&p);
    (plus - minus) / (2.0 * h)
}

/// Checks every entry of `analytic` against central differences of `f`.
///
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert!(h > 0.0);
    assert_eq!(params.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        numeric: Vec::with_capacity(params.len()),
    };
    for i in 0..params.len() {
        let num = central_difference(&mut f, params, i, h);
        record(&mut report, i, analytic[i], num);
    }
    report
}

pub(crate) fn record(report: &mut GradCheckReport, i: usize, a: f64, num: f64) {
    let abs = (num - a).abs();
    let rel = abs / a.abs().max(num.abs()).max(1e-8);
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
        report.worst_index = i;
    }
    report.max_abs_err = report.max_abs_err.max(abs);
    report.numeric.push(num);
}

/// Finite-difference gradient verification.
///
/// The closure must be a deterministic, double-precision function of the
/// parameter groups (dropout off, fixed data). Analytic gradients are checked
/// entry by entry against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_group: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn grad_check<F>(
    params: &mut [(String, Vec<f64>)],
    analytic: &[(String, Vec<f64>)],
    mut loss: F,
    h: f64,
) -> GradCheckReport
where
    F: FnMut(&[(String, Vec<f64>)]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_group: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for g in 0..params.len() {
        assert_eq!(params[g].0, analytic[g].0, "group order mismatch");
        assert_eq!(params[g].1.len(), analytic[g].1.len());
        for i in 0..params[g].1.len() {
            let orig = params[g].1[i];
            params[g].1[i] = orig + h;
            let up = loss(params);
            params[g].1[i] = orig - h;
            let down = loss(params);
            params[g].1[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[g].1[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_group = params[g].0.clone();
                report.worst_index = i;
            }
        }
    }
    report
}

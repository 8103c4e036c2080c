use super::{Gradients, Params, TensorError};

/// Worst element-wise disagreement between analytic and central-difference
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_group: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `loss`'s analytic gradients with central finite differences
/// over every scalar parameter.
///
/// `loss` returns the scalar value and, when asked, the analytic
/// gradients. Relative error per element is
/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn finite_diff_check<L>(
    params: &Params<f64>,
    step: f64,
    mut loss: L,
) -> Result<GradCheckReport, TensorError>
where
    L: FnMut(&Params<f64>, bool) -> Result<(f64, Option<Gradients<f64>>), TensorError>,
{
    let (base, grads) = loss(params, true)?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite("loss at unperturbed parameters".into()));
    }
    let grads = grads.ok_or_else(|| TensorError::NonFinite("loss returned no gradients".into()))?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_group: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in params.ids() {
        let analytic = grads
            .get(id)
            .ok_or_else(|| TensorError::MissingGrad(params.name(id).to_string()))?
            .clone();
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let (up, _) = loss(&probe, false)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let (down, _) = loss(&probe, false)?;
            probe.get_mut(id).data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "loss at perturbed {}[{j}]",
                    params.name(id)
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_group = params.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

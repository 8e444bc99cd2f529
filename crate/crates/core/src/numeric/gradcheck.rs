use super::{Graph, NumericError, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all checked values of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Parameter name and flat index where the relative error peaks.
    pub worst: Option<(String, usize)>,
    pub values_checked: usize,
}

/// Compare reverse-mode gradients of `loss` with the fourth-order central
/// difference `(-L(θ+2ε) + 8L(θ+ε) - 8L(θ-ε) + L(θ-2ε)) / 12ε`, one
/// parameter value at a time. Its O(ε⁴) truncation error lets ε be large
/// enough that cancellation noise stays far below small gradients.
pub fn grad_check<F, E>(
    params: &ParamStore<f64>,
    epsilon: f64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var, E>,
    E: From<NumericError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |p: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(p);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        values_checked: 0,
    };
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            let mut at = |delta: f64| -> Result<f64, E> {
                work.get_mut(id).data_mut()[i] = orig + delta;
                eval(&work)
            };
            let (p2, p1) = (at(2.0 * epsilon)?, at(epsilon)?);
            let (m1, m2) = (at(-epsilon)?, at(-2.0 * epsilon)?);
            work.get_mut(id).data_mut()[i] = orig;

            // Differences first, so an unused value gives exactly zero.
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            report.values_checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

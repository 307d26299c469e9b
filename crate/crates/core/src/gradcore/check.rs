use super::{Graph, Mode, ParameterSet, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// Coordinates whose analytic derivative is zero to rounding
    /// (`|a| ≤ 1e-13`) and whose difference quotient is within
    /// finite-difference noise (`|n| ≤ 1e-9`).
    pub vanishing: usize,
    /// Largest relative error over the remaining coordinates.
    pub max_rel_error_nonvanishing: f64,
    /// `ε·|f(θ)| / h`: the resolution of the difference quotient in double
    /// precision. Absolute errors near this size are rounding noise.
    pub quotient_resolution: f64,
    /// Every checked coordinate in parameter order.
    pub entries: Vec<GradCoordinate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCoordinate {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCoordinate {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Analytic magnitude treated as an exact zero.
pub const VANISHING_ANALYTIC: f64 = 1e-13;
/// Difference-quotient magnitude attributable to rounding noise.
pub const VANISHING_NUMERIC: f64 = 1e-9;

/// Compares the analytic gradient of `program` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` over every trainable coordinate of `params`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
/// `program` must build a scalar output on the graph it is handed and must
/// be deterministic: a program that runs dropout is rejected, as is one whose
/// output differs between two evaluations at the same parameters.
pub fn grad_check<F>(params: &ParameterSet, h: f64, mode: Mode, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let eval = |p: &ParameterSet| -> Result<(Graph, Var)> {
        let mut g = Graph::new(mode, 0);
        let out = program(&mut g, p)?;
        if g.used_dropout() {
            return Err(Error::Precondition(
                "grad_check requires a deterministic program; dropout is active".into(),
            ));
        }
        if g.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check output must be scalar, got {:?}",
                g.shape(out)
            )));
        }
        Ok((g, out))
    };
    let (g0, out0) = eval(params)?;
    let (g1, out1) = eval(params)?;
    if g0.value(out0).item().to_bits() != g1.value(out1).item().to_bits() {
        return Err(Error::Precondition("grad_check program is not deterministic".into()));
    }
    let analytic = g0.backward(out0)?.into_param_grads();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
        vanishing: 0,
        max_rel_error_nonvanishing: 0.0,
        quotient_resolution: f64::EPSILON * g0.value(out0).item().abs() / h,
        entries: Vec::new(),
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = params.get(&name)?.len();
        for k in 0..len {
            let orig = params.get(&name)?.data()[k];
            let mut at = |v: f64| -> Result<f64> {
                probe.entry_mut(&name).expect("cloned").value.data_mut()[k] = v;
                let (g, o) = eval(&probe)?;
                Ok(g.value(o).item())
            };
            let fp = at(orig + h)?;
            let fm = at(orig - h)?;
            probe.entry_mut(&name).expect("cloned").value.data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(&name).map(|t| t.data()[k]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if a.abs() <= VANISHING_ANALYTIC && numeric.abs() <= VANISHING_NUMERIC {
                report.vanishing += 1;
            } else {
                report.max_rel_error_nonvanishing = report.max_rel_error_nonvanishing.max(rel);
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
                report.worst_values = (a, numeric);
            }
            report.entries.push(GradCoordinate {
                name: name.clone(),
                index: k,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient audit.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |autodiff − central difference| / (|central difference| + 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum was attained.
    pub worst: (usize, usize),
    pub probes: usize,
    /// `(parameter, element, autodiff, central difference)` per probe.
    pub entries: Vec<(usize, usize, f64, f64)>,
}

/// Compares the tape gradient of a scalar function against central
/// differences for every element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    grad_check_probes(f, params, eps, &probes)
}

/// As [`grad_check`], restricted to the given `(parameter, element)` probes.
pub fn grad_check_probes<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    probes: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.check_finite()?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.scalar(out))
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: probes.len(),
        entries: Vec::with_capacity(probes.len()),
    };
    for &(p, e) in probes {
        if p >= params.len() || e >= params[p].numel() {
            return Err(Error::InvalidArgument(format!("probe ({p}, {e}) out of range")));
        }
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = orig + eps;
        let plus = eval(&work)?;
        work[p].data_mut()[e] = orig - eps;
        let minus = eval(&work)?;
        work[p].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[p].data()[e] - numeric).abs() / (numeric.abs() + 1e-8);
        report.entries.push((p, e, analytic[p].data()[e], numeric));
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst = (p, e);
        }
    }
    Ok(report)
}

//! Central-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-parameter error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter where the maximum occurred.
    pub worst: Option<String>,
    /// Largest error of the same form taken coordinate by coordinate. Below
    /// roughly 1e-6 in gradient magnitude this is dominated by rounding in the
    /// two loss evaluations, so it is reported but not thresholded.
    pub max_elementwise_error: f64,
    pub worst_element: Option<(String, usize)>,
    /// Number of scalar coordinates perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between whole gradient arrays under the Euclidean norm.
pub fn relative_error_norm(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied())).max(1e-8);
    diff / scale
}

/// Compares `analytic` against central differences of `f` over every scalar
/// of every entry in `params`. Entries missing from `analytic` are taken to
/// have zero gradient.
pub fn grad_check(
    params: &ParamStore,
    delta: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
) -> Result<GradCheckReport> {
    let base = f(params)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(base));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        max_elementwise_error: 0.0,
        worst_element: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, |p| p.len());
        let zeros = vec![0.0; len];
        let a = analytic.get(&name).map_or(&zeros[..], |g| &g[..]);
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let original = probe.get(&name).expect("entry").data()[i];
            probe.get_mut(&name).expect("entry").data_mut()[i] = original + delta;
            let plus = f(&probe)?;
            probe.get_mut(&name).expect("entry").data_mut()[i] = original - delta;
            let minus = f(&probe)?;
            probe.get_mut(&name).expect("entry").data_mut()[i] = original;
            for v in [plus, minus] {
                if !v.is_finite() {
                    return Err(Error::Evaluation(v));
                }
            }
            let n = (plus - minus) / (2.0 * delta);
            let err = relative_error(a[i], n);
            if err > report.max_elementwise_error {
                report.max_elementwise_error = err;
                report.worst_element = Some((name.clone(), i));
            }
            numeric.push(n);
            report.checked += 1;
        }
        let err = relative_error_norm(a, &numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(name.clone());
        }
    }
    Ok(report)
}

/// Value and parameter gradients of a loss built on a fresh tape.
pub fn tape_value_and_grads(
    params: &ParamStore,
    build: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let grads = tape.backward(root);
    Ok((tape.scalar(root), tape.param_grads(&grads).into_iter().collect()))
}

/// Gradient check of a tape-built loss against its own reverse sweep.
pub fn check_tape_fn(
    params: &ParamStore,
    delta: f64,
    build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (_, analytic) = tape_value_and_grads(params, &build)?;
    grad_check(
        params,
        delta,
        |p| {
            let mut tape = Tape::new();
            let root = build(&mut tape, p)?;
            Ok(tape.scalar(root))
        },
        &analytic,
    )
}

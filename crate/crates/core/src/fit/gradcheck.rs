//! Central finite-difference verification of analytic gradients.

use super::model::FitProblem;
use super::params::{ModelParams, ParamLayout};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Pairs below this `|analytic| + |numeric|` are not scored.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `None` when both are below [`GRAD_FLOOR`].
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn scored(&self) -> usize {
        self.coords.iter().filter(|c| c.rel_error.is_some()).count()
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .filter(|c| c.rel_error.is_some())
            .max_by(|a, b| a.rel_error.partial_cmp(&b.rel_error).unwrap())
    }
}

/// Compares the analytic gradient at `x` with `(f(x+h) - f(x-h)) / 2h` on
/// each coordinate in `coords`. The relative error is
/// `|a - n| / (|a| + |n|)`.
pub fn finite_diff_check(obj: &impl Objective, x: &[f64], coords: &[usize], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if let Some(bad) = coords.iter().find(|&&i| i >= x.len()) {
        return Err(Error::invalid(format!(
            "coordinate {bad} outside {} parameters",
            x.len()
        )));
    }
    let grad = obj.gradient(x)?;
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        probe[i] = x[i] + step;
        let plus = obj.value(&probe)?;
        probe[i] = x[i] - step;
        let minus = obj.value(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grad[i];
        let denom = analytic.abs() + numeric.abs();
        let rel_error = (denom > GRAD_FLOOR).then(|| (analytic - numeric).abs() / denom);
        if let Some(r) = rel_error {
            report.max_rel_error = report.max_rel_error.max(if r.is_nan() { f64::INFINITY } else { r });
        }
        report.coords.push(CoordCheck {
            index: i,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}

/// At least `per_group` coordinates (or the whole group if smaller) from
/// every parameter group, ascending.
pub fn sample_coords(layout: &ParamLayout, per_group: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for g in layout.groups() {
        let mut idx: Vec<usize> = g.range().collect();
        idx.shuffle(rng);
        idx.truncate(per_group);
        out.extend(idx);
    }
    out.sort_unstable();
    out
}

/// The total fitting loss as a function of the flattened model.
pub struct ModelObjective<'a> {
    pub problem: &'a FitProblem,
    pub template: ModelParams,
}

impl ModelObjective<'_> {
    fn at(&self, x: &[f64]) -> Result<ModelParams> {
        let mut p = self.template.clone();
        p.assign_values(x)?;
        Ok(p)
    }
}

impl Objective for ModelObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.problem.loss(&self.at(x)?)?.total())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.at(x)?;
        let fwd = self.problem.forward(&p)?;
        Ok(self.problem.backward(&p, &fwd)?.values)
    }
}

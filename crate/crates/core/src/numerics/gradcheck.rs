use serde::Serialize;

use super::matrix::DenseMatrix;
use super::tape::{Gradients, ParamId};
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`
/// so coordinates whose true gradient is zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Named, ordered collection of parameter matrices. Position `i` is `ParamId(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseMatrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn into_values(self) -> Vec<DenseMatrix> {
        self.values
    }

    pub fn coordinate_count(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub h: f64,
    pub tol: f64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordinateCheck>,
    pub failing: Vec<CoordinateCheck>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients from `eval` against central differences
/// `(L(θ+h) − L(θ−h)) / 2h` on every coordinate of `params`.
///
/// `eval` returns the loss and its analytic gradients. Parameters absent
/// from the returned map are taken to have zero gradient.
pub fn finite_diff_check<F>(mut eval: F, params: &ParamSet, h: f64, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let (first, grads) = eval(params)?;
    let (second, _) = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut report = CheckReport {
        h,
        tol,
        coordinates: 0,
        max_rel_err: 0.0,
        worst: None,
        failing: Vec::new(),
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let base = params.get(id);
        for idx in 0..base.data().len() {
            let x = base.data()[idx];
            probe.get_mut(id).data_mut()[idx] = x + h;
            let (plus, _) = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = x - h;
            let (minus, _) = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(&id).map_or(0.0, |g| g.data()[idx]);
            let rel_err = relative_error(analytic, numeric);
            let check = CoordinateCheck {
                param: params.name(id).to_string(),
                index: idx,
                analytic,
                numeric,
                rel_err,
            };
            report.coordinates += 1;
            if !(rel_err < tol) {
                report.failing.push(check.clone());
            }
            if report.worst.is_none() || rel_err > report.max_rel_err || rel_err.is_nan() {
                report.max_rel_err = rel_err;
                report.worst = Some(check);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::GradTape;
    use std::cell::Cell;

    fn theta(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("theta", DenseMatrix::from_rows(&[values]).unwrap());
        p
    }

    fn squared_norm(params: &ParamSet) -> Result<(f64, Gradients)> {
        let mut tape = GradTape::new();
        let t = tape.param(ParamId(0), params.get(ParamId(0)).clone());
        let sq = tape.matmul_transposed(t, t)?;
        let loss = tape.value(sq).data()[0];
        Ok((loss, tape.backward(sq)?))
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        let params = theta(&[1.0, 2.0]);
        let (_, g) = squared_norm(&params).unwrap();
        assert_eq!(g[&ParamId(0)].data(), &[2.0, 4.0]);
        let report = finite_diff_check(squared_norm, &params, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err < 1e-8);
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = theta(&[0.3, -0.7, 5.0]);
        let report = finite_diff_check(|_| Ok((4.2, Gradients::new())), &params, 1e-5, 1e-8).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err, 0.0);
        for c in std::iter::once(report.worst.unwrap()) {
            assert_eq!(c.numeric, 0.0);
        }
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let params = theta(&[1.0, 2.0]);
        let bad = |p: &ParamSet| {
            let (l, mut g) = squared_norm(p)?;
            g.get_mut(&ParamId(0)).unwrap().data_mut()[1] = 0.0;
            Ok((l, g))
        };
        let report = finite_diff_check(bad, &params, 1e-5, 1e-6).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing.len(), 1);
        assert_eq!(report.worst.unwrap().index, 1);
    }

    #[test]
    fn non_deterministic_loss_is_detected() {
        let calls = Cell::new(0u32);
        let flaky = |_: &ParamSet| {
            calls.set(calls.get() + 1);
            Ok((calls.get() as f64, Gradients::new()))
        };
        assert!(matches!(
            finite_diff_check(flaky, &theta(&[1.0]), 1e-5, 1e-4),
            Err(Error::Determinism { .. })
        ));
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(finite_diff_check(squared_norm, &theta(&[1.0]), 0.0, 1e-4).is_err());
    }
}

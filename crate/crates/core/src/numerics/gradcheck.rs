//! Gradient driver and central finite-difference checker.

use super::autodiff::{DiffValue, Graph, Var};
use crate::error::{Error, Result};

/// Absolute floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Builds a scalar loss from leaves bound to `params` (in order).
pub trait LossBuilder: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> LossBuilder for F {}

/// Evaluates the loss and accumulates its gradient into every parameter
/// that has `requires_grad` set. Returns the loss value.
pub fn gradient(params: &mut [DiffValue], build: impl LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.value.clone(), p.requires_grad))
        .collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        if let Some(d) = grads.get(*v) {
            for (acc, x) in p.grad.data_mut().iter_mut().zip(d.data()) {
                *acc += x;
            }
        }
    }
    Ok(g.value(loss).data()[0])
}

fn evaluate(params: &[DiffValue], build: &impl LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.value.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::invalid("finite differences need a scalar loss"));
    }
    Ok(v.data()[0])
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    /// Per parameter, per entry relative error.
    pub errors: Vec<Vec<f64>>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    /// `(parameter, entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients with `(f(θ+h) − f(θ−h)) / 2h` for every
/// entry of every parameter with `requires_grad`.
pub fn finite_diff_check(
    params: &[DiffValue],
    build: impl LossBuilder,
    h: f64,
) -> Result<FiniteDiffReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut work: Vec<DiffValue> = params.to_vec();
    work.iter_mut().for_each(DiffValue::zero_grad);
    gradient(&mut work, &build)?;

    let mut report = FiniteDiffReport {
        errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe: Vec<DiffValue> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut errs = Vec::new();
        let mut nums = Vec::new();
        if p.requires_grad {
            for e in 0..p.value.len() {
                let orig = p.value.data()[e];
                probe[pi].value.data_mut()[e] = orig + h;
                let up = evaluate(&probe, &build)?;
                probe[pi].value.data_mut()[e] = orig - h;
                let down = evaluate(&probe, &build)?;
                probe[pi].value.data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = relative_error(work[pi].grad.data()[e], numeric);
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((pi, e));
                }
                nums.push(numeric);
                errs.push(err);
            }
        }
        report.analytic.push(work[pi].grad.data().to_vec());
        report.numeric.push(nums);
        report.errors.push(errs);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::sigmoid;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_derivative() {
        let params = [DiffValue::new(Tensor::scalar(3.0))];
        let report = finite_diff_check(
            &params,
            |g: &mut Graph, v: &[Var]| {
                let sq = g.mul(v[0], v[0]);
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!((report.numeric[0][0] - 6.0).abs() < 1e-9);
        assert!((report.analytic[0][0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_at_one() {
        let params = [DiffValue::new(Tensor::scalar(1.0))];
        let report = finite_diff_check(
            &params,
            |g: &mut Graph, v: &[Var]| {
                let s = g.silu(v[0]);
                Ok(g.sum(s))
            },
            1e-5,
        )
        .unwrap();
        let s = sigmoid(1.0);
        let analytic = s * (1.0 + (1.0 - s));
        assert!((report.numeric[0][0] - analytic).abs() < 1e-7);
        assert!((report.analytic[0][0] - analytic).abs() < 1e-14);
    }

    #[test]
    fn linear_map_exact() {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
        let params = [DiffValue::new(Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap())];
        let report = finite_diff_check(
            &params,
            |g: &mut Graph, v: &[Var]| {
                let wv = g.constant(w.clone());
                let y = g.matmul(v[0], wv);
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn gradient_accumulates_until_reset() {
        let mut params = [DiffValue::new(Tensor::vector(vec![2.0]))];
        let build = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        gradient(&mut params, build).unwrap();
        gradient(&mut params, build).unwrap();
        assert_eq!(params[0].grad.data(), &[2.0]);
        params[0].zero_grad();
        assert_eq!(params[0].grad.data(), &[0.0]);
    }

    #[test]
    fn rejects_bad_step() {
        let params = [DiffValue::new(Tensor::scalar(1.0))];
        assert!(finite_diff_check(&params, |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0])), 0.0)
            .is_err());
    }
}

//! Nonlinear least-squares core: Levenberg-Marquardt with multiplicative
//! damping, optional box constraints (handled by projection), and a
//! central-difference Jacobian fallback.
//!
//! Every fitting operation in the toolkit goes through [`levenberg_marquardt`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("residual vector is non-finite at the initial point")]
    NonFiniteAtInit,
    #[error("non-finite residual while differentiating parameter {param_index}")]
    NonFiniteInStencil { param_index: usize },
    #[error("initial point has {got} parameters, problem expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial point violates the bounds at parameter {param_index}")]
    InitOutOfBounds { param_index: usize },
    #[error("invalid bounds: lower > upper at parameter {param_index}")]
    InvalidBounds { param_index: usize },
    #[error("{0}")]
    InvalidInput(String),
}

type ResidualFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a>;
type JacobianFn<'a> = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Sync + 'a>;

/// A least-squares problem: residual map, parameter count, optional box
/// bounds and an optional analytic Jacobian (rows = residuals, columns =
/// parameters). Without an analytic Jacobian the solver falls back to
/// central differences.
pub struct ResidualProblem<'a> {
    param_count: usize,
    residual_fn: ResidualFn<'a>,
    jacobian_fn: Option<JacobianFn<'a>>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
}

impl<'a> ResidualProblem<'a> {
    pub fn new<F>(param_count: usize, residual_fn: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + 'a,
    {
        Self {
            param_count,
            residual_fn: Box::new(residual_fn),
            jacobian_fn: None,
            lower: None,
            upper: None,
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FitError> {
        if lower.len() != self.param_count || upper.len() != self.param_count {
            return Err(FitError::DimensionMismatch {
                expected: self.param_count,
                got: lower.len().max(upper.len()),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo > hi {
                return Err(FitError::InvalidBounds { param_index: i });
            }
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    pub fn with_jacobian<J>(mut self, jacobian_fn: J) -> Self
    where
        J: Fn(&[f64]) -> DMatrix<f64> + Sync + 'a,
    {
        self.jacobian_fn = Some(Box::new(jacobian_fn));
        self
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn residuals(&self, params: &[f64]) -> Vec<f64> {
        (self.residual_fn)(params)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian_fn.is_some()
    }

    fn project(&self, params: &mut [f64]) {
        if let Some(lo) = &self.lower {
            for (p, l) in params.iter_mut().zip(lo) {
                if *p < *l {
                    *p = *l;
                }
            }
        }
        if let Some(hi) = &self.upper {
            for (p, h) in params.iter_mut().zip(hi) {
                if *p > *h {
                    *p = *h;
                }
            }
        }
    }

    fn check_init(&self, init: &[f64]) -> Result<(), FitError> {
        if init.len() != self.param_count {
            return Err(FitError::DimensionMismatch {
                expected: self.param_count,
                got: init.len(),
            });
        }
        for i in 0..init.len() {
            let lo = self.lower.as_ref().map_or(f64::NEG_INFINITY, |l| l[i]);
            let hi = self.upper.as_ref().map_or(f64::INFINITY, |u| u[i]);
            if init[i] < lo || init[i] > hi {
                return Err(FitError::InitOutOfBounds { param_index: i });
            }
        }
        Ok(())
    }

    fn jacobian(&self, params: &[f64], fd_rel_step: f64) -> Result<DMatrix<f64>, FitError> {
        match &self.jacobian_fn {
            Some(j) => Ok(j(params)),
            None => finite_difference_jacobian(self, params, fd_rel_step),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Converged when the relative step size drops below this.
    pub rel_step_tol: f64,
    /// Converged when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Relative step for the finite-difference Jacobian fallback.
    pub fd_rel_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rel_step_tol: 1e-8,
            grad_tol: 1e-8,
            max_iterations: 200,
            fd_rel_step: 1e-6,
        }
    }
}

/// Result of a least-squares fit. `std_errors` and `covariance` come from
/// sigma^2 (J^T J)^-1 with sigma^2 = residual_norm^2 / (m - n); when J^T J is
/// singular (or m <= n) the covariance is reported as unavailable and
/// `std_errors` is empty, but point estimates are still returned.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn std_error(&self, i: usize) -> Option<f64> {
        self.std_errors.get(i).copied()
    }
}

/// Central-difference Jacobian of the residual vector. Step for parameter i
/// is `rel_step * max(|p_i|, 1)`, so halving `rel_step` halves the stencil
/// width and the truncation error drops by about 4x.
pub fn finite_difference_jacobian(
    problem: &ResidualProblem,
    params: &[f64],
    rel_step: f64,
) -> Result<DMatrix<f64>, FitError> {
    if !(rel_step > 0.0) {
        return Err(FitError::InvalidInput("rel_step must be > 0".into()));
    }
    let n = params.len();
    let mut work = params.to_vec();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut m = None;
    for i in 0..n {
        let h = rel_step * params[i].abs().max(1.0);
        work[i] = params[i] + h;
        let r_plus = problem.residuals(&work);
        work[i] = params[i] - h;
        let r_minus = problem.residuals(&work);
        work[i] = params[i];
        if r_plus.iter().chain(&r_minus).any(|v| !v.is_finite()) {
            return Err(FitError::NonFiniteInStencil { param_index: i });
        }
        if *m.get_or_insert(r_plus.len()) != r_plus.len() || r_plus.len() != r_minus.len() {
            return Err(FitError::InvalidInput(
                "residual length changed between evaluations".into(),
            ));
        }
        columns.push(
            r_plus
                .iter()
                .zip(&r_minus)
                .map(|(p, q)| (p - q) / (2.0 * h))
                .collect(),
        );
    }
    let m = m.unwrap_or_else(|| problem.residuals(params).len());
    Ok(DMatrix::from_fn(m, n, |r, c| columns[c][r]))
}

/// Levenberg-Marquardt with Marquardt diagonal scaling: solves
/// `(J^T J + lambda * diag(J^T J)) step = -J^T r`, growing lambda by 10 on a
/// rejected step and shrinking it by 10 on an accepted one. Bounds are
/// enforced by projecting each trial point. Accepted steps never increase
/// the residual norm.
pub fn levenberg_marquardt(
    problem: &ResidualProblem,
    init: &[f64],
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    problem.check_init(init)?;
    let mut params = init.to_vec();
    let mut residuals = DVector::from_vec(problem.residuals(&params));
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFiniteAtInit);
    }
    let m = residuals.len();
    let n = problem.param_count();
    let mut cost = residuals.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&params, options.fd_rel_step)?;
        let gradient = jac.transpose() * &residuals;
        if gradient.amax() < options.grad_tol {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;
        // diag(JtJ) floored so the damped system stays positive definite
        let scale = DVector::from_fn(n, |i, _| jtj[(i, i)].max(1e-14));

        let mut accepted = false;
        let mut first_attempt_rel_step = f64::INFINITY;
        while lambda < 1e14 {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * scale[i];
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&gradient)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial: Vec<f64> = params
                .iter()
                .zip(step.iter())
                .map(|(p, s)| p + s)
                .collect();
            problem.project(&mut trial);
            if first_attempt_rel_step.is_infinite() {
                first_attempt_rel_step = params
                    .iter()
                    .zip(&trial)
                    .map(|(p, t)| (t - p).abs() / p.abs().max(1.0))
                    .fold(0.0_f64, f64::max);
            }
            let trial_res = DVector::from_vec(problem.residuals(&trial));
            let trial_cost = trial_res.norm_squared();
            if trial_cost.is_finite() && trial_cost < cost {
                let rel_step = params
                    .iter()
                    .zip(&trial)
                    .map(|(p, t)| (t - p).abs() / p.abs().max(1.0))
                    .fold(0.0_f64, f64::max);
                params = trial;
                residuals = trial_res;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_step < options.rel_step_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            // stalled at the basin floor: if even the least-damped step is
            // below the step tolerance, no parameter can move meaningfully
            converged = converged
                || first_attempt_rel_step < options.rel_step_tol
                || gradient.amax() < options.grad_tol.max(1e-6 * cost.sqrt());
            break;
        }
    }

    let (std_errors, covariance) = estimate_covariance(problem, &params, cost, m, options);
    Ok(FitResult {
        params,
        std_errors,
        covariance,
        residual_norm: cost.sqrt(),
        iterations,
        converged,
    })
}

fn estimate_covariance(
    problem: &ResidualProblem,
    params: &[f64],
    cost: f64,
    m: usize,
    options: &FitOptions,
) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let n = problem.param_count();
    if m <= n {
        return (Vec::new(), None);
    }
    let jac = match problem.jacobian(params, options.fd_rel_step) {
        Ok(j) => j,
        Err(_) => return (Vec::new(), None),
    };
    let jtj = jac.transpose() * &jac;
    let inv = match jtj.cholesky() {
        Some(ch) => ch.inverse(),
        None => return (Vec::new(), None),
    };
    let sigma2 = cost / (m - n) as f64;
    let cov = inv * sigma2;
    let std_errors = (0..n).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    (std_errors, Some(cov))
}

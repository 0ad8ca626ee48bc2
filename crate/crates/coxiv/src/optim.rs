//! Small dense maximizers shared by the Cox/probit engines and the EM
//! treatment block: Newton-Raphson with step-halving, and BFGS with an
//! Armijo backtracking line search.

use nalgebra::{Cholesky, DMatrix, DVector};

pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Coefficient sup-norm beyond which the likelihood is treated as
    /// monotone (separation).
    pub divergence_limit: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 30,
            divergence_limit: 50.0,
        }
    }
}

#[derive(Debug)]
pub enum NewtonError {
    Singular,
    Diverged { limit: f64 },
}

#[derive(Debug)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves (−H) d = g, adding a 1e-8 ridge if the Cholesky fails once.
fn ascent_direction(hessian: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>, NewtonError> {
    let neg_h = -hessian;
    if let Some(chol) = Cholesky::new(neg_h.clone()) {
        return Ok(chol.solve(grad));
    }
    let dim = hessian.nrows();
    let ridged = neg_h + DMatrix::identity(dim, dim) * 1e-8;
    Cholesky::new(ridged)
        .map(|c| c.solve(grad))
        .ok_or(NewtonError::Singular)
}

/// Maximizes a twice-differentiable objective by Newton-Raphson with
/// step-halving; steps are only accepted when they do not decrease the
/// objective.
pub fn newton_maximize<F>(
    start: Vec<f64>,
    mut eval: F,
    opts: &NewtonOptions,
) -> Result<NewtonResult, NewtonError>
where
    F: FnMut(&[f64]) -> (f64, DVector<f64>, DMatrix<f64>),
{
    let mut x = DVector::from_vec(start);
    let (mut value, mut grad, mut hess) = eval(x.as_slice());
    for iter in 0..opts.max_iter {
        if sup_norm(grad.as_slice()) < opts.tol {
            return Ok(NewtonResult {
                x: x.as_slice().to_vec(),
                converged: true,
                iterations: iter,
            });
        }
        let direction = ascent_direction(&hess, &grad)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let candidate = &x + &direction * step;
            if sup_norm(candidate.as_slice()) > opts.divergence_limit {
                return Err(NewtonError::Diverged {
                    limit: opts.divergence_limit,
                });
            }
            let (v, g, h) = eval(candidate.as_slice());
            if v.is_finite() && v >= value {
                x = candidate;
                value = v;
                grad = g;
                hess = h;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no improving step at this scale: report current point
            return Ok(NewtonResult {
                x: x.as_slice().to_vec(),
                converged: sup_norm(grad.as_slice()) < opts.tol,
                iterations: iter,
            });
        }
    }
    Ok(NewtonResult {
        x: x.as_slice().to_vec(),
        converged: sup_norm(grad.as_slice()) < opts.tol,
        iterations: opts.max_iter,
    })
}

pub struct BfgsOptions {
    pub tol: f64,
    /// Looser gradient norm treated as converged when the line search can no
    /// longer make floating-point progress.
    pub stall_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            stall_tol: 1e-5,
            max_iter: 200,
        }
    }
}

pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximizes a smooth objective by BFGS with Armijo backtracking; only
/// non-decreasing steps are accepted, so a warm-started call never returns a
/// worse point than it was given. Returns None when `max_iter` iterations
/// pass without meeting the gradient tolerance.
pub fn bfgs_maximize<F>(start: Vec<f64>, mut eval: F, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> (f64, DVector<f64>),
{
    let dim = start.len();
    let mut x = DVector::from_vec(start);
    let (mut value, mut grad) = eval(x.as_slice());
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut scaled = false;
    for iter in 0..opts.max_iter {
        let g_norm = sup_norm(grad.as_slice());
        if g_norm < opts.tol {
            return Some(BfgsResult {
                x: x.as_slice().to_vec(),
                value,
                converged: true,
                iterations: iter,
            });
        }
        let mut direction = &h_inv * &grad;
        let mut slope = grad.dot(&direction);
        if !(slope > 0.0) || !slope.is_finite() {
            // reset to steepest ascent if the approximation degenerated
            h_inv = DMatrix::identity(dim, dim);
            direction = grad.clone();
            slope = grad.dot(&direction);
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let candidate = &x + &direction * step;
            let (v, g) = eval(candidate.as_slice());
            if v.is_finite() && v >= value + 1e-4 * step * slope.min(0.0) && v >= value {
                let s = &candidate - &x;
                let y = &g - &grad;
                let sy = s.dot(&y);
                if sy < 0.0 && sy.abs() > 1e-12 * s.norm() * y.norm() {
                    // BFGS update on the inverse Hessian approximation of the
                    // negated (convex) problem; for maximization sᵀy < 0 and
                    // the rank-one term enters with −1/(sᵀy) > 0.
                    if !scaled {
                        // Shanno scaling of the initial approximation
                        let yy = y.dot(&y);
                        if yy > 0.0 {
                            h_inv *= -sy / yy;
                        }
                        scaled = true;
                    }
                    let rho = 1.0 / sy;
                    let identity = DMatrix::<f64>::identity(dim, dim);
                    let left = &identity - &s * y.transpose() * rho;
                    let right = &identity - &y * s.transpose() * rho;
                    h_inv = &left * h_inv * right - &s * s.transpose() * rho;
                    // keep the approximation ascent-producing
                    if !h_inv.iter().all(|v| v.is_finite()) {
                        h_inv = identity;
                    }
                }
                x = candidate;
                value = v;
                grad = g;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            // line-search stall: floating-point plateau
            let converged = sup_norm(grad.as_slice()) <= opts.stall_tol;
            return converged.then_some(BfgsResult {
                x: x.as_slice().to_vec(),
                value,
                converged: true,
                iterations: iter,
            });
        }
    }
    (sup_norm(grad.as_slice()) <= opts.stall_tol).then_some(BfgsResult {
        x: x.as_slice().to_vec(),
        value,
        converged: true,
        iterations: opts.max_iter,
    })
}

//! Optimizers driving the two registration stages: regular-step gradient
//! descent for the affine parameters and a projected-gradient limited-memory
//! BFGS with box bounds for the B-spline coefficients.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A differentiable objective with a flat parameter vector.
pub trait CostFunction<T: Real> {
    fn dim(&self) -> usize;
    fn cost(&self, params: &[T]) -> Result<T>;
    fn cost_and_gradient(&self, params: &[T]) -> Result<(T, Vec<T>)>;
}

/// Why an optimizer run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    MinStep,
    GradientTol,
    CostTol,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::MaxIters => "max-iters",
            StopReason::MinStep => "min-step",
            StopReason::GradientTol => "gradient-tol",
            StopReason::CostTol => "cost-tol",
        };
        f.write_str(s)
    }
}

/// One trace row: cost and current step length at the start of an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint<T> {
    pub iteration: usize,
    pub cost: T,
    pub step: T,
}

/// Outcome of an optimizer run. `final_params`/`final_cost` are the best
/// point seen, so the final cost never exceeds the initial cost.
#[derive(Debug, Clone)]
pub struct OptReport<T> {
    pub final_params: Vec<T>,
    pub final_cost: T,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub trace: Vec<TracePoint<T>>,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Regular-step gradient descent.
///
/// Moves along the negated, normalized gradient in scaled parameter space
/// (`y_i = theta_i * scales_i`) by the current step length; when the new
/// direction's cosine against the previous one turns negative the step is
/// multiplied by `relaxation`. Stops when the step falls below `min_step`,
/// the gradient vanishes, or `max_iters` is reached.
pub fn regular_step_gd<T: Real>(
    f: &dyn CostFunction<T>,
    init: &[T],
    max_step: T,
    min_step: T,
    relaxation: T,
    max_iters: usize,
    scales: Option<&[T]>,
) -> Result<OptReport<T>> {
    if init.len() != f.dim() {
        return Err(Error::Optimizer(format!(
            "init has {} parameters, cost function expects {}",
            init.len(),
            f.dim()
        )));
    }
    if !(min_step > T::zero() && min_step < max_step) {
        return Err(Error::Optimizer("need 0 < min_step < max_step".into()));
    }
    if !(relaxation > T::zero() && relaxation < T::one()) {
        return Err(Error::Optimizer("need 0 < relaxation < 1".into()));
    }
    let ones = vec![T::one(); init.len()];
    let scales = scales.unwrap_or(&ones);
    if scales.len() != init.len() || scales.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::Optimizer("scales must be positive, one per parameter".into()));
    }

    let n = init.len();
    let mut params = init.to_vec();
    let mut step = max_step;
    let mut prev_dir: Option<Vec<T>> = None;
    let mut trace = Vec::new();
    let mut best_params = params.clone();
    let mut best_cost = T::inf();
    let mut iterations = 0;
    let mut stop = StopReason::MaxIters;

    for iter in 0..max_iters {
        iterations = iter;
        let (cost, grad) = f.cost_and_gradient(&params)?;
        trace.push(TracePoint {
            iteration: iter,
            cost,
            step,
        });
        if cost < best_cost {
            best_cost = cost;
            best_params.copy_from_slice(&params);
        }

        // Gradient in scaled space.
        let gy: Vec<T> = grad.iter().zip(scales).map(|(g, s)| *g / *s).collect();
        let gnorm = norm(&gy);
        if !(gnorm > T::zero()) {
            stop = StopReason::GradientTol;
            break;
        }
        let dir: Vec<T> = gy.iter().map(|g| -*g / gnorm).collect();
        if let Some(pd) = &prev_dir {
            if dot(&dir, pd) < T::zero() {
                step *= relaxation;
            }
        }
        if step < min_step {
            stop = StopReason::MinStep;
            break;
        }
        for i in 0..n {
            params[i] += step * dir[i] / scales[i];
        }
        prev_dir = Some(dir);
        iterations = iter + 1;
    }

    let final_probe = f.cost(&params)?;
    if final_probe < best_cost {
        best_cost = final_probe;
        best_params.copy_from_slice(&params);
    }
    Ok(OptReport {
        final_params: best_params,
        final_cost: best_cost,
        iterations,
        stop_reason: stop,
        trace,
    })
}

fn clamp_to_box<T: Real>(x: &[T], lower: &[T], upper: &[T]) -> Vec<T> {
    x.iter()
        .zip(lower)
        .zip(upper)
        .map(|((v, lo), hi)| (*v).max(*lo).min(*hi))
        .collect()
}

/// Gradient with components pointing out of the feasible box zeroed.
fn projected_gradient<T: Real>(x: &[T], g: &[T], lower: &[T], upper: &[T]) -> Vec<T> {
    let mut pg = g.to_vec();
    for i in 0..x.len() {
        if (x[i] <= lower[i] && g[i] > T::zero()) || (x[i] >= upper[i] && g[i] < T::zero()) {
            pg[i] = T::zero();
        }
    }
    pg
}

/// L-BFGS two-loop recursion: returns the quasi-Newton descent direction for
/// gradient `g` given the stored curvature pairs.
fn two_loop<T: Real>(history: &VecDeque<(Vec<T>, Vec<T>, T)>, g: &[T]) -> Vec<T> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = *rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += s[i] * (a - b);
        }
    }
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

/// Box-constrained limited-memory BFGS.
///
/// Search directions come from the two-loop recursion on the projected
/// gradient; trial points are projected onto the box inside an Armijo
/// backtracking line search (c1 = 1e-4). Curvature pairs with non-positive
/// s'y are discarded, so every iterate stays feasible and the inverse-Hessian
/// estimate stays positive definite.
pub fn lbfgs_bounded<T: Real>(
    f: &dyn CostFunction<T>,
    init: &[T],
    lower: &[T],
    upper: &[T],
    memory: usize,
    grad_tol: T,
    max_iters: usize,
) -> Result<OptReport<T>> {
    let n = f.dim();
    if init.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::Optimizer(format!(
            "parameter/bound lengths must all be {n}"
        )));
    }
    for i in 0..n {
        if !(lower[i] <= upper[i]) {
            return Err(Error::Optimizer(format!(
                "invalid box at index {i}: lower {} > upper {}",
                lower[i], upper[i]
            )));
        }
        if init[i] < lower[i] || init[i] > upper[i] {
            return Err(Error::Optimizer(format!(
                "init[{i}] = {} is outside [{}, {}]",
                init[i], lower[i], upper[i]
            )));
        }
    }
    let memory = memory.max(1);
    let c1 = T::of(1e-4);

    let mut x = clamp_to_box(init, lower, upper);
    let (mut fx, mut g) = f.cost_and_gradient(&x)?;
    let mut history: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(memory);
    let mut trace = Vec::new();
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut last_step = T::zero();
    let mut iterations = 0;
    let mut stop = StopReason::MaxIters;

    'outer: for iter in 0..max_iters {
        iterations = iter;
        trace.push(TracePoint {
            iteration: iter,
            cost: fx,
            step: last_step,
        });
        let pg = projected_gradient(&x, &g, lower, upper);
        if norm(&pg) <= grad_tol {
            stop = StopReason::GradientTol;
            break;
        }

        let mut d = two_loop(&history, &pg);
        if dot(&d, &pg) >= T::zero() {
            // Not a descent direction; fall back to steepest descent.
            history.clear();
            d = pg.iter().map(|v| -*v).collect();
        }

        // Backtracking Armijo search along the box-projected path.
        let mut alpha = T::one();
        let accepted = loop {
            let trial: Vec<T> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
            let trial = clamp_to_box(&trial, lower, upper);
            let dx: Vec<T> = (0..n).map(|i| trial[i] - x[i]).collect();
            let dx_norm = norm(&dx);
            if dx_norm > T::zero() {
                let f_trial = f.cost(&trial)?;
                if f_trial <= fx + c1 * dot(&g, &dx) {
                    break Some((trial, f_trial, dx_norm));
                }
            }
            alpha *= T::of(0.5);
            if alpha < T::of(1e-20) {
                break None;
            }
        };
        let Some((x_new, f_new, step_len)) = accepted else {
            stop = StopReason::MinStep;
            break 'outer;
        };
        last_step = step_len;

        let (f_new, g_new) = {
            let (c, gr) = f.cost_and_gradient(&x_new)?;
            // Deterministic objective: the re-evaluated cost equals f_new.
            debug_assert!((c - f_new).abs() <= T::default_epsilon() * (T::one() + f_new.abs()));
            (c, gr)
        };

        let s: Vec<T> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<T> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > T::of(1e-10) * norm(&s) * norm(&y) {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, T::one() / sy));
        }

        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best_f {
            best_f = fx;
            best_x.copy_from_slice(&x);
        }
        iterations = iter + 1;
        if improvement <= T::of(4.0) * T::default_epsilon() * (T::one() + fx.abs()) {
            stop = StopReason::CostTol;
            break;
        }
    }

    Ok(OptReport {
        final_params: best_x,
        final_cost: best_f,
        iterations,
        stop_reason: stop,
        trace,
    })
}

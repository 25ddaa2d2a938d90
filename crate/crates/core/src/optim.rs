//! Small dense optimizers for smooth log-likelihoods.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration.
    pub trace: Vec<f64>,
}

/// Maximizes `f` (value and gradient) by BFGS with a backtracking Armijo
/// line search, stopping when the gradient max-norm falls below `tol` or
/// when five steps in a row no longer raise the objective.
pub fn bfgs_maximize<F>(f: F, x0: DVector<f64>, tol: f64, max_iter: usize) -> OptimResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let k = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h = DMatrix::<f64>::identity(k, k); // inverse Hessian of -f
    let mut trace = vec![fx];
    let mut it = 0;
    let mut stalled = 0;
    while it < max_iter && stalled < 5 {
        if g.amax() < tol {
            return OptimResult { x, value: fx, grad: g, iterations: it, converged: true, trace };
        }
        it += 1;
        let mut dir = &h * &g;
        if dir.dot(&g) <= 0.0 {
            h = DMatrix::identity(k, k);
            dir = g.clone();
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let xn = &x + &dir * t;
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ >= fx + 1e-4 * t * slope {
                next = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = next else {
            if h != DMatrix::identity(k, k) {
                h = DMatrix::identity(k, k);
                continue;
            }
            break;
        };
        let s = &xn - &x;
        let y = &g - &gn; // gradient change of -f
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(k, k);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        stalled = if fn_ - fx <= 1e-15 * fx.abs().max(1.0) { stalled + 1 } else { 0 };
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
    }
    let converged = g.amax() < tol;
    OptimResult { x, value: fx, grad: g, iterations: it, converged, trace }
}

/// Hessian by central differences of an analytic gradient, symmetrized.
pub fn numerical_hessian<F>(grad: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k = x.len();
    let mut h = DMatrix::zeros(k, k);
    for j in 0..k {
        let step = 1e-5 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let d = (grad(&xp) - grad(&xm)) / (2.0 * step);
        h.set_column(j, &d);
    }
    (&h + h.transpose()) * 0.5
}

/// Newton polishing of a maximum from a nearby start. Steps are halved until
/// the objective does not decrease; stops when the gradient max-norm is
/// below `tol`.
pub fn newton_polish<F>(f: F, start: OptimResult, tol: f64, max_iter: usize) -> OptimResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut cur = start;
    for _ in 0..max_iter {
        if cur.grad.amax() < tol {
            cur.converged = true;
            return cur;
        }
        let h = numerical_hessian(|x| f(x).1, &cur.x);
        let neg = -h;
        let Some(ch) = neg.cholesky() else { break };
        let step = ch.solve(&cur.grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let xn = &cur.x + &step * t;
            let (fv, gv) = f(&xn);
            if fv.is_finite() && fv >= cur.value - 1e-12 * cur.value.abs().max(1.0) {
                cur.x = xn;
                cur.value = fv;
                cur.grad = gv;
                cur.iterations += 1;
                cur.trace.push(fv);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    cur.converged = cur.grad.amax() < tol;
    cur
}

//! BFGS with a backtracking Armijo line search for small smooth problems.
//! The objective may return `None` outside its domain; such points are
//! treated as infinitely bad and the step is shortened.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when every gradient component is at most this in magnitude.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

pub fn bfgs<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g) = f(x.as_slice())?;
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    // first step of unit length
    let gn = g.norm();
    if gn > 0.0 {
        h /= gn;
    }
    let mut iters = 0;
    let done = |g: &DVector<f64>| g.iter().all(|v| v.abs() <= opts.grad_tol);
    while iters < opts.max_iters && !done(&g) {
        iters += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            // curvature information went bad: restart from steepest descent
            h = DMatrix::identity(n, n) / g.norm().max(1e-300);
            d = -(&h * &g);
            slope = g.dot(&d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &d * step;
            if let Some((fn_, gn)) = f(xn.as_slice()) {
                if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, DVector::from_vec(gn)));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let a = &eye - &s * y.transpose() * rho;
            let b = &eye - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    Some(BfgsResult {
        converged: done(&g),
        x: x.as_slice().to_vec(),
        f: fx,
        grad: g.as_slice().to_vec(),
        iters,
    })
}

//! Gauss–Legendre rules and an adaptive bisection integrator built on them.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a quadrature rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi's initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Shared 64-point rule.
pub fn gl64() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(64))
}

/// Shared 32-point rule.
pub fn gl32() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(32))
}

/// Adaptive integration of `f` over `[a, b]` by recursive bisection with a
/// 64-point Gauss–Legendre rule on every panel.
///
/// A panel is accepted when the panel estimate and the sum over its two
/// halves agree within `max(abs_tol, rel_tol * |total|)` scaled by the
/// panel's share of the interval.
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::domain("integration bounds must be finite"));
    }
    if a == b {
        return Ok(0.0);
    }
    let rule = gl64();
    const MAX_DEPTH: u32 = 40;
    const MAX_PANELS: usize = 20_000;

    let whole = rule.integrate(&mut f, a, b);
    let mut stack = vec![(a, b, whole, 0u32)];
    let mut total = 0.0;
    let mut panels = 0usize;
    let mut estimate = whole;
    while let Some((lo, hi, coarse, depth)) = stack.pop() {
        panels += 1;
        if panels > MAX_PANELS {
            return Err(Error::numerical("adaptive quadrature exceeded its panel budget"));
        }
        let mid = 0.5 * (lo + hi);
        let left = rule.integrate(&mut f, lo, mid);
        let right = rule.integrate(&mut f, mid, hi);
        let fine = left + right;
        if !fine.is_finite() {
            return Err(Error::numerical("non-finite integrand value"));
        }
        estimate += fine - coarse;
        let share = (hi - lo) / (b - a);
        let tol = abs_tol.max(rel_tol * estimate.abs()) * share.max(1e-12);
        if (fine - coarse).abs() <= tol || depth >= MAX_DEPTH {
            if depth >= MAX_DEPTH && (fine - coarse).abs() > tol {
                return Err(Error::numerical("adaptive quadrature did not converge"));
            }
            total += fine;
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(8);
        // exact up to degree 15
        let v = rule.integrate(|x| x.powi(14) + 3.0 * x.powi(3), -1.0, 1.0);
        assert!((v - 2.0 / 15.0).abs() < 1e-14);
        let w: f64 = rule.mapped(0.0, 3.0).map(|(_, w)| w).sum();
        assert!((w - 3.0).abs() < 1e-14);
    }

    #[test]
    fn large_rule_weights_sum_to_two() {
        let s: f64 = gl64().mapped(-1.0, 1.0).map(|(_, w)| w).sum();
        assert!((s - 2.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        // narrow gaussian bump
        let s = 1e-3;
        let v = integrate_adaptive(
            |x| (-(x - 0.3).powi(2) / (2.0 * s * s)).exp(),
            0.0,
            1.0,
            1e-12,
            0.0,
        )
        .unwrap();
        let exact = s * (2.0 * PI).sqrt();
        assert!(((v - exact) / exact).abs() < 1e-10);
    }
}

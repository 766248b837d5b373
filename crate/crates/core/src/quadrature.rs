//! Adaptive Gauss-Legendre quadrature.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes an `n`-point rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a quadrature rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi's initial guess for the i-th root.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Adaptive integrator: bisects any interval where the rule disagrees with
/// its two halves by more than the local tolerance.
#[derive(Debug, Clone)]
pub struct AdaptiveQuadrature {
    rule: GaussLegendre,
    max_depth: u32,
}

impl Default for AdaptiveQuadrature {
    fn default() -> Self {
        Self {
            rule: GaussLegendre::new(10),
            max_depth: 40,
        }
    }
}

impl AdaptiveQuadrature {
    /// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64, tol: f64) -> f64 {
        let whole = self.rule.integrate(&f, a, b);
        self.refine(&f, a, b, whole, tol, 0)
    }

    fn refine<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = self.rule.integrate(f, a, m);
        let right = self.rule.integrate(f, m, b);
        let split = left + right;
        if (split - whole).abs() <= tol || depth >= self.max_depth {
            return split;
        }
        self.refine(f, a, m, left, 0.5 * tol, depth + 1) + self.refine(f, m, b, right, 0.5 * tol, depth + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(10);
        // Exact up to degree 19.
        let v = gl.integrate(&|x: f64| x.powi(19) + 3.0 * x.powi(18), -1.0, 1.0);
        assert!((v - 6.0 / 19.0).abs() < 1e-13);
        let w: f64 = gl.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_peaked_integrands() {
        let q = AdaptiveQuadrature::default();
        let v = q.integrate(|x: f64| (-x).exp(), 0.0, 50.0, 1e-12);
        assert!((v - (1.0 - (-50f64).exp())).abs() < 1e-11);
        let s = q.integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-12);
        assert!((s - 2.0 / 3.0).abs() < 1e-10);
    }
}

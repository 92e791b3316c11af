//! Gauss–Legendre rules and the small quadrature helpers shared by the
//! transport sweeps and the radial Nyström assembly.

/// A Gauss–Legendre rule on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Nodes and weights by Newton iteration on the Legendre polynomial.
    pub fn legendre(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-based initial guess.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_value_deriv(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussRule { nodes, weights }
    }

    /// Integrate `f` over [a, b] with this rule.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(c + h * x);
        }
        acc * h
    }
}

fn legendre_value_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre over [a, b] with `panels` equal panels.
pub fn composite_gl(rule: &GaussRule, a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        acc += rule.integrate(a + p as f64 * h, a + (p + 1) as f64 * h, &mut f);
    }
    acc
}

/// Breakpoints of a mesh on [a, b] graded dyadically toward `a`.
///
/// Used for integrands with an integrable (log-type) singularity at the left
/// endpoint: panel widths halve toward `a` until `min_width` is reached.
pub fn graded_breakpoints(a: f64, b: f64, min_width: f64) -> Vec<f64> {
    let len = b - a;
    assert!(len > 0.0);
    let mut pts = vec![b];
    let mut w = len * 0.5;
    let mut x = a + w;
    while w > min_width && x > a {
        pts.push(x);
        w *= 0.5;
        x -= w;
    }
    pts.push(a);
    pts.reverse();
    pts
}

/// Integrate over [a, b] with a mesh graded toward the singular point `s`
/// (which may lie inside, at an endpoint of, or outside [a, b]).
pub fn integrate_graded(
    rule: &GaussRule,
    a: f64,
    b: f64,
    s: f64,
    min_width: f64,
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    integrate_graded_dyn(rule, a, b, s, min_width, &mut f)
}

fn integrate_graded_dyn(
    rule: &GaussRule,
    a: f64,
    b: f64,
    s: f64,
    min_width: f64,
    f: &mut dyn FnMut(f64) -> f64,
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut acc = 0.0;
    if s <= a || s >= b {
        // Grade toward the nearer endpoint.
        let toward_a = (s - a).abs() <= (s - b).abs();
        let pts = graded_breakpoints(0.0, b - a, min_width);
        for w in pts.windows(2) {
            let (lo, hi) = if toward_a {
                (a + w[0], a + w[1])
            } else {
                (b - w[1], b - w[0])
            };
            acc += rule.integrate(lo, hi, &mut *f);
        }
    } else {
        acc += integrate_graded_dyn(rule, a, s, s, min_width, f);
        acc += integrate_graded_dyn(rule, s, b, s, min_width, f);
    }
    acc
}

/// Cumulative integrals of the Lagrange basis on Gauss nodes.
///
/// `cum[q][m]` is the integral of the m-th Lagrange basis polynomial (on the
/// rule's nodes, reference interval [-1,1]) from -1 to the q-th node. This
/// turns sampled values of an integrand into its running integral at the
/// nodes, exact for polynomials of degree < n.
pub fn lagrange_cumulative(rule: &GaussRule) -> Vec<Vec<f64>> {
    let n = rule.nodes.len();
    let fine = GaussRule::legendre(n + 2);
    let mut cum = vec![vec![0.0; n]; n];
    for (q, xq) in rule.nodes.iter().enumerate() {
        for m in 0..n {
            cum[q][m] = fine.integrate(-1.0, *xq, |x| lagrange_basis(&rule.nodes, m, x));
        }
    }
    cum
}

fn lagrange_basis(nodes: &[f64], m: usize, x: f64) -> f64 {
    let mut v = 1.0;
    for (j, xj) in nodes.iter().enumerate() {
        if j != m {
            v *= (x - xj) / (nodes[m] - xj);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gl_exact_on_polynomials() {
        let rule = GaussRule::legendre(4);
        // degree 7 is exact for a 4-point rule
        let v = rule.integrate(0.0, 1.0, |x| x.powi(7));
        assert_relative_eq!(v, 1.0 / 8.0, epsilon = 1e-14);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn gl_transcendental() {
        let rule = GaussRule::legendre(8);
        let v = composite_gl(&rule, 0.0, 2.0, 4, f64::exp);
        assert_relative_eq!(v, 2f64.exp() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn graded_handles_log_singularity() {
        let rule = GaussRule::legendre(8);
        let v = integrate_graded(&rule, 0.0, 1.0, 0.0, 1e-12, |x| x.ln());
        assert_relative_eq!(v, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn lagrange_cumulative_reproduces_running_integral() {
        let rule = GaussRule::legendre(4);
        let cum = lagrange_cumulative(&rule);
        // f(x) = x^2, running integral from -1: (x^3+1)/3
        for (q, xq) in rule.nodes.iter().enumerate() {
            let approx_val: f64 = (0..4).map(|m| cum[q][m] * rule.nodes[m].powi(2)).sum();
            assert_relative_eq!(approx_val, (xq.powi(3) + 1.0) / 3.0, epsilon = 1e-13);
        }
    }
}

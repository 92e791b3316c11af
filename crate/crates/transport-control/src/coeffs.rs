//! Absorption and scattering coefficients with their derived quantities.
//!
//! The kernel argument order follows k(x, v', v): v' is the pre-scattering
//! direction being integrated over, v the post-scattering one.

use crate::error::{Error, Result};
use crate::grid::PolarGrid;
use crate::geometry::Vec2;
use std::sync::Arc;

#[derive(Clone)]
pub enum SigmaSpec {
    Const(f64),
    Func(Arc<dyn Fn(Vec2, Vec2) -> f64 + Send + Sync>),
}

impl SigmaSpec {
    #[inline]
    pub fn eval(&self, x: Vec2, v: Vec2) -> f64 {
        match self {
            SigmaSpec::Const(c) => *c,
            SigmaSpec::Func(f) => f(x, v),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            SigmaSpec::Const(c) => Some(*c),
            SigmaSpec::Func(_) => None,
        }
    }
}

#[derive(Clone)]
pub enum KernelSpec {
    Zero,
    /// k = sigma_s / |V|, constant in all arguments.
    Isotropic { sigma_s: f64 },
    Func(Arc<dyn Fn(Vec2, Vec2, Vec2) -> f64 + Send + Sync>),
}

impl KernelSpec {
    #[inline]
    pub fn eval(&self, x: Vec2, v_in: Vec2, v_out: Vec2, vol_v: f64) -> f64 {
        match self {
            KernelSpec::Zero => 0.0,
            KernelSpec::Isotropic { sigma_s } => sigma_s / vol_v,
            KernelSpec::Func(f) => f(x, v_in, v_out),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, KernelSpec::Zero)
    }
}

#[derive(Clone)]
pub struct Coefficients {
    pub sigma: SigmaSpec,
    pub kernel: KernelSpec,
}

impl std::fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match &self.sigma {
            SigmaSpec::Const(c) => format!("const {c}"),
            SigmaSpec::Func(_) => "fn".into(),
        };
        let k = match &self.kernel {
            KernelSpec::Zero => "zero".into(),
            KernelSpec::Isotropic { sigma_s } => format!("isotropic sigma_s {sigma_s}"),
            KernelSpec::Func(_) => "fn".into(),
        };
        write!(f, "Coefficients {{ sigma: {s}, kernel: {k} }}")
    }
}

impl Coefficients {
    pub fn new(sigma: SigmaSpec, kernel: KernelSpec) -> Self {
        Coefficients { sigma, kernel }
    }

    /// Vacuum: sigma = 0, k = 0.
    pub fn vacuum() -> Self {
        Coefficients::new(SigmaSpec::Const(0.0), KernelSpec::Zero)
    }

    pub fn constant_isotropic(sigma: f64, sigma_s: f64) -> Self {
        let kernel = if sigma_s == 0.0 {
            KernelSpec::Zero
        } else {
            KernelSpec::Isotropic { sigma_s }
        };
        Coefficients::new(SigmaSpec::Const(sigma), kernel)
    }

    /// The diffusive-regime pair sigma = 1/eps, k = 1/(|V| eps).
    pub fn diffusive(eps: f64, vol_v: f64) -> Self {
        Coefficients::new(
            SigmaSpec::Const(1.0 / eps),
            KernelSpec::Isotropic {
                sigma_s: vol_v / (vol_v * eps),
            },
        )
    }

    #[inline]
    pub fn sigma_at(&self, x: Vec2, v: Vec2) -> f64 {
        self.sigma.eval(x, v)
    }

    /// Upper estimate of sigma over the grid (exact for constants), used to
    /// size line-quadrature panels.
    pub fn sigma_sup(&self, grid: &PolarGrid) -> f64 {
        match &self.sigma {
            SigmaSpec::Const(c) => c.abs(),
            SigmaSpec::Func(f) => {
                let mut m: f64 = 0.0;
                for a in 0..grid.n_v() {
                    let v = grid.vel.dir(a);
                    for s in 0..grid.n_spatial() {
                        m = m.max(f(grid.spatial_pos(s), v).abs());
                    }
                }
                m
            }
        }
    }

    /// Negated-absorption copy, used by the backward lift L_{Gamma \ C, -sigma}.
    pub fn negated_sigma(&self) -> Self {
        let sigma = match &self.sigma {
            SigmaSpec::Const(c) => SigmaSpec::Const(-c),
            SigmaSpec::Func(f) => {
                let f = f.clone();
                SigmaSpec::Func(Arc::new(move |x, v| -f(x, v)))
            }
        };
        Coefficients {
            sigma,
            kernel: self.kernel.clone(),
        }
    }
}

/// Grid caches of the scattering coefficients:
/// sigma_s(x,v) = int k(x,v,v') dv',  sigma_s'(x,v) = int k(x,v',v) dv'.
#[derive(Debug, Clone)]
pub struct ScatterCache {
    pub sigma_s: Vec<f64>,
    pub sigma_s_prime: Vec<f64>,
}

impl ScatterCache {
    pub fn build(coeffs: &Coefficients, grid: &PolarGrid) -> Self {
        let n_v = grid.n_v();
        let n_s = grid.n_spatial();
        let vol = grid.vel.total_measure();
        let mut sigma_s = vec![0.0; n_v * n_s];
        let mut sigma_s_prime = vec![0.0; n_v * n_s];
        match &coeffs.kernel {
            KernelSpec::Zero => {}
            KernelSpec::Isotropic { sigma_s: c } => {
                sigma_s.fill(*c);
                sigma_s_prime.fill(*c);
            }
            KernelSpec::Func(f) => {
                for s in 0..n_s {
                    let x = grid.spatial_pos(s);
                    for a in 0..n_v {
                        let va = grid.vel.dir(a);
                        let mut out = 0.0;
                        let mut inc = 0.0;
                        for b in 0..n_v {
                            let vb = grid.vel.dir(b);
                            let w = grid.vel.weights[b];
                            out += w * f(x, va, vb);
                            inc += w * f(x, vb, va);
                        }
                        sigma_s[a * n_s + s] = out;
                        sigma_s_prime[a * n_s + s] = inc;
                    }
                }
            }
        }
        let _ = vol;
        ScatterCache {
            sigma_s,
            sigma_s_prime,
        }
    }

    /// Recompute from the kernel and compare against the cache; the spec
    /// invariant demands agreement to 1e-12.
    pub fn verify(&self, coeffs: &Coefficients, grid: &PolarGrid) -> Result<f64> {
        let fresh = ScatterCache::build(coeffs, grid);
        let mut worst: f64 = 0.0;
        for (a, b) in fresh.sigma_s.iter().zip(&self.sigma_s) {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::numerical("scatter cache", "non-finite sigma_s"));
            }
            worst = worst.max((a - b).abs());
        }
        for (a, b) in fresh.sigma_s_prime.iter().zip(&self.sigma_s_prime) {
            worst = worst.max((a - b).abs());
        }
        if worst > 1e-12 {
            return Err(Error::numerical(
                "scatter cache",
                format!("cache drift {worst:.3e} exceeds 1e-12"),
            ));
        }
        Ok(worst)
    }

    pub fn sigma_s_sup(&self) -> f64 {
        self.sigma_s.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::grid::PolarGrid;

    #[test]
    fn isotropic_cache_is_exact() {
        let g = PolarGrid::build(Domain::disk(Vec2::zeros(), 1.0).unwrap(), 5, 8, 8).unwrap();
        let c = Coefficients::constant_isotropic(2.0, 0.7);
        let cache = ScatterCache::build(&c, &g);
        assert!(cache.sigma_s.iter().all(|&v| (v - 0.7).abs() < 1e-14));
        assert!(cache.verify(&c, &g).unwrap() == 0.0);
    }

    #[test]
    fn rank_one_kernel_sigma_s() {
        // k(x, v', v) = g(v) g(v'): sigma_s(x,v) = g(v) * int g
        let g = PolarGrid::build(Domain::disk(Vec2::zeros(), 1.0).unwrap(), 5, 8, 16).unwrap();
        let gv = |v: Vec2| 1.0 + 0.5 * v.x;
        let c = Coefficients::new(
            SigmaSpec::Const(1.0),
            KernelSpec::Func(Arc::new(move |_x, vi, vo| gv(vi) * gv(vo))),
        );
        let cache = ScatterCache::build(&c, &g);
        let int_g: f64 = (0..g.n_v())
            .map(|b| g.vel.weights[b] * (1.0 + 0.5 * g.vel.dir(b).x))
            .sum();
        for a in 0..g.n_v() {
            let expect = (1.0 + 0.5 * g.vel.dir(a).x) * int_g;
            assert!((cache.sigma_s[a * g.n_spatial()] - expect).abs() < 1e-12);
        }
    }
}

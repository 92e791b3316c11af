//! The elementary transport operators: integrating factors E+-, the lifting
//! J_C, the attenuated lift L_C, the scattering operator K, the inverse
//! streaming operator T_C^{-1} and their adjoints, traces, and the phase
//! norms built on characteristic-line quadrature.
//!
//! Line integrals use cell-aligned composite Gauss panels: panel boundaries
//! sit on the crossings of the chord with the polar grid's circles and rays,
//! so the interpolated integrand is smooth inside every panel. Optical depth
//! along a panel is accumulated through the cumulative Lagrange integrals of
//! the same Gauss nodes, exact for polynomial absorption.

use crate::coeffs::{Coefficients, ScatterCache};
use crate::error::{Error, Result};
use crate::geometry::{cross2, Classification, Side, Vec2};
use crate::grid::{
    Branch, BoundaryData, BoundaryField, BoundarySet, PhaseEval, PhaseField, PolarGrid,
};
use crate::quad::{lagrange_cumulative, GaussRule};
use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::sync::OnceLock;

/// Exponent magnitude beyond which E-factors are clamped (and counted).
pub const EXP_GUARD: f64 = 700.0;

const PANEL_Q: usize = 4;

struct PanelRule {
    nodes: [f64; PANEL_Q],
    weights: [f64; PANEL_Q],
    /// cum[q][m]: integral of Lagrange basis m from -1 to node q.
    cum: [[f64; PANEL_Q]; PANEL_Q],
    /// full[m]: integral of basis m over [-1, 1].
    full: [f64; PANEL_Q],
}

fn panel_rule() -> &'static PanelRule {
    static RULE: OnceLock<PanelRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let gl = GaussRule::legendre(PANEL_Q);
        let cumv = lagrange_cumulative(&gl);
        let mut nodes = [0.0; PANEL_Q];
        let mut weights = [0.0; PANEL_Q];
        let mut cum = [[0.0; PANEL_Q]; PANEL_Q];
        let mut full = [0.0; PANEL_Q];
        for q in 0..PANEL_Q {
            nodes[q] = gl.nodes[q];
            weights[q] = gl.weights[q];
            for m in 0..PANEL_Q {
                cum[q][m] = cumv[q][m];
            }
        }
        for m in 0..PANEL_Q {
            full[m] = gl.weights[m];
        }
        PanelRule {
            nodes,
            weights,
            cum,
            full,
        }
    })
}

/// Forward operator T^{-1} or its adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Forward,
    Adjoint,
}

/// Scratch buffers reused across sweeps on one thread.
#[derive(Default)]
pub struct SweepScratch {
    breaks: Vec<f64>,
}

#[inline]
fn guarded_exp(e: f64, clamps: &mut usize) -> f64 {
    if e.abs() > EXP_GUARD {
        *clamps += 1;
        e.clamp(-EXP_GUARD, EXP_GUARD).exp()
    } else {
        e.exp()
    }
}

/// Collect the cell-crossing breakpoints of the segment x + t w, t in (0, tau).
fn cell_breakpoints(grid: &PolarGrid, x: Vec2, w: Vec2, tau: f64, out: &mut Vec<f64>) {
    out.clear();
    let tol = 1e-12 * (1.0 + tau);
    let center = grid.domain.center();
    let p = x - center;
    let b = p.dot(&w);
    let p2 = p.norm_squared();
    for &r in &grid.radii {
        let disc = b * b - (p2 - r * r);
        if disc > 0.0 {
            let sq = disc.sqrt();
            for t in [-b - sq, -b + sq] {
                if t > tol && t < tau - tol {
                    out.push(t);
                }
            }
        }
    }
    let orient = cross2(p, w);
    if orient.abs() < 1e-13 * (1.0 + p.norm()) {
        // Radial chord: the only angular event is a potential center passage.
        let tc = -b;
        if tc > tol && tc < tau - tol {
            out.push(tc);
        }
    } else {
        let two_pi = 2.0 * std::f64::consts::PI;
        let th0 = p.y.atan2(p.x);
        let p1 = p + w * tau;
        let th1 = p1.y.atan2(p1.x);
        // Signed sweep in (-pi, pi), oriented by `orient`.
        let mut sweep = (th1 - th0) % two_pi;
        if sweep > std::f64::consts::PI {
            sweep -= two_pi;
        } else if sweep < -std::f64::consts::PI {
            sweep += two_pi;
        }
        let n_t = grid.n_theta() as f64;
        let step = grid.d_theta * sweep.signum();
        let n_cross = (sweep.abs() / grid.d_theta).ceil() as usize + 1;
        // First grid ray strictly beyond th0 in the sweep direction.
        let mut k = if sweep > 0.0 {
            (th0 / grid.d_theta).floor() + 1.0
        } else {
            (th0 / grid.d_theta).ceil() - 1.0
        };
        for _ in 0..n_cross {
            let theta = k * grid.d_theta;
            // Is theta within the swept arc?
            let prog = (theta - th0) * sweep.signum();
            let prog = prog.rem_euclid(two_pi);
            if prog >= sweep.abs() {
                break;
            }
            let d = Vec2::new(theta.cos(), theta.sin());
            let denom = cross2(w, d);
            if denom.abs() > 1e-15 {
                let t = -cross2(p, d) / denom;
                if t > tol && t < tau - tol && (p + w * t).dot(&d) > 0.0 {
                    out.push(t);
                }
            }
            k += step / grid.d_theta;
        }
        let _ = n_t;
    }
    out.push(0.0);
    out.push(tau);
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() < tol);
}

/// Walk the characteristic from `x` in the direction selected by
/// (kind, branch) and call `visit(pos, weight)` at every quadrature point;
/// `weight` already carries the Gauss weight, the integrating factor and the
/// branch sign. Returns the number of clamped exponents.
pub fn sweep_ray(
    grid: &PolarGrid,
    coeffs: &Coefficients,
    x: Vec2,
    a: usize,
    kind: SweepKind,
    branch: Branch,
    scratch: &mut SweepScratch,
    visit: &mut dyn FnMut(Vec2, f64),
) -> usize {
    let v = grid.vel.dir(a);
    let (dir_sign, exp_sign, out_sign) = match (kind, branch) {
        (SweepKind::Forward, Branch::CMinus) => (-1.0, -1.0, 1.0),
        (SweepKind::Forward, Branch::CPlus) => (1.0, 1.0, -1.0),
        (SweepKind::Adjoint, Branch::CMinus) => (1.0, -1.0, 1.0),
        (SweepKind::Adjoint, Branch::CPlus) => (-1.0, 1.0, -1.0),
    };
    let w = v * dir_sign;
    let tau = grid.domain.ray_exit_from(x, w);
    if tau <= 1e-14 {
        return 0;
    }
    let sigma_const = coeffs.sigma.as_const();
    let rule = panel_rule();
    let mut clamps = 0usize;

    cell_breakpoints(grid, x, w, tau, &mut scratch.breaks);
    // Optical-depth-driven subdivision: panel depth <= 1/2 keeps at least
    // 8 quadrature points per unit of integral sigma.
    let sig_sup = coeffs.sigma_sup(grid).max(1e-300);
    let l_max = (0.5 / sig_sup).min(tau);

    let mut phi_base = 0.0;
    let n_panels = scratch.breaks.len() - 1;
    for pi in 0..n_panels {
        let (t0, t1) = (scratch.breaks[pi], scratch.breaks[pi + 1]);
        let sub = ((t1 - t0) / l_max).ceil().max(1.0) as usize;
        let h = (t1 - t0) / sub as f64;
        for s in 0..sub {
            let a0 = t0 + h * s as f64;
            let half = 0.5 * h;
            let mid = a0 + half;
            match sigma_const {
                Some(sig) => {
                    for q in 0..PANEL_Q {
                        let tq = mid + half * rule.nodes[q];
                        let e = guarded_exp(exp_sign * sig * tq, &mut clamps);
                        visit(x + w * tq, out_sign * rule.weights[q] * half * e);
                    }
                }
                None => {
                    let mut sig_vals = [0.0; PANEL_Q];
                    for (q, sv) in sig_vals.iter_mut().enumerate() {
                        let tq = mid + half * rule.nodes[q];
                        *sv = coeffs.sigma_at(x + w * tq, v);
                    }
                    for q in 0..PANEL_Q {
                        let tq = mid + half * rule.nodes[q];
                        let mut part = 0.0;
                        for m in 0..PANEL_Q {
                            part += rule.cum[q][m] * sig_vals[m];
                        }
                        let phi = phi_base + half * part;
                        let e = guarded_exp(exp_sign * phi, &mut clamps);
                        visit(x + w * tq, out_sign * rule.weights[q] * half * e);
                    }
                    let mut tot = 0.0;
                    for m in 0..PANEL_Q {
                        tot += rule.full[m] * sig_vals[m];
                    }
                    phi_base += half * tot;
                }
            }
        }
    }
    clamps
}

/// Integral of sigma along x + s v dir, s in [0, t].
pub fn optical_depth(coeffs: &Coefficients, x: Vec2, v: Vec2, dir: f64, t: f64) -> f64 {
    if let Some(sig) = coeffs.sigma.as_const() {
        return sig * t;
    }
    if t <= 0.0 {
        return 0.0;
    }
    let rule = GaussRule::legendre(8);
    // panel length <= one mean free path estimated from a coarse sample
    let mut sup: f64 = 1e-9;
    for k in 0..=8 {
        sup = sup.max(coeffs.sigma_at(x + v * (dir * t * k as f64 / 8.0), v).abs());
    }
    let panels = (t * sup).ceil().max(1.0) as usize;
    crate::quad::composite_gl(&rule, 0.0, t, panels, |s| coeffs.sigma_at(x + v * (dir * s), v))
}

/// The integrating factor E_+-(x, v, t) = exp(+- int_0^t sigma(x +- s v, v) ds).
pub fn eval_e(
    coeffs: &Coefficients,
    domain: &crate::geometry::Domain,
    x: Vec2,
    v: Vec2,
    t: f64,
    sign: Side,
) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Precondition("E factor requires t >= 0".into()));
    }
    let (dir, s) = match sign {
        Side::Plus => (1.0, 1.0),
        Side::Minus => (-1.0, -1.0),
    };
    let tau = domain.travel_time(x, v, sign)?;
    if t > tau + 1e-9 {
        return Err(Error::Precondition(format!(
            "t = {t} exceeds the travel time {tau} of this branch"
        )));
    }
    Ok((s * optical_depth(coeffs, x, v, dir, t)).exp())
}

/// The lifting J_C: constant along characteristics, equal to the data at the
/// selected endpoint.
pub struct LiftJ<'a> {
    pub data: &'a BoundaryData,
    pub set: &'a BoundarySet,
}

impl PhaseEval for LiftJ<'_> {
    fn eval(&self, grid: &PolarGrid, x: Vec2, a: usize) -> f64 {
        let (p, _) = self.set.line_endpoint(x, grid.vel.dir(a));
        self.data.eval(grid, p, a)
    }
}

/// The attenuated lift L_C: decay factor E_- from incoming endpoints, growth
/// factor E_+ from outgoing ones.
pub struct LiftL<'a> {
    pub data: &'a BoundaryData,
    pub set: &'a BoundarySet,
    pub coeffs: &'a Coefficients,
}

impl LiftL<'_> {
    pub fn eval_with_branch(&self, grid: &PolarGrid, x: Vec2, a: usize) -> (f64, Branch) {
        let v = grid.vel.dir(a);
        let (p, branch) = self.set.line_endpoint(x, v);
        let g = self.data.eval(grid, p, a);
        let dist = (x - p).norm();
        let val = match branch {
            Branch::CMinus => {
                let phi = optical_depth(self.coeffs, x, v, -1.0, dist);
                g * (-phi).clamp(-EXP_GUARD, EXP_GUARD).exp()
            }
            Branch::CPlus => {
                let phi = optical_depth(self.coeffs, x, v, 1.0, dist);
                g * phi.clamp(-EXP_GUARD, EXP_GUARD).exp()
            }
        };
        (val, branch)
    }
}

impl PhaseEval for LiftL<'_> {
    fn eval(&self, grid: &PolarGrid, x: Vec2, a: usize) -> f64 {
        self.eval_with_branch(grid, x, a).0
    }
}

/// Materialize any PhaseEval on the collocation grid (parallel over
/// velocities, deterministic).
pub fn materialize(grid: &Arc<PolarGrid>, f: &(dyn PhaseEval + Sync)) -> PhaseField {
    let n_s = grid.n_spatial();
    let n_v = grid.n_v();
    let mut data = vec![0.0; n_s * n_v];
    data.par_chunks_mut(n_s).enumerate().for_each(|(a, chunk)| {
        for (s, slot) in chunk.iter_mut().enumerate() {
            *slot = f.eval(grid, grid.spatial_pos(s), a);
        }
    });
    PhaseField {
        grid: grid.clone(),
        data,
    }
}

pub fn lift_j(grid: &Arc<PolarGrid>, data: &BoundaryData, set: &BoundarySet) -> PhaseField {
    materialize(grid, &LiftJ { data, set })
}

pub fn apply_l(
    grid: &Arc<PolarGrid>,
    coeffs: &Coefficients,
    data: &BoundaryData,
    set: &BoundarySet,
) -> PhaseField {
    materialize(grid, &LiftL { data, set, coeffs })
}

/// K u(x, v) = int k(x, v', v) u(x, v') dv' by the angular quadrature.
pub fn apply_k(grid: &PolarGrid, coeffs: &Coefficients, u: &PhaseField) -> PhaseField {
    apply_k_impl(grid, coeffs, u, false)
}

/// K* u(x, v) = int k(x, v, v') u(x, v') dv'.
pub fn apply_k_adj(grid: &PolarGrid, coeffs: &Coefficients, u: &PhaseField) -> PhaseField {
    apply_k_impl(grid, coeffs, u, true)
}

fn apply_k_impl(grid: &PolarGrid, coeffs: &Coefficients, u: &PhaseField, adjoint: bool) -> PhaseField {
    let n_s = grid.n_spatial();
    let n_v = grid.n_v();
    let vol = grid.vel.total_measure();
    let mut out = PhaseField::zeros(&u.grid);
    match &coeffs.kernel {
        crate::coeffs::KernelSpec::Zero => {}
        crate::coeffs::KernelSpec::Isotropic { sigma_s } => {
            let c = sigma_s / vol;
            for s in 0..n_s {
                let mut flux = 0.0;
                for b in 0..n_v {
                    flux += grid.vel.weights[b] * u.get(b, s);
                }
                let val = c * flux;
                for a in 0..n_v {
                    out.set(a, s, val);
                }
            }
        }
        crate::coeffs::KernelSpec::Func(f) => {
            for s in 0..n_s {
                let x = grid.spatial_pos(s);
                for a in 0..n_v {
                    let va = grid.vel.dir(a);
                    let mut acc = 0.0;
                    for b in 0..n_v {
                        let vb = grid.vel.dir(b);
                        let k = if adjoint { f(x, va, vb) } else { f(x, vb, va) };
                        acc += grid.vel.weights[b] * k * u.get(b, s);
                    }
                    out.set(a, s, acc);
                }
            }
        }
    }
    out
}

/// T_C^{-1} f (or its adjoint) applied to any evaluable field.
pub fn apply_tinv(
    grid: &Arc<PolarGrid>,
    coeffs: &Coefficients,
    set: &BoundarySet,
    f: &(dyn PhaseEval + Sync),
    kind: SweepKind,
) -> (PhaseField, usize) {
    let n_s = grid.n_spatial();
    let n_v = grid.n_v();
    let mut data = vec![0.0; n_s * n_v];
    let clamps = AtomicUsize::new(0);
    data.par_chunks_mut(n_s).enumerate().for_each(|(a, chunk)| {
        let v = grid.vel.dir(a);
        let mut scratch = SweepScratch::default();
        let mut local_clamps = 0usize;
        for (s, slot) in chunk.iter_mut().enumerate() {
            let x = grid.spatial_pos(s);
            let branch = set.line_branch(x, v);
            let mut acc = 0.0;
            local_clamps += sweep_ray(grid, coeffs, x, a, kind, branch, &mut scratch, &mut |pos, w| {
                acc += w * f.eval(grid, pos, a);
            });
            *slot = acc;
        }
        clamps.fetch_add(local_clamps, Ordering::Relaxed);
    });
    (
        PhaseField {
            grid: grid.clone(),
            data,
        },
        clamps.into_inner(),
    )
}

/// One-sided trace at boundary nodes, restricted by a pair mask.
pub fn trace_restrict(u: &PhaseField, mask: impl Fn(usize) -> bool) -> BoundaryField {
    let grid = &u.grid;
    let mut out = BoundaryField::zeros(grid);
    for (node_idx, node) in grid.boundary_nodes.iter().enumerate() {
        for a in 0..grid.n_v() {
            let pair = grid.pair_index(node_idx, a);
            if mask(pair) {
                out.values[pair] = u.get(a, node.spatial);
            }
        }
    }
    out
}

/// Exponent p for the phase norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormP {
    One,
    Two,
    Inf,
}

impl NormP {
    pub fn value(self) -> f64 {
        match self {
            NormP::One => 1.0,
            NormP::Two => 2.0,
            NormP::Inf => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormReport {
    pub value: f64,
    /// Number of line weights clipped at tau < 1e-10.
    pub tau_clipped: usize,
}

/// Which weighted phase norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseNormKind {
    /// ||tau^{1-1/p} (v.grad) u||_p + ||tau^{-1/p} u||_p
    W,
    /// ||tau (v.grad) u||_p + ||u||_p
    WTilde,
}

/// Phase norm by characteristic-line quadrature. Lines are parametrized by
/// the section (a boundary set, defaulting to Gamma_-), exactly as in the
/// lifting lemma's proof; the directional derivative is a centered
/// difference along the line.
pub fn phase_norm(
    grid: &PolarGrid,
    rep: &(dyn PhaseEval + Sync),
    kind: PhaseNormKind,
    p: NormP,
    section: Option<&BoundarySet>,
) -> NormReport {
    let tau_floor = 1e-10;
    let mut acc_d = 0.0f64; // derivative term, p-th power
    let mut acc_u = 0.0f64;
    let mut max_d = 0.0f64;
    let mut max_u = 0.0f64;
    let clipped = AtomicUsize::new(0);

    let pairs: Vec<usize> = (0..grid.n_boundary_pairs())
        .filter(|&pair| match section {
            Some(set) => set.in_c[pair],
            None => grid.classify_pair(pair) == Classification::Incoming,
        })
        .collect();

    let results: Vec<(f64, f64, f64, f64)> = pairs
        .par_iter()
        .map(|&pair| {
            let (node, a) = grid.pair_of(pair);
            let dxi = grid.dxi(pair);
            if dxi == 0.0 {
                return (0.0, 0.0, 0.0, 0.0);
            }
            let x0 = grid.boundary_nodes[node].pos;
            let v = grid.vel.dir(a);
            // Traverse into the domain from this endpoint.
            let into = if grid.nu_dot_v(pair) < 0.0 { v } else { -v };
            let len = grid.domain.ray_exit_from(x0, into);
            if len <= 1e-13 {
                return (0.0, 0.0, 0.0, 0.0);
            }
            let mut tau = len;
            if tau < tau_floor {
                tau = tau_floor;
                clipped.fetch_add(1, Ordering::Relaxed);
            }
            let rule = GaussRule::legendre(4);
            let panels = ((2.0 * len / grid.d_r).ceil() as usize).clamp(4, 512);
            let h = len / panels as f64;
            let mut l_d = 0.0f64;
            let mut l_u = 0.0f64;
            let mut m_d = 0.0f64;
            let mut m_u = 0.0f64;
            for pi in 0..panels {
                let t0 = h * pi as f64;
                for (xi, wq) in rule.nodes.iter().zip(&rule.weights) {
                    let t = t0 + 0.5 * h * (1.0 + xi);
                    let wq = 0.5 * h * wq;
                    let pos = x0 + into * t;
                    let u = rep.eval(grid, pos, a);
                    let delta = (0.25 * grid.d_r).min(0.45 * t.min(len - t)).max(1e-9);
                    let du = (rep.eval(grid, pos + v * delta, a)
                        - rep.eval(grid, pos - v * delta, a))
                        / (2.0 * delta);
                    let (wd, wu) = match kind {
                        PhaseNormKind::W => match p {
                            NormP::One => (1.0, 1.0 / tau),
                            NormP::Two => (tau.sqrt(), 1.0 / tau.sqrt()),
                            NormP::Inf => (tau, 1.0),
                        },
                        PhaseNormKind::WTilde => (tau, 1.0),
                    };
                    match p {
                        NormP::One => {
                            l_d += wq * (wd * du.abs());
                            l_u += wq * (wu * u.abs());
                        }
                        NormP::Two => {
                            l_d += wq * (wd * du).powi(2);
                            l_u += wq * (wu * u).powi(2);
                        }
                        NormP::Inf => {
                            m_d = m_d.max((wd * du).abs());
                            m_u = m_u.max((wu * u).abs());
                        }
                    }
                }
            }
            (dxi * l_d, dxi * l_u, m_d, m_u)
        })
        .collect();

    for (ld, lu, md, mu) in results {
        acc_d += ld;
        acc_u += lu;
        max_d = max_d.max(md);
        max_u = max_u.max(mu);
    }

    let value = match p {
        NormP::One => acc_d + acc_u,
        NormP::Two => acc_d.sqrt() + acc_u.sqrt(),
        NormP::Inf => max_d + max_u,
    };
    NormReport {
        value,
        tau_clipped: clipped.into_inner(),
    }
}

/// Boundary measure used by trace norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryWeight {
    Dxi,
    TauDxi,
}

/// L^p norm of boundary data over the pairs selected by `mask`.
pub fn boundary_norm(
    grid: &PolarGrid,
    values: &BoundaryField,
    mask: impl Fn(usize) -> bool,
    weight: BoundaryWeight,
    p: NormP,
) -> f64 {
    let mut acc = 0.0f64;
    let mut mx = 0.0f64;
    for pair in 0..grid.n_boundary_pairs() {
        if !mask(pair) {
            continue;
        }
        let mut w = grid.dxi(pair);
        if w == 0.0 {
            continue;
        }
        if weight == BoundaryWeight::TauDxi {
            w *= grid.tau_chord(pair);
        }
        let g = values.values[pair];
        match p {
            NormP::One => acc += w * g.abs(),
            NormP::Two => acc += w * g * g,
            NormP::Inf => mx = mx.max(g.abs()),
        }
    }
    match p {
        NormP::One => acc,
        NormP::Two => acc.sqrt(),
        NormP::Inf => mx,
    }
}

/// The d = 2 identification L_*(Gamma) = L^1(Gamma, d xi).
pub fn lstar_d2(grid: &PolarGrid, values: &BoundaryField) -> f64 {
    boundary_norm(grid, values, |_| true, BoundaryWeight::Dxi, NormP::One)
}

#[derive(Debug, Clone)]
pub struct Smallness {
    pub certified: bool,
    pub margin: f64,
    pub kappa: f64,
    pub tau_sup: f64,
    pub tau_sigma_sup: f64,
}

/// The contraction certificate kappa^{1/p} < e^{-||tau sigma||_inf} / ||tau||_inf.
///
/// For p = 2 the kappa is int_V (int_V k^2 dv') dv; for p = 1 it is
/// ||sigma_s||_inf. The chord supremum uses the domain's closed form.
pub fn smallness_check(
    grid: &PolarGrid,
    coeffs: &Coefficients,
    cache: &ScatterCache,
    p: NormP,
) -> Result<Smallness> {
    let tau_sup = grid.domain.sup_tau();
    let tau_sigma_sup = match coeffs.sigma.as_const() {
        Some(s) => tau_sup * s.abs(),
        None => {
            let mut m: f64 = 0.0;
            for a in 0..grid.n_v() {
                let v = grid.vel.dir(a);
                for s in 0..grid.n_spatial() {
                    let x = grid.spatial_pos(s);
                    let tau = grid.domain.ray_exit_from(x, v) + grid.domain.ray_exit_from(x, -v);
                    m = m.max(tau * coeffs.sigma_at(x, v).abs());
                }
            }
            m
        }
    };
    let (kappa, root) = match p {
        NormP::One => (cache.sigma_s_sup(), cache.sigma_s_sup()),
        NormP::Two => {
            let n_s = grid.n_spatial();
            let n_v = grid.n_v();
            let vol = grid.vel.total_measure();
            let mut kmax: f64 = 0.0;
            for s in 0..n_s {
                let x = grid.spatial_pos(s);
                let mut outer = 0.0;
                for a in 0..n_v {
                    let va = grid.vel.dir(a);
                    let mut inner = 0.0;
                    for b in 0..n_v {
                        let k = coeffs.kernel.eval(x, grid.vel.dir(b), va, vol);
                        inner += grid.vel.weights[b] * k * k;
                    }
                    outer += grid.vel.weights[a] * inner;
                }
                kmax = kmax.max(outer);
            }
            (kmax, kmax.sqrt())
        }
        NormP::Inf => {
            return Err(Error::Precondition(
                "smallness check is defined for p in {1, 2}".into(),
            ))
        }
    };
    let rhs = (-tau_sigma_sup).exp() / tau_sup;
    let margin = rhs - root;
    Ok(Smallness {
        certified: margin > 0.0,
        margin,
        kappa,
        tau_sup,
        tau_sigma_sup,
    })
}

/// One characteristic line of a line-sampled system: shared Gauss nodes,
/// weights, and the cumulative optical depth from the incoming endpoint.
#[derive(Debug, Clone)]
pub struct LineQuad {
    pub pair: usize,
    pub a: usize,
    pub start: Vec2,
    pub dir: Vec2,
    pub len: f64,
    pub dxi: f64,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
    pub branch: Branch,
}

/// Line-sampled discretization of phase space: one Volterra system per
/// characteristic. On this representation the operator identities of the
/// continuum (duality of T^{-1} and its adjoint, the velocity-flip symmetry
/// under even absorption, the lifting isometry) hold to round-off, because
/// both members of each identity are assembled from the same nodes and the
/// same optical-depth table.
#[derive(Debug)]
pub struct LineSystem {
    pub lines: Vec<LineQuad>,
}

impl LineSystem {
    /// Build from all incoming non-tangential grid pairs, `n_q` Gauss points
    /// per line (rounded up to whole 4-point panels).
    pub fn build(grid: &PolarGrid, coeffs: &Coefficients, set: &BoundarySet, n_q: usize) -> Self {
        let rule = GaussRule::legendre(4);
        let panels = n_q.div_ceil(4).max(2);
        let mut lines = Vec::new();
        for pair in 0..grid.n_boundary_pairs() {
            if grid.classify_pair(pair) != Classification::Incoming {
                continue;
            }
            let (node, a) = grid.pair_of(pair);
            let x0 = grid.boundary_nodes[node].pos;
            let v = grid.vel.dir(a);
            let len = grid.domain.ray_exit_from(x0, v);
            if len <= 1e-12 {
                continue;
            }
            let h = len / panels as f64;
            let mut t = Vec::with_capacity(panels * 4);
            let mut w = Vec::with_capacity(panels * 4);
            for pi in 0..panels {
                for (xi, wq) in rule.nodes.iter().zip(&rule.weights) {
                    t.push(h * pi as f64 + 0.5 * h * (1.0 + xi));
                    w.push(0.5 * h * wq);
                }
            }
            // Cumulative optical depth at the nodes by fine quadrature.
            let phi: Vec<f64> = t
                .iter()
                .map(|&tm| optical_depth(coeffs, x0, v, 1.0, tm))
                .collect();
            let branch = set.line_branch(x0, v);
            lines.push(LineQuad {
                pair,
                a,
                start: x0,
                dir: v,
                len,
                dxi: grid.dxi(pair),
                t,
                w,
                phi,
                branch,
            });
        }
        LineSystem { lines }
    }

    /// Sample a field at every line node.
    pub fn sample(&self, grid: &PolarGrid, f: &(dyn PhaseEval + Sync)) -> Vec<Vec<f64>> {
        self.lines
            .iter()
            .map(|l| l.t.iter().map(|&t| f.eval(grid, l.start + l.dir * t, l.a)).collect())
            .collect()
    }

    /// Apply T_C^{-1} (forward) on the line samples.
    pub fn apply_tinv(&self, samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.map_lines(samples, false)
    }

    /// Apply the adjoint on the line samples.
    pub fn apply_tinv_adj(&self, samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.map_lines(samples, true)
    }

    fn map_lines(&self, samples: &[Vec<f64>], adjoint: bool) -> Vec<Vec<f64>> {
        self.lines
            .iter()
            .zip(samples)
            .map(|(l, f)| {
                let n = l.t.len();
                let mut out = vec![0.0; n];
                for m in 0..n {
                    let mut acc = 0.0;
                    match (l.branch, adjoint) {
                        (Branch::CMinus, false) => {
                            // int_0^{t_m} e^{-(phi_m - phi_j)} f_j
                            for j in 0..m {
                                acc += l.w[j] * (-(l.phi[m] - l.phi[j])).exp() * f[j];
                            }
                        }
                        (Branch::CPlus, false) => {
                            // -int_{t_m}^{len} e^{+(phi_j - phi_m)} f_j
                            for j in (m + 1)..n {
                                acc -= l.w[j] * (l.phi[j] - l.phi[m]).exp() * f[j];
                            }
                        }
                        (Branch::CMinus, true) => {
                            for j in (m + 1)..n {
                                acc += l.w[j] * (-(l.phi[j] - l.phi[m])).exp() * f[j];
                            }
                        }
                        (Branch::CPlus, true) => {
                            for j in 0..m {
                                acc -= l.w[j] * (l.phi[m] - l.phi[j]).exp() * f[j];
                            }
                        }
                    }
                    out[m] = acc;
                }
                out
            })
            .collect()
    }

    /// Phase inner product of two line-sampled fields: sum over lines of
    /// d xi times the line quadrature (the co-area decomposition of dx dv).
    pub fn inner(&self, fs: &[Vec<f64>], gs: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for ((l, f), g) in self.lines.iter().zip(fs).zip(gs) {
            let mut line = 0.0;
            for j in 0..l.t.len() {
                line += l.w[j] * f[j] * g[j];
            }
            acc += l.dxi * line;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{KernelSpec, SigmaSpec};
    use crate::geometry::Domain;
    use crate::grid::CPlusSpec;
    use approx::assert_relative_eq;

    fn disk_grid(n: usize) -> Arc<PolarGrid> {
        PolarGrid::build(Domain::disk(Vec2::zeros(), 2.0).unwrap(), n, 2 * n, 16).unwrap()
    }

    #[test]
    fn e_factor_closed_forms() {
        let g = disk_grid(9);
        let vac = Coefficients::vacuum();
        let v = g.vel.dir(3);
        let x = Vec2::new(0.3, -0.2);
        assert_eq!(eval_e(&vac, &g.domain, x, v, 0.7, Side::Plus).unwrap(), 1.0);
        let c = Coefficients::constant_isotropic(0.9, 0.0);
        let e = eval_e(&c, &g.domain, x, v, 0.7, Side::Plus).unwrap();
        assert_relative_eq!(e, (0.9f64 * 0.7).exp(), epsilon = 1e-13);
        let e = eval_e(&c, &g.domain, x, v, 0.7, Side::Minus).unwrap();
        assert_relative_eq!(e, (-0.9f64 * 0.7).exp(), epsilon = 1e-13);
        // sigma = 1/eps with eps = 0.5 at t = 1: E_+ = e^2
        let stiff = Coefficients::constant_isotropic(2.0, 0.0);
        let e = eval_e(&stiff, &g.domain, Vec2::zeros(), v, 1.0, Side::Plus).unwrap();
        assert_relative_eq!(e, 2f64.exp(), epsilon = 1e-13);
        // variable sigma against an analytic antiderivative
        let cvar = Coefficients::new(
            SigmaSpec::Func(Arc::new(|x: Vec2, _| 1.0 + x.x * x.x)),
            KernelSpec::Zero,
        );
        let x0 = Vec2::new(-0.5, 0.1);
        let vx = Vec2::new(1.0, 0.0);
        let t = 1.2;
        let exact: f64 = t + ((x0.x + t).powi(3) - x0.x.powi(3)) / 3.0;
        let e = eval_e(&cvar, &g.domain, x0, vx, t, Side::Plus).unwrap();
        assert_relative_eq!(e, exact.exp(), epsilon = 1e-10);
    }

    #[test]
    fn lift_constant_and_trace() {
        let g = disk_grid(9);
        let set = BoundarySet::build(&g, CPlusSpec::Empty);
        let data = BoundaryData::func(|_, _| 1.0);
        let j = lift_j(&g, &data, &set);
        assert!(j.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // with sigma = 0, L = J
        let l = apply_l(&g, &Coefficients::vacuum(), &data, &set);
        assert!(l.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lift_depends_only_on_v_for_gamma_minus() {
        let g = disk_grid(9);
        let set = BoundarySet::build(&g, CPlusSpec::Empty);
        let data = BoundaryData::func(|_, v: Vec2| v.x + 2.0);
        let j = lift_j(&g, &data, &set);
        for a in 0..g.n_v() {
            let expect = g.vel.dir(a).x + 2.0;
            for s in 0..g.n_spatial() {
                assert!((j.get(a, s) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cplus_branch_grows_exponentially() {
        let g = disk_grid(9);
        let set = BoundarySet::build(&g, CPlusSpec::Full);
        let sigma = 0.8;
        let coeffs = Coefficients::constant_isotropic(sigma, 0.0);
        let data = BoundaryData::func(|_, _| 1.0);
        let l = apply_l(&g, &coeffs, &data, &set);
        // value at x along v is e^{+sigma tau_+}
        let a = 2;
        let s = g.n_theta() * 3 + 5;
        let x = g.spatial_pos(s);
        let tp = g.domain.ray_exit_from(x, g.vel.dir(a));
        assert_relative_eq!(l.get(a, s), (sigma * tp).exp(), epsilon = 1e-10);
    }

    #[test]
    fn k_isotropic_averages() {
        let g = disk_grid(9);
        let c = Coefficients::constant_isotropic(1.0, 1.0);
        let u = PhaseField::from_fn(&g, |_, _| 3.0);
        let ku = apply_k(&g, &c, &u);
        assert!(ku.data.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn k_annihilates_odd_for_back_symmetric_kernel() {
        // k(x, v', v) = k(x, v, -v') implies K u = 0 for u odd in v.
        let g = disk_grid(7);
        let kern = KernelSpec::Func(Arc::new(|_x, vi: Vec2, vo: Vec2| {
            1.0 + (vi.dot(&vo)).powi(2)
        }));
        // this kernel is even in each argument, so k(x,v',v) = k(x,v,-v')
        let c = Coefficients::new(SigmaSpec::Const(1.0), kern);
        let u = PhaseField::from_fn(&g, |_, v| v.y); // odd in v
        let ku = apply_k(&g, &c, &u);
        assert!(ku.max_abs() < 1e-12);
    }

    #[test]
    fn k_rank_one_kernel() {
        let g = disk_grid(7);
        let gv = |v: Vec2| 1.0 + v.x;
        let c = Coefficients::new(
            SigmaSpec::Const(0.0),
            KernelSpec::Func(Arc::new(move |_x, vi, vo| gv(vi) * gv(vo))),
        );
        let u = PhaseField::from_fn(&g, |_, v| v.y + 0.3);
        let ku = apply_k(&g, &c, &u);
        // K u (x, v) = g(v) <g, u(x, .)>
        let s = 11;
        let inner: f64 = (0..g.n_v())
            .map(|b| g.vel.weights[b] * (1.0 + g.vel.dir(b).x) * u.get(b, s))
            .sum();
        for a in 0..g.n_v() {
            assert_relative_eq!(ku.get(a, s), (1.0 + g.vel.dir(a).x) * inner, epsilon = 1e-12);
        }
    }

    #[test]
    fn tinv_of_one_is_travel_time() {
        let g = disk_grid(17);
        let set = BoundarySet::build(&g, CPlusSpec::Empty);
        let coeffs = Coefficients::vacuum();
        let one = PhaseField::from_fn(&g, |_, _| 1.0);
        let (t1, _) = apply_tinv(&g, &coeffs, &set, &one, SweepKind::Forward);
        for a in (0..g.n_v()).step_by(5) {
            for s in (0..g.n_spatial()).step_by(37) {
                let x = g.spatial_pos(s);
                let tm = g.domain.ray_exit_from(x, -g.vel.dir(a));
                assert_relative_eq!(t1.get(a, s), tm, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
        // C_+ branch: -tau_+
        let set_full = BoundarySet::build(&g, CPlusSpec::Full);
        let (t2, _) = apply_tinv(&g, &coeffs, &set_full, &one, SweepKind::Forward);
        for a in (0..g.n_v()).step_by(5) {
            for s in (0..g.n_spatial()).step_by(37) {
                let x = g.spatial_pos(s);
                let tp = g.domain.ray_exit_from(x, g.vel.dir(a));
                assert_relative_eq!(t2.get(a, s), -tp, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn tinv_trace_vanishes_on_c() {
        let g = disk_grid(9);
        let set = BoundarySet::build(&g, CPlusSpec::Empty);
        let coeffs = Coefficients::constant_isotropic(0.5, 0.0);
        let f = PhaseField::from_fn(&g, |x, _| 1.0 + x.x);
        let (tf, _) = apply_tinv(&g, &coeffs, &set, &f, SweepKind::Forward);
        let trace = trace_restrict(&tf, |pair| set.in_c[pair]);
        for pair in 0..g.n_boundary_pairs() {
            if set.in_c[pair] {
                assert_eq!(trace.values[pair], 0.0);
            }
        }
    }

    fn pde_residual_rms(n: usize) -> f64 {
        let g = disk_grid(n);
        let set = BoundarySet::build(&g, CPlusSpec::Empty);
        let coeffs = Coefficients::constant_isotropic(0.7, 0.0);
        let f = PhaseField::from_fn(&g, |x, v| (1.0 + 0.3 * x.x - 0.2 * x.y) * (1.0 + 0.1 * v.x));
        let (tf, _) = apply_tinv(&g, &coeffs, &set, &f, SweepKind::Forward);
        let delta = 0.25 * g.d_r;
        let mut acc = 0.0;
        let mut count = 0usize;
        for a in 0..g.n_v() {
            let v = g.vel.dir(a);
            for s in 0..g.n_spatial() {
                let x = g.spatial_pos(s);
                let tm = g.domain.ray_exit_from(x, -v);
                let tp = g.domain.ray_exit_from(x, v);
                if tm < 2.0 * delta || tp < 2.0 * delta {
                    continue;
                }
                let du = (tf.eval_spatial(a, x + v * delta) - tf.eval_spatial(a, x - v * delta))
                    / (2.0 * delta);
                let resid = du + 0.7 * tf.get(a, s) - f.get(a, s);
                acc += resid * resid;
                count += 1;
            }
        }
        (acc / count as f64).sqrt()
    }

    #[test]
    fn transport_identity_residual_decays() {
        // v.grad(T^{-1} f) + sigma T^{-1} f = f at interior nodes; the
        // residual is O(h) and must shrink under refinement.
        let coarse = pde_residual_rms(11);
        let fine = pde_residual_rms(23);
        assert!(fine < 0.05, "rms PDE residual too large: {fine}");
        assert!(
            fine < 0.75 * coarse,
            "residual not decaying: coarse {coarse}, fine {fine}"
        );
    }

    #[test]
    fn line_system_adjointness_exact() {
        let g = disk_grid(9);
        let set = BoundarySet::build(&g, CPlusSpec::RandomLines { seed: 3, cells: 16 });
        let coeffs = Coefficients::new(
            SigmaSpec::Func(Arc::new(|x: Vec2, _| 0.5 + 0.2 * x.y)),
            KernelSpec::Zero,
        );
        let ls = LineSystem::build(&g, &coeffs, &set, 24);
        let f = ls.sample(&g, &crate::grid::FnField(|x: Vec2, v: Vec2| (x.x * 3.0).sin() + v.y));
        let h = ls.sample(&g, &crate::grid::FnField(|x: Vec2, v: Vec2| (x.y * 2.0).cos() - 0.3 * v.x));
        let tf = ls.apply_tinv(&f);
        let th = ls.apply_tinv_adj(&h);
        let lhs = ls.inner(&tf, &h);
        let rhs = ls.inner(&f, &th);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn smallness_zero_kernel_certified() {
        let g = disk_grid(9);
        let c = Coefficients::constant_isotropic(1.0, 0.0);
        let cache = ScatterCache::build(&c, &g);
        let s = smallness_check(&g, &c, &cache, NormP::One).unwrap();
        assert!(s.certified);
        assert_eq!(s.kappa, 0.0);
    }
}

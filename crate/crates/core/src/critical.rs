//! Critical points of `𝒜ᵣ`.
//!
//! Along a critical point every `Hᵢ∘vᵢ` is constant, so for radial `Hᵢ` the
//! components are round circles `√(hᵢ/π)e^{2πi(kᵢt+φᵢ)}` and the problem
//! reduces to the algebraic system `f(h) = 0`, `τfᵢ(h) = kᵢ`. That system is
//! solved by [`solve_reduced`]; [`refine_full`] polishes arbitrary
//! near-critical states directly on the discretized loop space.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{coefficients, displace, grad_norm, gradient, StateTangent};
use crate::geometry::{Plane, ProductSystem};
use crate::loopspace::{average_h, forward, h_trace, inverse, reparametrize, wavenumber, FlowState, Loop, TorusShift};

const REDUCED_MAX_ITER: usize = 100;
const REDUCED_TOL: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalOrbit {
    pub h: Vec<f64>,
    pub tau: f64,
    pub k: Vec<i64>,
    pub phases: Vec<f64>,
    pub action: f64,
    /// Gradient norm of the realization at `N = 256`, worst over `r ∈ {0, 1}`.
    pub residual: f64,
}

impl CriticalOrbit {
    /// `(|f(h)|, max |τfᵢ(h) − kᵢ|, |action + Σkᵢhᵢ|)`.
    pub fn invariant_defects(&self, sys: &ProductSystem) -> (f64, f64, f64) {
        let f = sys.coupling();
        let grad = f.grad(&self.h);
        let closed = self
            .h
            .iter()
            .zip(&grad)
            .zip(&self.k)
            .filter(|((h, _), _)| **h > 0.0)
            .map(|((_, g), k)| (self.tau * g - *k as f64).abs())
            .fold(0.0, f64::max);
        let kh: f64 = self.k.iter().zip(&self.h).map(|(k, h)| *k as f64 * h).sum();
        (f.eval(&self.h).abs(), closed, (self.action + kh).abs())
    }

    pub fn with_phases(mut self, phases: Vec<f64>) -> Self {
        self.phases = phases;
        self
    }
}

fn reduced_residual(sys: &ProductSystem, active: &[usize], k: &[i64], h: &[f64], tau: f64) -> Vec<f64> {
    let f = sys.coupling();
    let g = f.grad(h);
    let mut out = Vec::with_capacity(active.len() + 1);
    out.push(f.eval(h));
    out.extend(active.iter().map(|&i| tau * g[i] - k[i] as f64));
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Newton's method on `{f(h) = 0; τfᵢ(h) = kᵢ for kᵢ ≠ 0}` with `hᵢ = 0`
/// wherever `kᵢ = 0`.
pub fn solve_reduced(sys: &ProductSystem, k: &[i64], h0: &[f64]) -> Result<CriticalOrbit> {
    let m = sys.m();
    if k.len() != m || h0.len() != m {
        return Err(Error::argument(format!(
            "winding vector and initial guess must have length {m}"
        )));
    }
    let active: Vec<usize> = (0..m).filter(|&i| k[i] != 0).collect();
    if active.is_empty() {
        return Err(Error::argument("at least one winding number must be non-zero"));
    }
    if h0.iter().any(|x| !x.is_finite()) {
        return Err(Error::argument("initial guess must be finite"));
    }
    let f = sys.coupling();
    let mut h: Vec<f64> = (0..m).map(|i| if k[i] != 0 { h0[i] } else { 0.0 }).collect();
    let g0 = f.grad(&h);
    let ratios: Vec<f64> = active
        .iter()
        .filter(|&&i| g0[i].abs() > 1e-12)
        .map(|&i| k[i] as f64 / g0[i])
        .collect();
    let mut tau = if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };

    let p = active.len();
    let mut res = reduced_residual(sys, &active, k, &h, tau);
    let mut iterations = 0;
    while max_abs(&res) > REDUCED_TOL {
        if iterations == REDUCED_MAX_ITER {
            return Err(Error::NoConvergence {
                iterations,
                residual: max_abs(&res),
            });
        }
        iterations += 1;
        let g = f.grad(&h);
        let hess = f.hessian(&h);
        let mut jac = DMatrix::<f64>::zeros(p + 1, p + 1);
        for (col, &j) in active.iter().enumerate() {
            jac[(0, col)] = g[j];
            for (row, &i) in active.iter().enumerate() {
                jac[(row + 1, col)] = tau * hess[i * m + j];
            }
        }
        for (row, &i) in active.iter().enumerate() {
            jac[(row + 1, p)] = g[i];
        }
        let svd = jac.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-12 * smax.max(1.0)) {
            return Err(Error::SingularSystem(format!(
                "reduced Jacobian for k = {k:?} has singular values down to {smin:e}"
            )));
        }
        let rhs = -DVector::from_column_slice(&res);
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem(format!("reduced Jacobian for k = {k:?}")))?;
        let current = max_abs(&res);
        let mut alpha = 1.0;
        loop {
            let mut trial_h = h.clone();
            for (col, &j) in active.iter().enumerate() {
                trial_h[j] += alpha * step[col];
            }
            let trial_tau = tau + alpha * step[p];
            let trial = reduced_residual(sys, &active, k, &trial_h, trial_tau);
            if max_abs(&trial) < current || alpha < 1e-6 {
                h = trial_h;
                tau = trial_tau;
                res = trial;
                break;
            }
            alpha *= 0.5;
        }
    }

    if let Some(i) = h.iter().position(|x| *x < -1e-12) {
        return Err(Error::InfeasibleBranch(format!(
            "k = {k:?} converges to h = {h:?} with h_{} < 0",
            i + 1
        )));
    }
    for x in h.iter_mut() {
        *x = x.max(0.0);
    }
    for (i, fac) in sys.factors().iter().enumerate() {
        if let Some(r0) = fac.cutoff_radius {
            let rho = (h[i] / PI).sqrt();
            if rho > r0 {
                return Err(Error::InfeasibleBranch(format!(
                    "circle in factor {} has radius {rho} beyond the cutoff radius {r0}",
                    i + 1
                )));
            }
        }
    }
    let action = -k.iter().zip(&h).map(|(k, h)| *k as f64 * h).sum::<f64>();
    let mut orbit = CriticalOrbit {
        h,
        tau,
        k: k.to_vec(),
        phases: vec![0.0; m],
        action,
        residual: 0.0,
    };
    orbit.residual = [0.0, 1.0]
        .iter()
        .map(|&r| realize_loop(sys, &orbit, 256, r).map(|st| grad_norm(sys, &st)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(orbit)
}

/// Samples `vᵢ(t) = √(hᵢ/π)·e^{2πi(kᵢt + φᵢ)}` at `n` points.
pub fn realize_loop(sys: &ProductSystem, orbit: &CriticalOrbit, n: usize, r: f64) -> Result<FlowState> {
    let m = sys.m();
    if orbit.h.len() != m || orbit.k.len() != m || orbit.phases.len() != m {
        return Err(Error::argument(format!("orbit data must have length {m}")));
    }
    let curve = Loop::from_fn(m, n, |i, t| {
        let rho = (orbit.h[i].max(0.0) / PI).sqrt();
        Plane::from_polar(rho, 2.0 * PI * (orbit.k[i] as f64 * t + orbit.phases[i]))
    })?;
    FlowState::new(curve, orbit.tau, r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub max_newton: usize,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_newton: 60,
            gmres_restart: 60,
            gmres_max_iter: 360,
        }
    }
}

fn state_norm(state: &FlowState) -> f64 {
    (state.curve.l2_norm().powi(2) + state.tau * state.tau).sqrt()
}

/// Central-difference Hessian-vector product of `𝒜ᵣ`.
fn hessian_apply(sys: &ProductSystem, state: &FlowState, dir: &StateTangent) -> StateTangent {
    let dn = dir.norm();
    if dn == 0.0 {
        return dir.clone();
    }
    let eps = 1e-6 * (1.0 + state_norm(state)) / dn;
    let mut plus = gradient(sys, &displace(state, eps, dir));
    let minus = gradient(sys, &displace(state, -eps, dir));
    plus.add_scaled(-1.0, &minus);
    plus.scaled(0.5 / eps)
}

/// Diagonal Fourier preconditioner: on plane `i`, mode `k` the Hessian acts
/// approximately by `−2πk + τ·mean(cᵢ H'ᵢ/ρ)`.
struct Preconditioner {
    diag: Vec<Vec<f64>>,
}

impl Preconditioner {
    fn new(sys: &ProductSystem, state: &FlowState) -> Self {
        let v = &state.curve;
        let n = v.n_samples();
        let trace = h_trace(sys, v);
        let hbar = average_h(sys, v);
        let coeffs = coefficients(sys, state.r, &trace, &hbar);
        let diag = (0..sys.m())
            .map(|i| {
                let fac = sys.factor(i);
                let shift = state.tau
                    * v.component(i)
                        .iter()
                        .zip(&coeffs)
                        .map(|(z, c)| c[i] * fac.angular_rate(z.norm()))
                        .sum::<f64>()
                    / n as f64;
                (0..n)
                    .map(|j| {
                        let k = if j == n / 2 { 0 } else { wavenumber(j, n) };
                        let d = -2.0 * PI * k as f64 + shift;
                        if d.abs() < 1.0 {
                            if d < 0.0 {
                                -1.0
                            } else {
                                1.0
                            }
                        } else {
                            d
                        }
                    })
                    .collect()
            })
            .collect();
        Preconditioner { diag }
    }

    fn apply(&self, u: &StateTangent) -> StateTangent {
        let mut out = u.clone();
        for (i, d) in self.diag.iter().enumerate() {
            let mut hat = forward(u.curve.component(i));
            for (z, dk) in hat.iter_mut().zip(d) {
                *z /= *dk;
            }
            out.curve.component_mut(i).copy_from_slice(&inverse(&hat));
        }
        out
    }
}

/// Right-preconditioned restarted GMRES for `A x = b` with `x₀ = 0`.
fn gmres(
    apply: impl Fn(&StateTangent) -> StateTangent,
    precond: impl Fn(&StateTangent) -> StateTangent,
    b: &StateTangent,
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> StateTangent {
    let bnorm = b.norm();
    let mut x = b.scaled(0.0);
    if bnorm == 0.0 {
        return x;
    }
    let mut total = 0;
    loop {
        let mut r = b.clone();
        if total > 0 {
            r.add_scaled(-1.0, &apply(&x));
        }
        let beta = r.norm();
        if beta <= rtol * bnorm || total >= max_iter {
            return x;
        }
        let mut basis = vec![r.scaled(1.0 / beta)];
        let mut zs: Vec<StateTangent> = Vec::new();
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<f64> = Vec::new();
        let mut sn: Vec<f64> = Vec::new();
        let mut g = vec![beta];
        for j in 0..restart {
            let z = precond(&basis[j]);
            let mut w = apply(&z);
            total += 1;
            let mut col = vec![0.0; j + 2];
            for (i, q) in basis.iter().enumerate() {
                col[i] = w.pairing(q);
                w.add_scaled(-col[i], q);
            }
            let wn = w.norm();
            col[j + 1] = wn;
            for i in 0..j {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let rho = col[j].hypot(col[j + 1]);
            let (c, s) = if rho == 0.0 {
                (1.0, 0.0)
            } else {
                (col[j] / rho, col[j + 1] / rho)
            };
            col[j] = rho;
            col[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g.push(-s * g[j]);
            g[j] *= c;
            hess.push(col);
            zs.push(z);
            let done = g[j + 1].abs() <= rtol * bnorm || total >= max_iter || wn <= 1e-14 * beta;
            if done || j + 1 == restart {
                break;
            }
            basis.push(w.scaled(1.0 / wn));
        }
        let k = zs.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for l in i + 1..k {
                acc -= hess[l][i] * y[l];
            }
            y[i] = if hess[i][i] != 0.0 { acc / hess[i][i] } else { 0.0 };
        }
        for (yi, z) in y.iter().zip(&zs) {
            x.add_scaled(*yi, z);
        }
        if g[k].abs() <= rtol * bnorm || total >= max_iter {
            return x;
        }
    }
}

/// Polishes a near-critical state until `‖∇𝒜ᵣ‖ ≤ tol`.
///
/// Inexact Newton on `∇𝒜ᵣ = 0` (GMRES on finite-difference Hessian products)
/// with backtracking on `‖∇𝒜ᵣ‖`; when no Newton step reduces the residual a
/// steepest-descent step on `½‖∇𝒜ᵣ‖²` is tried instead. The action is not
/// monotone along the iteration: critical points are saddles.
pub fn refine_full(sys: &ProductSystem, state: &FlowState, tol: f64) -> Result<FlowState> {
    refine_full_with(sys, state, tol, &RefineConfig::default())
}

pub fn refine_full_with(sys: &ProductSystem, state: &FlowState, tol: f64, cfg: &RefineConfig) -> Result<FlowState> {
    if !(tol > 0.0) {
        return Err(Error::argument(format!("tolerance must be positive, got {tol}")));
    }
    let mut current = state.clone();
    let mut g = gradient(sys, &current);
    let mut gn = g.norm();
    if !gn.is_finite() {
        return Err(Error::argument("gradient norm of the starting state is not finite"));
    }
    for iteration in 0..=cfg.max_newton {
        if gn <= tol {
            return Ok(current);
        }
        if iteration == cfg.max_newton {
            break;
        }
        let pc = Preconditioner::new(sys, &current);
        let rhs = g.scaled(-1.0);
        let eta = (0.5 * gn.sqrt()).min(1e-2);
        let step = gmres(
            |d| hessian_apply(sys, &current, d),
            |u| pc.apply(u),
            &rhs,
            eta,
            cfg.gmres_restart,
            cfg.gmres_max_iter,
        );
        let mut accepted = line_search(sys, &current, &step, gn, 1.0, 12);
        if accepted.is_none() {
            let hg = hessian_apply(sys, &current, &g);
            let denom = hg.pairing(&hg);
            if denom > 0.0 {
                accepted = line_search(sys, &current, &hg.scaled(-1.0), gn, gn * gn / denom, 40);
            }
        }
        match accepted {
            Some((next, next_g)) => {
                current = next;
                gn = next_g.norm();
                g = next_g;
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations: iteration,
                    residual: gn,
                })
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_newton,
        residual: gn,
    })
}

fn line_search(
    sys: &ProductSystem,
    state: &FlowState,
    dir: &StateTangent,
    gn: f64,
    alpha0: f64,
    halvings: usize,
) -> Option<(FlowState, StateTangent)> {
    let mut alpha = alpha0;
    for _ in 0..=halvings {
        let trial = displace(state, alpha, dir);
        if trial.curve.is_finite() && trial.tau.is_finite() {
            let tg = gradient(sys, &trial);
            if tg.norm() < (1.0 - 1e-4 * alpha.min(1.0)) * gn {
                return Some((trial, tg));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// `Σ_k Re(conj(â_k) b̂_k e^{2πiks})` and its first two derivatives in `s`:
/// the correlation of `a` with `b(· + s)`.
fn correlation(a_hat: &[Complex64], b_hat: &[Complex64], s: f64) -> (f64, f64, f64) {
    let n = a_hat.len();
    a_hat
        .iter()
        .zip(b_hat)
        .enumerate()
        .fold((0.0, 0.0, 0.0), |(c0, c1, c2), (j, (x, y))| {
            let w = 2.0 * PI * wavenumber(j, n) as f64;
            let t = x.conj() * y * Complex64::from_polar(1.0, w * s);
            (c0 + t.re, c1 - w * t.im, c2 - w * w * t.re)
        })
}

/// Torus shift `s` minimizing `‖s_*candidate − reference‖`, found per
/// component from the cross-correlation on the sample grid and polished by
/// Newton's method on its derivative, together with that distance.
pub fn align_torus(reference: &Loop, candidate: &Loop) -> Result<(TorusShift, f64)> {
    if !reference.same_shape(candidate) {
        return Err(Error::argument("loops to align must have the same shape"));
    }
    let n = reference.n_samples();
    let a_hat = reference.fourier();
    let b_hat = candidate.fourier();
    let shifts: Vec<f64> = a_hat
        .iter()
        .zip(&b_hat)
        .map(|(a, b)| {
            let prod: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
            let grid = inverse(&prod);
            let best = (0..n).fold(0, |best, j| if grid[j].re > grid[best].re { j } else { best });
            let start = best as f64 / n as f64;
            let mut s = start;
            for _ in 0..50 {
                let (_, d1, d2) = correlation(a, b, s);
                if !(d2 < 0.0) {
                    break;
                }
                let step = (-d1 / d2).clamp(-0.5 / n as f64, 0.5 / n as f64);
                s += step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            if correlation(a, b, s).0 >= correlation(a, b, start).0 {
                s
            } else {
                start
            }
        })
        .collect();
    let shift = TorusShift::new(shifts);
    let mut moved = reparametrize(candidate, &shift)?;
    moved.add_scaled(-1.0, reference);
    Ok((shift, moved.l2_norm()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyFlag {
    /// An isolated circle orbit (isolated up to phase).
    Isolated,
    /// A single-factor orbit that is also a vertex of a mixed family.
    FamilyEndpoint,
    /// A mixed family: `h` ranges over a face of `{f(h) = 0, h ≥ 0}` at fixed
    /// frequencies.
    Family,
    /// Constant loops at the origin, critical for every `τ` when `f(0) = 0`.
    Degenerate,
}

impl FamilyFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyFlag::Isolated => "isolated",
            FamilyFlag::FamilyEndpoint => "family_endpoint",
            FamilyFlag::Family => "family",
            FamilyFlag::Degenerate => "degenerate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub k: Vec<i64>,
    pub tau: f64,
    pub action: f64,
    pub flag: FamilyFlag,
    /// A representative level vector (the barycentre for families).
    pub h: Vec<f64>,
    /// Vertices of the family in `h`-space; empty for isolated orbits.
    pub endpoints: Vec<Vec<f64>>,
}

impl SpectrumEntry {
    /// The representative orbit with zero phases.
    pub fn orbit(&self) -> CriticalOrbit {
        CriticalOrbit {
            h: self.h.clone(),
            tau: self.tau,
            k: self.k.clone(),
            phases: vec![0.0; self.k.len()],
            action: self.action,
            residual: 0.0,
        }
    }
}

/// Closed-form spectrum of `f = Σ xᵢ/aᵢ − 1` with winding numbers bounded
/// by `k_max` in absolute value.
pub fn ellipsoid_spectrum(a: &[f64], k_max: u32) -> Result<Vec<SpectrumEntry>> {
    if a.is_empty() || a.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::argument("ellipsoid axes must be positive"));
    }
    let m = a.len();
    let k_max = k_max as i64;
    let tol = 1e-9;
    let mut entries = Vec::new();
    let mut taus: Vec<f64> = Vec::new();
    for (i, ai) in a.iter().enumerate() {
        for n in (-k_max..=k_max).filter(|n| *n != 0) {
            let tau = n as f64 * ai;
            let mut k = vec![0i64; m];
            k[i] = n;
            let mut h = vec![0.0; m];
            h[i] = *ai;
            entries.push(SpectrumEntry {
                k,
                tau,
                action: -tau,
                flag: FamilyFlag::Isolated,
                h,
                endpoints: Vec::new(),
            });
            if !taus.iter().any(|t| (t - tau).abs() <= tol * tau.abs()) {
                taus.push(tau);
            }
        }
    }
    // the k for factor j at frequency τ, if τ/aⱼ is an admissible integer
    let winding = |tau: f64, j: usize| -> Option<i64> {
        let q = tau / a[j];
        let n = q.round();
        ((q - n).abs() <= tol * q.abs().max(1.0) && n != 0.0 && n.abs() <= k_max as f64).then_some(n as i64)
    };
    for &tau in &taus {
        let members: Vec<usize> = (0..m).filter(|&j| winding(tau, j).is_some()).collect();
        if members.len() < 2 {
            continue;
        }
        let mut k = vec![0i64; m];
        for &j in &members {
            k[j] = winding(tau, j).unwrap();
        }
        let endpoints: Vec<Vec<f64>> = members
            .iter()
            .map(|&j| {
                let mut h = vec![0.0; m];
                h[j] = a[j];
                h
            })
            .collect();
        let h: Vec<f64> = (0..m)
            .map(|j| endpoints.iter().map(|e| e[j]).sum::<f64>() / endpoints.len() as f64)
            .collect();
        for e in entries.iter_mut() {
            if (e.tau - tau).abs() <= tol * tau.abs() && e.flag == FamilyFlag::Isolated {
                e.flag = FamilyFlag::FamilyEndpoint;
            }
        }
        entries.push(SpectrumEntry {
            k,
            tau,
            action: -tau,
            flag: FamilyFlag::Family,
            h,
            endpoints,
        });
    }
    entries.sort_by(|x, y| x.tau.total_cmp(&y.tau).then_with(|| x.k.cmp(&y.k)));
    Ok(entries)
}

/// The constant-loop family at the origin, present exactly when `f(0) = 0`.
pub fn constant_family(sys: &ProductSystem) -> Option<SpectrumEntry> {
    let m = sys.m();
    (sys.coupling().eval(&vec![0.0; m]).abs() <= 1e-12).then(|| SpectrumEntry {
        k: vec![0; m],
        tau: 0.0,
        action: 0.0,
        flag: FamilyFlag::Degenerate,
        h: vec![0.0; m],
        endpoints: Vec::new(),
    })
}

/// Columns `k_1..k_m, tau, action, family_flag`.
pub fn write_spectrum_csv<W: Write>(m: usize, entries: &[SpectrumEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=m).map(|i| format!("k_{i}")).collect();
    header.extend(["tau", "action", "family_flag"].map(String::from));
    w.write_record(&header)?;
    for e in entries {
        let mut row: Vec<String> = e.k.iter().map(|k| k.to_string()).collect();
        row.push(e.tau.to_string());
        row.push(e.action.to_string());
        row.push(e.flag.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{action, random_direction};
    use crate::geometry::{Coupling, Factor};
    use crate::loopspace::{area, random_loop};
    use proptest::prelude::*;

    fn ellipsoid() -> ProductSystem {
        ProductSystem::uncut(2, Coupling::ellipsoid(&[1.0, 2.0])).unwrap()
    }

    fn pairwise() -> ProductSystem {
        ProductSystem::uncut(
            2,
            Coupling::pairwise(vec![1.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], -1.0),
        )
        .unwrap()
    }

    fn r_grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    }

    #[test]
    fn ellipsoid_reduced_orbit() {
        let sys = ellipsoid();
        let o = solve_reduced(&sys, &[1, 0], &[0.5, 0.5]).unwrap();
        assert!((o.h[0] - 1.0).abs() < 1e-12 && o.h[1] == 0.0);
        assert!((o.tau - 1.0).abs() < 1e-12);
        assert!((o.action + 1.0).abs() < 1e-12);
        assert!(o.residual < 1e-9);
    }

    #[test]
    fn nonlinear_reduced_orbit() {
        let sys = pairwise();
        let o = solve_reduced(&sys, &[1, 1], &[0.3, 0.6]).unwrap();
        let h = 2f64.sqrt() - 1.0;
        assert!((o.h[0] - h).abs() < 1e-12 && (o.h[1] - h).abs() < 1e-12);
        assert!((o.tau - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((o.action + 2.0 * h).abs() < 1e-12);
        let (a, b, c) = o.invariant_defects(&sys);
        assert!(a < 1e-10 && b < 1e-10 && c < 1e-10);
    }

    #[test]
    fn negative_windings_reverse_the_orbit() {
        let sys = pairwise();
        let o = solve_reduced(&sys, &[-1, -1], &[0.3, 0.3]).unwrap();
        assert!((o.tau + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((o.action - 2.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!(o.residual < 1e-9);
    }

    #[test]
    fn incommensurable_frequencies_are_rejected() {
        let sys = ProductSystem::uncut(2, Coupling::linear(vec![1.0, 2f64.sqrt()], -1.0)).unwrap();
        match solve_reduced(&sys, &[1, 1], &[0.5, 0.5]) {
            Err(Error::SingularSystem(_)) | Err(Error::NoConvergence { .. }) => {}
            other => panic!("expected a solver failure, got {other:?}"),
        }
    }

    #[test]
    fn reduced_solver_reports_bad_branches() {
        // f = x₁ − x₂ + 1 with k = (1, −1): a whole line of solutions
        let sys = ProductSystem::uncut(2, Coupling::linear(vec![1.0, -1.0], 1.0)).unwrap();
        assert!(matches!(
            solve_reduced(&sys, &[1, -1], &[0.5, 0.5]),
            Err(Error::SingularSystem(_))
        ));
        // x + 1 = 0 forces h = −1
        let sys = ProductSystem::uncut(1, Coupling::linear(vec![1.0], 1.0)).unwrap();
        assert!(matches!(
            solve_reduced(&sys, &[1], &[0.5]),
            Err(Error::InfeasibleBranch(_))
        ));
        let sys = ProductSystem::new(vec![Factor::with_cutoff(0.2)], Coupling::linear(vec![1.0], -1.0)).unwrap();
        assert!(matches!(
            solve_reduced(&sys, &[1], &[0.5]),
            Err(Error::InfeasibleBranch(_))
        ));
        let sys = ellipsoid();
        assert!(solve_reduced(&sys, &[0, 0], &[0.5, 0.5]).is_err());
        assert!(solve_reduced(&sys, &[1], &[0.5]).is_err());
    }

    #[test]
    fn realized_orbits_are_critical_for_every_r() {
        for (sys, k, h0, expected) in [
            (ellipsoid(), [1, 0], [1.0, 0.0], -1.0),
            (pairwise(), [1, 1], [0.4, 0.4], -2.0 * (2f64.sqrt() - 1.0)),
        ] {
            let o = solve_reduced(&sys, &k, &h0).unwrap().with_phases(vec![0.13, 0.71]);
            for r in r_grid() {
                let st = realize_loop(&sys, &o, 256, r).unwrap();
                assert!(grad_norm(&sys, &st) <= 1e-9, "r = {r}");
                assert!((action(&sys, &st) - expected).abs() <= 1e-10);
                assert!((action(&sys, &st) + area(&st.curve)).abs() <= 1e-9);
                for (i, hi) in o.h.iter().enumerate() {
                    for h in h_trace(&sys, &st.curve) {
                        assert!((h[i] - hi).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_orbit_at_origin() {
        let sys = ProductSystem::uncut(
            2,
            Coupling::pairwise(vec![1.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.0),
        )
        .unwrap();
        let family = constant_family(&sys).unwrap();
        assert_eq!(family.flag, FamilyFlag::Degenerate);
        let mut o = family.orbit();
        for tau in [-3.0, 0.0, 2.5] {
            o.tau = tau;
            let st = realize_loop(&sys, &o, 32, 0.4).unwrap();
            assert_eq!(grad_norm(&sys, &st), 0.0);
        }
        assert!(constant_family(&ellipsoid()).is_none());
    }

    #[test]
    fn shifted_orbits_stay_critical() {
        let sys = pairwise();
        let o = solve_reduced(&sys, &[1, 1], &[0.4, 0.4]).unwrap();
        let st = realize_loop(&sys, &o, 256, 1.0).unwrap();
        let base = grad_norm(&sys, &st);
        let moved = FlowState {
            curve: reparametrize(&st.curve, &TorusShift::new(vec![0.3, 0.05])).unwrap(),
            ..st.clone()
        };
        assert!(grad_norm(&sys, &moved) <= base + 1e-12);
        for r in [0.0, 0.5] {
            let st = st.with_r(r).unwrap();
            let moved = FlowState {
                curve: reparametrize(&st.curve, &TorusShift::diagonal(0.37, 2)).unwrap(),
                ..st.clone()
            };
            assert!(grad_norm(&sys, &moved) <= 1e-9);
        }
    }

    #[test]
    fn refine_returns_converged_input_unchanged() {
        let sys = ellipsoid();
        let o = solve_reduced(&sys, &[1, 0], &[1.0, 0.0]).unwrap();
        let st = realize_loop(&sys, &o, 128, 0.5).unwrap();
        assert_eq!(refine_full(&sys, &st, 1e-8).unwrap(), st);
        assert!(refine_full(&sys, &st, 0.0).is_err());
    }

    #[test]
    fn refine_recovers_perturbed_orbits() {
        for (sys, k, expected) in [
            (ellipsoid(), [1, 0], -1.0),
            (pairwise(), [1, 1], -2.0 * (2f64.sqrt() - 1.0)),
        ] {
            let o = solve_reduced(&sys, &k, &[0.5, 0.5]).unwrap();
            for r in [0.0, 0.5, 1.0] {
                let st = realize_loop(&sys, &o, 256, r).unwrap();
                let dir = random_direction(&sys, &st, 17).unwrap();
                let start = displace(&st, 1e-3 / dir.norm(), &dir);
                let refined = refine_full(&sys, &start, 1e-10).unwrap();
                assert!(grad_norm(&sys, &refined) <= 1e-10);
                assert!((action(&sys, &refined) - expected).abs() <= 1e-7, "r = {r}");
                for (i, hi) in o.h.iter().enumerate() {
                    let trace: Vec<f64> = h_trace(&sys, &refined.curve).iter().map(|h| h[i]).collect();
                    let mean = trace.iter().sum::<f64>() / trace.len() as f64;
                    let sd = (trace.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / trace.len() as f64).sqrt();
                    assert!(sd <= 1e-9, "sd {sd}");
                    assert!((mean - hi).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn refine_far_from_critical_fails_cleanly() {
        let sys = pairwise();
        let v = random_loop(&sys, 64, 3, 2.0, 2.0).unwrap();
        let st = FlowState::new(v, 7.0, 0.5).unwrap();
        let cfg = RefineConfig {
            max_newton: 5,
            ..Default::default()
        };
        match refine_full_with(&sys, &st, 1e-12, &cfg) {
            Ok(s) => assert!(grad_norm(&sys, &s) <= 1e-12),
            Err(Error::NoConvergence { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn gmres_solves_a_diagonal_system() {
        let sys = pairwise();
        let v = random_loop(&sys, 32, 1, 2.0, 1.0).unwrap();
        let b = StateTangent { curve: v, tau: 0.5 };
        let apply = |x: &StateTangent| {
            let mut y = x.clone();
            for i in 0..2 {
                for (j, z) in y.curve.component_mut(i).iter_mut().enumerate() {
                    *z *= 1.0 + j as f64 + i as f64;
                }
            }
            y.tau *= 3.0;
            y
        };
        let x = gmres(apply, |u| u.clone(), &b, 1e-12, 20, 200);
        let mut res = apply(&x);
        res.add_scaled(-1.0, &b);
        assert!(res.norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn spectrum_of_the_one_two_ellipsoid() {
        let spec = ellipsoid_spectrum(&[1.0, 2.0], 2).unwrap();
        let find = |k: [i64; 2]| {
            spec.iter()
                .find(|e| e.k == k)
                .unwrap_or_else(|| panic!("{k:?} missing"))
        };
        let e = find([1, 0]);
        assert_eq!((e.tau, e.action, e.flag), (1.0, -1.0, FamilyFlag::Isolated));
        let e = find([2, 0]);
        assert_eq!((e.tau, e.action, e.flag), (2.0, -2.0, FamilyFlag::FamilyEndpoint));
        let e = find([0, 1]);
        assert_eq!((e.tau, e.action, e.flag), (2.0, -2.0, FamilyFlag::FamilyEndpoint));
        let e = find([2, 1]);
        assert_eq!((e.tau, e.action, e.flag), (2.0, -2.0, FamilyFlag::Family));
        assert_eq!(e.endpoints, vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let e = find([-2, -1]);
        assert_eq!(e.flag, FamilyFlag::Family);
        assert_eq!(spec.len(), 4 + 4 + 2);
        assert!(ellipsoid_spectrum(&[1.0, 2.0], 0).unwrap().is_empty());
        assert!(ellipsoid_spectrum(&[1.0, -2.0], 2).is_err());
    }

    #[test]
    fn hopf_family_on_the_round_sphere() {
        let spec = ellipsoid_spectrum(&[1.0, 1.0], 1).unwrap();
        let fam: Vec<_> = spec.iter().filter(|e| e.flag == FamilyFlag::Family).collect();
        assert_eq!(fam.len(), 2);
        let pos = fam.iter().find(|e| e.tau > 0.0).unwrap();
        assert_eq!((pos.k.clone(), pos.tau, pos.action), (vec![1, 1], 1.0, -1.0));
        // every point of the family is critical
        let sys = ProductSystem::uncut(2, Coupling::ellipsoid(&[1.0, 1.0])).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let mut o = pos.orbit();
            o.h = vec![t, 1.0 - t];
            let st = realize_loop(&sys, &o, 128, 0.5).unwrap();
            assert!(grad_norm(&sys, &st) < 1e-10);
            assert!((action(&sys, &st) + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_entries_are_critical() {
        let spec = ellipsoid_spectrum(&[1.0, 2.0], 3).unwrap();
        let sys = ellipsoid();
        for e in &spec {
            let st = realize_loop(&sys, &e.orbit(), 128, 0.3).unwrap();
            assert!(grad_norm(&sys, &st) < 1e-9, "{e:?}");
            assert!((action(&sys, &st) - e.action).abs() < 1e-10);
        }
    }

    #[test]
    fn spectrum_csv_layout() {
        let spec = ellipsoid_spectrum(&[1.0, 2.0], 1).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(2, &spec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k_1,k_2,tau,action,family_flag\n"));
        assert!(text.contains("\n1,0,1,-1,isolated\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn alignment_recovers_shifts(seed in 0u64..1000, s0 in 0.0f64..1.0, s1 in 0.0f64..1.0) {
            let sys = pairwise();
            let v = crate::loopspace::tests::band_limited(&random_loop(&sys, 64, seed, 3.0, 1.0).unwrap());
            let w = reparametrize(&v, &TorusShift::new(vec![s0, s1])).unwrap();
            let (shift, dist) = align_torus(&v, &w).unwrap();
            prop_assert!(dist < 1e-9, "distance {dist}, shift {shift:?}");
        }

        #[test]
        fn realized_action_is_minus_area(p0 in 0.0f64..1.0, p1 in 0.0f64..1.0, r in 0.0f64..=1.0) {
            let sys = pairwise();
            let o = solve_reduced(&sys, &[1, 1], &[0.4, 0.4]).unwrap().with_phases(vec![p0, p1]);
            let st = realize_loop(&sys, &o, 128, r).unwrap();
            prop_assert!((action(&sys, &st) + area(&st.curve)).abs() < 1e-9);
            prop_assert!((action(&sys, &st) - o.action).abs() < 1e-10);
        }
    }
}

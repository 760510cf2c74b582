//! Executable checks: torus (non-)invariance of the actions, independence of
//! the critical set from `r`, the gradient-bound implication
//! `‖∇𝒜ᵣ‖ ≤ 1/c ⟹ |τ| ≤ c(|𝒜ᵣ| + 1)` together with its intermediate
//! inequalities, and a finite-difference gradient sweep.
//!
//! All constants live on the compact region `K = {|zᵢ| ≤ R for every i}`
//! and every sampled loop is required to lie in `K`. Sample evaluation runs
//! on the rayon pool; results are merged in sample order so reports do not
//! depend on scheduling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical::{align_torus, realize_loop, refine_full, CriticalOrbit};
use crate::error::{Error, Result};
use crate::flow::{flow_run, FlowConfig, Scheme};
use crate::functionals::{
    action, action_and_gradient, directional_derivative_fd, displace, gradient, random_direction, StateTangent,
};
use crate::geometry::{Plane, ProductSystem};
use crate::loopspace::{
    h_trace, oscillation_of_trace, random_loop, reparametrize, FlowState, Loop, LoopDocument, TorusShift,
};

/// Violations kept with full reproduction data; further ones are only counted.
pub const MAX_BUNDLES: usize = 100;

/// Runs `f` on a dedicated pool with `threads` workers (all cores when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::argument("thread count must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::argument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub kappa: f64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "L_bound")]
    pub l_bound: f64,
    #[serde(rename = "C_bound")]
    pub c_bound: f64,
    pub c: f64,
    pub m: usize,
    pub region_radius: f64,
    pub grid_resolution: usize,
}

impl LemmaConstants {
    /// `max{C√m/δ, 3/(2ε), 6/κ, 4εL/κ}`.
    pub fn assemble(kappa: f64, epsilon: f64, delta: f64, l_bound: f64, c_bound: f64, m: usize) -> f64 {
        let sm = (m as f64).sqrt();
        [
            c_bound * sm / delta,
            1.5 / epsilon,
            6.0 / kappa,
            4.0 * epsilon * l_bound / kappa,
        ]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kappa: f64,
        epsilon: f64,
        delta: f64,
        l_bound: f64,
        c_bound: f64,
        m: usize,
        region_radius: f64,
        grid_resolution: usize,
    ) -> Result<Self> {
        let all_positive = [kappa, epsilon, delta, l_bound, c_bound, region_radius]
            .iter()
            .all(|x| *x > 0.0 && x.is_finite());
        if !all_positive || m == 0 {
            return Err(Error::argument("lemma constants must be positive"));
        }
        if epsilon > kappa / 4.0 {
            return Err(Error::argument(format!(
                "epsilon = {epsilon} exceeds kappa/4 = {}",
                kappa / 4.0
            )));
        }
        Ok(LemmaConstants {
            kappa,
            epsilon,
            delta,
            l_bound,
            c_bound,
            c: Self::assemble(kappa, epsilon, delta, l_bound, c_bound, m),
            m,
            region_radius,
            grid_resolution,
        })
    }
}

const MAX_GRID_POINTS: usize = 4_000_000;

/// Points of the radial grid `{0, R/(n−1), …, R}ᵐ` as per-factor radii.
fn radial_grid(m: usize, radius: f64, resolution: usize) -> Result<Vec<Vec<f64>>> {
    if resolution < 2 {
        return Err(Error::argument("grid resolution must be at least 2"));
    }
    let total = (0..m).try_fold(1usize, |acc, _| acc.checked_mul(resolution));
    let total = match total {
        Some(t) if t <= MAX_GRID_POINTS => t,
        _ => {
            return Err(Error::argument(format!(
                "radial grid with {resolution}^{m} points is too large"
            )))
        }
    };
    let step = radius / (resolution - 1) as f64;
    Ok((0..total)
        .map(|mut idx| {
            (0..m)
                .map(|_| {
                    let j = idx % resolution;
                    idx /= resolution;
                    j as f64 * step
                })
                .collect()
        })
        .collect())
}

fn radial_point(radii: &[f64]) -> Vec<Plane> {
    radii.iter().map(|r| Plane::new(*r, 0.0)).collect()
}

/// Band points `|H_f| ≤ ε` of the grid and the minimum of `λ(X_{H_f})` there.
fn band_minimum(sys: &ProductSystem, grid: &[Vec<f64>], epsilon: f64) -> (Vec<usize>, f64, usize) {
    let mut band = Vec::new();
    let mut kappa = f64::INFINITY;
    let mut arg = 0;
    for (idx, radii) in grid.iter().enumerate() {
        let z = radial_point(radii);
        if sys.h_f(&z).abs() <= epsilon {
            band.push(idx);
            let lam = sys.liouville_of_x_hf(&z);
            if lam < kappa {
                kappa = lam;
                arg = idx;
            }
        }
    }
    (band, kappa, arg)
}

fn clip_to_box(h: &mut [f64], upper: &[f64]) {
    for (x, u) in h.iter_mut().zip(upper) {
        *x = x.clamp(0.0, *u);
    }
}

/// Unit directions used to probe `δ`: coordinate axes, `±∇f(h)` and a few
/// random ones.
fn probe_directions(sys: &ProductSystem, h: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = h.len();
    let mut dirs = Vec::with_capacity(2 * m + 6);
    for i in 0..m {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; m];
            e[i] = s;
            dirs.push(e);
        }
    }
    let g = sys.coupling().grad(h);
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if gn > 0.0 {
        dirs.push(g.iter().map(|x| x / gn).collect());
        dirs.push(g.iter().map(|x| -x / gn).collect());
    }
    for _ in 0..4 {
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un > 1e-3 {
            dirs.push(u.iter().map(|x| x / un).collect());
        }
    }
    dirs
}

fn add_scaled(h: &[f64], s: f64, u: &[f64]) -> Vec<f64> {
    h.iter().zip(u).map(|(a, b)| a + s * b).collect()
}

/// Estimates the constants of the gradient-bound implication on
/// `K = {|zᵢ| ≤ region_radius}` by sampling a radial grid.
pub fn estimate_constants(
    sys: &ProductSystem,
    region_radius: f64,
    grid_resolution: usize,
    epsilon_choice: f64,
) -> Result<LemmaConstants> {
    if !(region_radius > 0.0 && region_radius.is_finite()) {
        return Err(Error::argument("region radius must be positive"));
    }
    if !(epsilon_choice > 0.0 && epsilon_choice.is_finite()) {
        return Err(Error::argument("epsilon must be positive"));
    }
    let m = sys.m();
    let grid = radial_grid(m, region_radius, grid_resolution)?;

    // Shrink ε until the band avoids points where λ(X_H_f) ≤ 0 and ε ≤ κ/4.
    // A genuine transversality failure on Σ survives every shrinking and is
    // reported once the band runs out of grid points.
    let mut epsilon = epsilon_choice;
    let mut witness: Option<(Vec<f64>, f64)> = None;
    let (band, kappa) = loop {
        let (band, kappa, arg) = band_minimum(sys, &grid, epsilon);
        if band.is_empty() {
            return Err(match witness {
                Some((point, value)) => Error::HypothesisViolation {
                    message: format!("λ(X_H_f) = {value} ≤ 0 near the hypersurface f∘H = 0"),
                    witness: point,
                },
                None => Error::argument(format!("no grid point of the region satisfies |H_f| ≤ {epsilon}")),
            });
        }
        if kappa > 0.0 && epsilon <= kappa / 4.0 {
            break (band, kappa);
        }
        if kappa > 0.0 {
            epsilon = kappa / 4.0;
        } else {
            witness = Some((grid[arg].clone(), kappa));
            epsilon *= 0.5;
        }
    };
    if let Some(&idx) = band.iter().find(|&&idx| grid[idx].iter().any(|r| *r >= region_radius)) {
        return Err(Error::argument(format!(
            "the band |H_f| ≤ {epsilon} reaches the boundary of the region at radii {:?}",
            grid[idx]
        )));
    }

    let l_bound = (m as f64).sqrt() * region_radius / 2.0;
    let c_bound = sys
        .factors()
        .iter()
        .map(|f| f.max_differential(region_radius))
        .fold(0.0, f64::max);

    let upper: Vec<f64> = sys.factors().iter().map(|f| f.profile(region_radius).0).collect();
    let f = sys.coupling();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_de17a);
    let anchors: Vec<Vec<f64>> = (0..2000)
        .map(|_| upper.iter().map(|u| rng.random_range(0.0..=*u)).collect())
        .collect();
    let anchor_dirs: Vec<Vec<Vec<f64>>> = anchors.iter().map(|h| probe_directions(sys, h, &mut rng)).collect();
    let mut delta = upper.iter().map(|u| u * u).sum::<f64>().sqrt();
    let continuity = |delta: f64| {
        anchors.iter().zip(&anchor_dirs).all(|(h, dirs)| {
            let f1 = f.eval(h);
            dirs.iter().all(|u| {
                let mut h2 = add_scaled(h, delta, u);
                clip_to_box(&mut h2, &upper);
                (f1 - f.eval(&h2)).abs() <= epsilon / 3.0
            })
        })
    };
    let mut halvings = 0;
    while !continuity(delta) {
        delta *= 0.5;
        halvings += 1;
        if halvings > 80 {
            return Err(Error::argument("could not find δ for the continuity estimate"));
        }
    }

    let stride = (band.len() / 2000).max(1);
    let band_probes: Vec<(Vec<Plane>, Vec<f64>, Vec<Vec<f64>>)> = band
        .iter()
        .step_by(stride)
        .map(|&idx| {
            let z = radial_point(&grid[idx]);
            let h = sys.h_vector(&z);
            let dirs = probe_directions(sys, &h, &mut rng);
            (z, h, dirs)
        })
        .collect();
    let transversality = |delta: f64| {
        band_probes.iter().all(|(z, h, dirs)| {
            dirs.iter().all(|u| {
                [1.0, 0.5].iter().all(|s| {
                    let mut h2 = add_scaled(h, s * delta, u);
                    clip_to_box(&mut h2, &upper);
                    sys.liouville_of_vf(&f.grad(&h2), z) >= kappa / 2.0
                })
            })
        })
    };
    while !transversality(delta) {
        delta *= 0.5;
        halvings += 1;
        if halvings > 120 {
            return Err(Error::argument("could not find δ for the transversality estimate"));
        }
    }
    delta *= 0.5;

    LemmaConstants::from_parts(
        kappa,
        epsilon,
        delta,
        l_bound,
        c_bound,
        m,
        region_radius,
        grid_resolution,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub seed: u64,
    pub index: usize,
    pub source: String,
    pub r: f64,
    pub tau: f64,
    pub values: BTreeMap<String, f64>,
    pub state: Option<LoopDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: String,
    pub cases: usize,
    /// Suite-specific worst value; see each suite for its meaning.
    pub worst_residual: f64,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
    pub pass: bool,
    /// Region radius of `K` when the suite is tied to one.
    pub region_radius: Option<f64>,
    pub counts: BTreeMap<String, usize>,
    pub details: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn new(suite: &str) -> Self {
        VerificationReport {
            suite: suite.to_string(),
            cases: 0,
            worst_residual: 0.0,
            violation_count: 0,
            violations: Vec::new(),
            pass: true,
            region_radius: None,
            counts: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn record_residual(&mut self, value: f64) {
        if value > self.worst_residual || value.is_nan() {
            self.worst_residual = value;
        }
    }

    pub fn push_violation(&mut self, v: Violation) {
        self.violation_count += 1;
        if self.violations.len() < MAX_BUNDLES {
            self.violations.push(v);
        }
        self.pass = false;
    }

    pub fn bump(&mut self, key: &str, by: usize) {
        *self.counts.entry(key.to_string()).or_insert(0) += by;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned `key  value` lines, one violation summary per line.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("suite".into(), self.suite.clone()),
            ("pass".into(), self.pass.to_string()),
            ("cases".into(), self.cases.to_string()),
            ("worst_residual".into(), format!("{:e}", self.worst_residual)),
            ("violations".into(), self.violation_count.to_string()),
        ];
        if let Some(r) = self.region_radius {
            rows.push(("region_radius".into(), r.to_string()));
        }
        for (k, v) in &self.counts {
            rows.push((format!("count.{k}"), v.to_string()));
        }
        for (k, v) in &self.details {
            rows.push((k.clone(), format!("{v:e}")));
        }
        let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        for v in &self.violations {
            let values: Vec<String> = v.values.iter().map(|(k, x)| format!("{k}={x:e}")).collect();
            let _ = writeln!(
                out,
                "violation {} #{} ({}, seed {}, r {}): {}",
                v.check,
                v.index,
                v.source,
                v.seed,
                v.r,
                values.join(" ")
            );
        }
        out
    }
}

fn values(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

// ---------------------------------------------------------------------------
// gradient-bound implication

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplePlan {
    pub n_samples: usize,
    pub random: usize,
    pub perturbed: usize,
    pub near_circle: usize,
    pub flow_trajectories: usize,
    pub flow_snapshots: usize,
    pub flow_stride: usize,
    pub tau_max: f64,
    pub r_values: Vec<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub orbits: Vec<CriticalOrbit>,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan {
            n_samples: 64,
            random: 4000,
            perturbed: 3000,
            near_circle: 2000,
            flow_trajectories: 100,
            flow_snapshots: 10,
            flow_stride: 20,
            tau_max: 20.0,
            r_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 1,
            orbits: Vec::new(),
        }
    }
}

impl SamplePlan {
    pub fn total(&self) -> usize {
        self.random + self.perturbed + self.near_circle + self.flow_trajectories * self.flow_snapshots
    }

    fn r_at(&self, index: usize) -> f64 {
        self.r_values[index % self.r_values.len()]
    }
}

/// Everything the step checks need from one state.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEvaluation {
    pub grad_norm: f64,
    pub action: f64,
    pub tau: f64,
    pub oscillation: f64,
    pub hf_min: f64,
    pub hf_max: f64,
    pub max_radius: f64,
}

pub fn evaluate_sample(sys: &ProductSystem, state: &FlowState) -> SampleEvaluation {
    let (a, g) = action_and_gradient(sys, state);
    let trace = h_trace(sys, &state.curve);
    let f = sys.coupling();
    let (hf_min, hf_max) = trace
        .iter()
        .map(|h| f.eval(h))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    SampleEvaluation {
        grad_norm: g.norm(),
        action: a,
        tau: state.tau,
        oscillation: oscillation_of_trace(&trace),
        hf_min,
        hf_max,
        max_radius: state.curve.max_radius(),
    }
}

/// A failed inequality: `(check, values)`.
pub type Failure = (&'static str, BTreeMap<String, f64>);

/// Applies the main implication and the step inequalities whose hypotheses
/// hold. Returns the names of the qualifying checks and the failures.
pub fn lemma_checks(k: &LemmaConstants, e: &SampleEvaluation) -> (Vec<&'static str>, Vec<Failure>) {
    let mut qualified = Vec::new();
    let mut failures = Vec::new();
    let gn = e.grad_norm;
    let abs_a = e.action.abs();
    let abs_tau = e.tau.abs();
    let sm = (k.m as f64).sqrt();

    if gn <= 1.0 / k.c {
        qualified.push("main");
        let bound = k.c * (abs_a + 1.0);
        if !(abs_tau <= bound) {
            failures.push((
                "main",
                values(&[("grad_norm", gn), ("abs_tau", abs_tau), ("bound", bound)]),
            ));
        }
    }
    if e.oscillation > k.delta {
        qualified.push("step2");
        let bound = k.delta / (k.c_bound * sm);
        if !(gn > bound) {
            failures.push((
                "step2",
                values(&[("oscillation", e.oscillation), ("grad_norm", gn), ("bound", bound)]),
            ));
        }
    } else {
        if gn <= 2.0 * k.epsilon / 3.0 {
            qualified.push("step1");
            let bound = 6.0 / k.kappa * (abs_a + 2.0 * k.epsilon * k.l_bound / 3.0);
            if !(abs_tau <= bound) {
                failures.push((
                    "step1",
                    values(&[("grad_norm", gn), ("abs_tau", abs_tau), ("bound", bound)]),
                ));
            }
        }
        let hf_abs_max = e.hf_min.abs().max(e.hf_max.abs());
        if hf_abs_max <= k.epsilon {
            qualified.push("step1a");
            let bound = 6.0 / k.kappa * (abs_a + k.l_bound * gn);
            if !(abs_tau <= bound) {
                failures.push((
                    "step1a",
                    values(&[("grad_norm", gn), ("abs_tau", abs_tau), ("bound", bound)]),
                ));
            }
        } else {
            qualified.push("step1b");
            let third = 2.0 * k.epsilon / 3.0;
            let one_sign = e.hf_min > third || e.hf_max < -third;
            if !(one_sign && gn > third) {
                failures.push((
                    "step1b",
                    values(&[
                        ("hf_min", e.hf_min),
                        ("hf_max", e.hf_max),
                        ("grad_norm", gn),
                        ("bound", third),
                    ]),
                ));
            }
        }
    }
    (qualified, failures)
}

fn scaled_into_region(v: Loop, radius: f64, u: f64) -> Loop {
    let top = v.max_radius();
    if top == 0.0 {
        v
    } else {
        v.scaled(radius * u / top)
    }
}

/// A point of `{f = 0}` in the box `H(K)` along a random ray from the
/// origin, found by bisection.
fn random_point_on_sigma(sys: &ProductSystem, upper: &[f64], rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let f = sys.coupling();
    let u: Vec<f64> = upper.iter().map(|_| rng.random_range(0.0..1.0)).collect();
    let scale = upper
        .iter()
        .zip(&u)
        .map(|(b, x)| if *x > 0.0 { b / x } else { f64::INFINITY })
        .fold(f64::INFINITY, f64::min);
    let at = |s: f64| f.eval(&add_scaled(&vec![0.0; u.len()], s, &u));
    let (mut lo, mut hi) = (0.0, scale);
    let (flo, fhi) = (at(lo), at(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(add_scaled(&vec![0.0; u.len()], 0.5 * (lo + hi), &u))
}

fn random_state(
    sys: &ProductSystem,
    plan: &SamplePlan,
    radius: f64,
    rng: &mut ChaCha8Rng,
    r: f64,
) -> Result<FlowState> {
    let p = [2.0, 3.0, 4.0][rng.random_range(0..3)];
    let v = random_loop(sys, plan.n_samples, rng.random(), p, 1.0)?;
    let v = scaled_into_region(v, radius, rng.random_range(0.01..=1.0));
    FlowState::new(v, rng.random_range(-plan.tau_max..=plan.tau_max), r)
}

fn perturbed_orbit(
    sys: &ProductSystem,
    plan: &SamplePlan,
    rng: &mut ChaCha8Rng,
    r: f64,
    size: f64,
) -> Result<FlowState> {
    let orbit = &plan.orbits[rng.random_range(0..plan.orbits.len())];
    let phases: Vec<f64> = (0..sys.m()).map(|_| rng.random_range(0.0..1.0)).collect();
    let base = realize_loop(sys, &orbit.clone().with_phases(phases), plan.n_samples, r)?;
    let dir = random_direction(sys, &base, rng.random())?;
    Ok(displace(&base, size / dir.norm(), &dir))
}

fn near_circle_state(
    sys: &ProductSystem,
    plan: &SamplePlan,
    k: &LemmaConstants,
    rng: &mut ChaCha8Rng,
    r: f64,
) -> Result<Option<FlowState>> {
    let upper: Vec<f64> = sys.factors().iter().map(|f| f.profile(k.region_radius).0).collect();
    let Some(mut h) = random_point_on_sigma(sys, &upper, rng) else {
        return Ok(None);
    };
    // push off Σ so that both |H_f| ≤ ε and |H_f| > ε occur
    let g = sys.coupling().grad(&h);
    let gn2 = g.iter().map(|x| x * x).sum::<f64>();
    if gn2 > 0.0 {
        let target = rng.random_range(-2.0 * k.epsilon..2.0 * k.epsilon);
        h = add_scaled(&h, target / gn2, &g);
        clip_to_box(&mut h, &upper);
    }
    let windings: Vec<i64> = (0..sys.m()).map(|_| rng.random_range(-2..=2)).collect();
    let phases: Vec<f64> = (0..sys.m()).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut v = Loop::from_fn(sys.m(), plan.n_samples, |i, t| {
        Plane::from_polar((h[i] / PI).sqrt(), 2.0 * PI * (windings[i] as f64 * t + phases[i]))
    })?;
    let noise = random_loop(sys, plan.n_samples, rng.random(), 3.0, 1.0)?;
    let amp = 10f64.powf(rng.random_range(-7.0..-2.0)) / noise.l2_norm().max(1e-300);
    v.add_scaled(amp, &noise);
    let g = sys.coupling().grad(&h);
    let closing = (0..sys.m())
        .find(|&i| windings[i] != 0 && g[i].abs() > 1e-12)
        .map(|i| windings[i] as f64 / g[i]);
    let tau = match closing {
        Some(t) if rng.random_bool(0.5) => t * (1.0 + 10f64.powf(rng.random_range(-6.0..-1.0))),
        _ => rng.random_range(-plan.tau_max..=plan.tau_max),
    };
    let v = if v.max_radius() > k.region_radius {
        scaled_into_region(v, k.region_radius, 1.0)
    } else {
        v
    };
    Ok(Some(FlowState::new(v, tau, r)?))
}

fn plan_states(sys: &ProductSystem, k: &LemmaConstants, plan: &SamplePlan) -> Result<Vec<(String, FlowState)>> {
    let radius = k.region_radius;
    let base: Vec<Result<(String, FlowState)>> = (0..plan.random + plan.perturbed + plan.near_circle)
        .into_par_iter()
        .map(|idx| {
            let mut rng = sample_rng(plan.seed, idx as u64);
            let r = plan.r_at(idx);
            if idx >= plan.random && idx < plan.random + plan.perturbed && !plan.orbits.is_empty() {
                let size = 10f64.powf(rng.random_range(-9.0..-1.0));
                return Ok((
                    "perturbed_orbit".to_string(),
                    perturbed_orbit(sys, plan, &mut rng, r, size)?,
                ));
            }
            if idx >= plan.random + plan.perturbed {
                if let Some(st) = near_circle_state(sys, plan, k, &mut rng, r)? {
                    return Ok(("near_circle".to_string(), st));
                }
            }
            Ok(("random".to_string(), random_state(sys, plan, radius, &mut rng, r)?))
        })
        .collect();
    let mut states = base.into_iter().collect::<Result<Vec<_>>>()?;

    let offset = states.len();
    let flows: Vec<Result<Vec<(String, FlowState)>>> = (0..plan.flow_trajectories)
        .into_par_iter()
        .map(|j| {
            let idx = offset + j;
            let mut rng = sample_rng(plan.seed, idx as u64);
            let r = plan.r_at(j);
            let start = if j % 2 == 0 && !plan.orbits.is_empty() {
                perturbed_orbit(sys, plan, &mut rng, r, 1e-2)?
            } else {
                random_state(sys, plan, radius, &mut rng, r)?
            };
            let cfg = FlowConfig {
                ds: 1e-3,
                max_steps: plan.flow_snapshots.saturating_sub(1) * plan.flow_stride,
                grad_tol: 1e-300,
                scheme: Scheme::ExponentialSplitting,
                blowup_norm: 1e6,
                record_stride: plan.flow_stride.max(1),
                snapshot_stride: Some(plan.flow_stride.max(1)),
            };
            let report = flow_run(sys, start, &cfg)?;
            report
                .snapshots
                .into_iter()
                .take(plan.flow_snapshots)
                .map(|s| {
                    let curve = Loop::try_from(s.curve)?;
                    Ok((
                        "flow_snapshot".to_string(),
                        FlowState {
                            curve,
                            tau: s.tau,
                            r: s.r,
                        },
                    ))
                })
                .collect()
        })
        .collect();
    for f in flows {
        states.extend(f?);
    }
    Ok(states)
}

/// Samples states according to `plan` and checks the implication
/// `‖∇𝒜ᵣ‖ ≤ 1/c ⟹ |τ| ≤ c(|𝒜ᵣ| + 1)` together with the step inequalities
/// wherever their hypotheses hold. The worst residual is the largest ratio
/// `|τ| / c(|𝒜ᵣ| + 1)` among states satisfying the hypothesis.
pub fn check_fundamental_lemma(
    sys: &ProductSystem,
    constants: &LemmaConstants,
    plan: &SamplePlan,
) -> Result<VerificationReport> {
    if plan.r_values.is_empty() || plan.r_values.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::argument("sample plan needs r values in [0, 1]"));
    }
    if constants.m != sys.m() {
        return Err(Error::argument("constants were estimated for a different system"));
    }
    let states = plan_states(sys, constants, plan)?;
    let outcomes: Vec<(SampleEvaluation, Vec<&'static str>, Vec<Failure>)> = states
        .par_iter()
        .map(|(_, st)| {
            let e = evaluate_sample(sys, st);
            let (q, f) = lemma_checks(constants, &e);
            (e, q, f)
        })
        .collect();

    let mut report = VerificationReport::new("lemma");
    report.region_radius = Some(constants.region_radius);
    for (key, value) in [
        ("kappa", constants.kappa),
        ("epsilon", constants.epsilon),
        ("delta", constants.delta),
        ("L_bound", constants.l_bound),
        ("C_bound", constants.c_bound),
        ("c", constants.c),
    ] {
        report.details.insert(format!("constant.{key}"), value);
    }
    for check in ["main", "step1", "step1a", "step1b", "step2"] {
        report.bump(check, 0);
    }
    report.bump("outside_region", 0);
    for (index, ((source, st), (e, qualified, failures))) in states.iter().zip(outcomes).enumerate() {
        if !(e.max_radius <= constants.region_radius) || !e.grad_norm.is_finite() {
            report.bump("outside_region", 1);
            continue;
        }
        report.cases += 1;
        report.bump(&format!("source.{source}"), 1);
        for q in &qualified {
            report.bump(q, 1);
        }
        if qualified.contains(&"main") {
            report.record_residual(e.tau.abs() / (constants.c * (e.action.abs() + 1.0)));
        }
        for (check, vals) in failures {
            report.push_violation(Violation {
                check: check.to_string(),
                seed: plan.seed,
                index,
                source: source.clone(),
                r: st.r,
                tau: st.tau,
                values: vals,
                state: Some(LoopDocument::from(&st.curve)),
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// independence of the critical set from r

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremAConfig {
    pub r_grid: Vec<f64>,
    pub tol: f64,
    pub n_samples: usize,
    /// L² size of the perturbation refined back at every r.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for TheoremAConfig {
    fn default() -> Self {
        TheoremAConfig {
            r_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            tol: 1e-8,
            n_samples: 256,
            perturbation: 1e-3,
            seed: 7,
        }
    }
}

fn tangent_distance(a: &FlowState, b: &FlowState) -> Result<f64> {
    let (_, d) = align_torus(&a.curve, &b.curve)?;
    Ok((d * d + (a.tau - b.tau).powi(2)).sqrt())
}

/// For every orbit and every `r` in the grid: the realized loop must be
/// critical and its action `r`-independent, and a perturbed copy refined at
/// `r` must return to the orbit refined at `r = 0` up to a torus shift. The
/// worst residual is the largest realized gradient norm.
pub fn check_theorem_a(
    sys: &ProductSystem,
    orbits: &[CriticalOrbit],
    cfg: &TheoremAConfig,
) -> Result<VerificationReport> {
    if cfg.r_grid.is_empty() || cfg.r_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::argument("r grid must be non-empty and inside [0, 1]"));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::argument("tolerance must be positive"));
    }
    struct AtR {
        grad_norm: f64,
        action: f64,
        refined: std::result::Result<FlowState, String>,
        state: FlowState,
    }
    let jobs: Vec<(usize, usize)> = (0..orbits.len())
        .flat_map(|o| (0..cfg.r_grid.len()).map(move |j| (o, j)))
        .collect();
    let results: Vec<Result<AtR>> = jobs
        .par_iter()
        .map(|&(o, j)| {
            let r = cfg.r_grid[j];
            let state = realize_loop(sys, &orbits[o], cfg.n_samples, r)?;
            let (a, g) = action_and_gradient(sys, &state);
            let dir = random_direction(sys, &state, cfg.seed.wrapping_add(o as u64))?;
            let start = displace(&state, cfg.perturbation / dir.norm(), &dir);
            let refined = refine_full(sys, &start, cfg.tol * 1e-2).map_err(|e| e.to_string());
            Ok(AtR {
                grad_norm: g.norm(),
                action: a,
                refined,
                state,
            })
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = VerificationReport::new("theorem-a");
    let mut index = 0;
    for (o, chunk) in results.chunks(cfg.r_grid.len()).enumerate() {
        let a0 = chunk[0].action;
        let mut spread: f64 = 0.0;
        let reference = chunk[0].refined.as_ref().ok();
        for (j, at) in chunk.iter().enumerate() {
            report.cases += 1;
            report.record_residual(at.grad_norm);
            let da = (at.action - a0).abs();
            spread = spread.max(da);
            let bundle = |check: &str, vals: BTreeMap<String, f64>| Violation {
                check: check.to_string(),
                seed: cfg.seed,
                index,
                source: format!("orbit {o} k={:?}", orbits[o].k),
                r: cfg.r_grid[j],
                tau: at.state.tau,
                values: vals,
                state: Some(LoopDocument::from(&at.state.curve)),
            };
            if !(at.grad_norm <= cfg.tol) {
                report.push_violation(bundle(
                    "grad_norm",
                    values(&[("grad_norm", at.grad_norm), ("tol", cfg.tol)]),
                ));
            }
            if !(da <= cfg.tol) {
                report.push_violation(bundle("action", values(&[("action", at.action), ("action_r0", a0)])));
            }
            match (&at.refined, reference) {
                (Ok(refined), Some(reference)) => {
                    let d = tangent_distance(reference, refined)?;
                    report
                        .details
                        .insert(format!("orbit{o}.distance.r{}", cfg.r_grid[j]), d);
                    if !(d <= 10.0 * cfg.tol) {
                        report.push_violation(bundle(
                            "refined_distance",
                            values(&[("distance", d), ("bound", 10.0 * cfg.tol)]),
                        ));
                    }
                }
                (refined, _) => {
                    let mut v = bundle("refine", values(&[("grad_norm", at.grad_norm)]));
                    let why = match refined {
                        Err(msg) => msg.as_str(),
                        Ok(_) => "refinement at r = 0 failed",
                    };
                    v.source = format!("{}: {why}", v.source);
                    report.push_violation(v);
                }
            }
            index += 1;
        }
        report.details.insert(format!("orbit{o}.action_spread"), spread);
        report.details.insert(format!("orbit{o}.action"), a0);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// torus invariance

/// Both components `√((2 + cos 2πt)/π)·e^{2πit}`, so `Hᵢ(vᵢ(t)) = 2 + cos 2πt`.
pub fn witness_loop(n: usize) -> Result<Loop> {
    Loop::from_fn(2, n, |_, t| {
        Plane::from_polar(((2.0 + (2.0 * PI * t).cos()) / PI).sqrt(), 2.0 * PI * t)
    })
}

/// `count` shifts uniformly distributed on the torus.
pub fn random_shifts(m: usize, count: usize, seed: u64) -> Vec<TorusShift> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| TorusShift::new((0..m).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceConfig {
    pub shifts: Vec<TorusShift>,
    pub tol: f64,
    pub r_values: Vec<f64>,
    /// Shift that must change the undelayed action by at least `witness_min`.
    pub witness: Option<TorusShift>,
    pub witness_min: f64,
}

impl InvarianceConfig {
    pub fn new(shifts: Vec<TorusShift>) -> Self {
        InvarianceConfig {
            shifts,
            tol: 1e-10,
            r_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            witness: None,
            witness_min: 0.5,
        }
    }
}

/// Checks invariance of the delayed action under every shift, of every
/// interpolated action under the diagonal parts of the shifts, of the
/// undelayed action when `f` is linear, and non-invariance of the undelayed
/// action under the witness shift. The worst residual is the largest action
/// change among the asserted invariances.
pub fn check_invariance(sys: &ProductSystem, v: &Loop, tau: f64, cfg: &InvarianceConfig) -> Result<VerificationReport> {
    let mut report = VerificationReport::new("invariance");
    let at = |curve: &Loop, r: f64| -> Result<f64> { Ok(action(sys, &FlowState::new(curve.clone(), tau, r)?)) };
    let delayed = at(v, 1.0)?;
    let linear = sys.coupling().is_linear();
    let mut bundle_index = 0;
    let mut check = |report: &mut VerificationReport,
                     name: &str,
                     r: f64,
                     before: f64,
                     moved: &Loop,
                     shift: &TorusShift|
     -> Result<()> {
        let after = at(moved, r)?;
        let d = (after - before).abs();
        report.cases += 1;
        report.record_residual(d);
        if !(d <= cfg.tol) {
            let mut vals = values(&[("before", before), ("after", after), ("change", d)]);
            for (i, s) in shift.shifts().iter().enumerate() {
                vals.insert(format!("shift_{}", i + 1), *s);
            }
            report.push_violation(Violation {
                check: name.to_string(),
                seed: 0,
                index: bundle_index,
                source: "shift_set".to_string(),
                r,
                tau,
                values: vals,
                state: Some(LoopDocument::from(v)),
            });
        }
        bundle_index += 1;
        Ok(())
    };
    let base_r: Vec<f64> = cfg.r_values.iter().map(|&r| at(v, r)).collect::<Result<_>>()?;
    let undelayed = at(v, 0.0)?;
    for shift in &cfg.shifts {
        let moved = reparametrize(v, shift)?;
        check(&mut report, "delayed", 1.0, delayed, &moved, shift)?;
        if linear {
            check(&mut report, "undelayed_linear", 0.0, undelayed, &moved, shift)?;
        }
        let diag = TorusShift::diagonal(shift.shifts()[0], v.m());
        let moved = reparametrize(v, &diag)?;
        for (&r, &before) in cfg.r_values.iter().zip(&base_r) {
            check(&mut report, "diagonal", r, before, &moved, &diag)?;
        }
    }
    if let Some(w) = &cfg.witness {
        let change = at(&reparametrize(v, w)?, 0.0)? - undelayed;
        report.cases += 1;
        report.details.insert("witness.undelayed_change".to_string(), change);
        if !(change.abs() >= cfg.witness_min) {
            report.push_violation(Violation {
                check: "witness".to_string(),
                seed: 0,
                index: bundle_index,
                source: "witness".to_string(),
                r: 0.0,
                tau,
                values: values(&[("change", change), ("required", cfg.witness_min)]),
                state: Some(LoopDocument::from(v)),
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradient sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientSuiteConfig {
    pub n_states: usize,
    pub n_dirs: usize,
    pub n_samples: usize,
    pub r_values: Vec<f64>,
    pub seed: u64,
    pub fd_step: f64,
    pub tol: f64,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        GradientSuiteConfig {
            n_states: 20,
            n_dirs: 5,
            n_samples: 128,
            r_values: vec![0.0, 0.5, 1.0],
            seed: 3,
            fd_step: 1e-5,
            tol: 1e-6,
        }
    }
}

pub fn gradient_suite(sys: &ProductSystem, cfg: &GradientSuiteConfig) -> Result<VerificationReport> {
    gradient_suite_with(sys, cfg, gradient)
}

/// [`gradient_suite`] against an arbitrary gradient implementation. The
/// worst residual is the largest relative error `|fd − pairing| / (1 + |fd|)`.
pub fn gradient_suite_with<G>(sys: &ProductSystem, cfg: &GradientSuiteConfig, grad: G) -> Result<VerificationReport>
where
    G: Fn(&ProductSystem, &FlowState) -> StateTangent + Sync,
{
    if !(cfg.fd_step > 0.0) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.n_states)
        .flat_map(|s| (0..cfg.r_values.len()).map(move |j| (s, j)))
        .collect();
    let rows: Vec<Result<Vec<(usize, FlowState, f64, f64)>>> = jobs
        .par_iter()
        .map(|&(s, j)| {
            let mut rng = sample_rng(cfg.seed, s as u64);
            let v = random_loop(sys, cfg.n_samples, rng.random(), 2.0, 0.6)?;
            let state = FlowState::new(v, rng.random_range(-3.0..3.0), cfg.r_values[j])?;
            let g = grad(sys, &state);
            (0..cfg.n_dirs)
                .map(|d| {
                    let dir = random_direction(sys, &state, rng.random::<u64>() ^ d as u64)?;
                    let fd = directional_derivative_fd(sys, &state, &dir, cfg.fd_step)?;
                    Ok((s, state.clone(), fd, g.pairing(&dir)))
                })
                .collect()
        })
        .collect();
    let mut report = VerificationReport::new("gradient");
    for (index, (s, state, fd, pair)) in rows
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .enumerate()
    {
        report.cases += 1;
        let rel = (fd - pair).abs() / (1.0 + fd.abs());
        report.record_residual(rel);
        if !(rel <= cfg.tol) {
            report.push_violation(Violation {
                check: "fd_vs_pairing".to_string(),
                seed: cfg.seed,
                index,
                source: format!("state {s}"),
                r: state.r,
                tau: state.tau,
                values: values(&[("fd", fd), ("pairing", pair), ("relative_error", rel)]),
                state: Some(LoopDocument::from(&state.curve)),
            });
        }
    }
    Ok(report)
}

/// Realizes `orbit` with `h` moved off `{f = 0}` along the first active
/// factor by `offset`: the negative control for [`check_theorem_a`].
pub fn corrupted_orbit(orbit: &CriticalOrbit, offset: f64) -> CriticalOrbit {
    let mut bad = orbit.clone();
    if let Some(i) = bad.k.iter().position(|k| *k != 0) {
        bad.h[i] += offset;
    }
    bad
}

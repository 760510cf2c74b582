//! Negative gradient flow `∂_s(v, τ) = −∇𝒜ᵣ(v, τ)` with `r` held fixed.
//!
//! On plane `i`, writing `vᵢ = Σ ẑ_k e^{2πikt}`, the loop equation is
//! `∂_s vᵢ = −J∂_t vᵢ + τ J X(v)` and `−J∂_t` acts on mode `k` by `2πk`.
//! The functional is strongly indefinite: near a critical circle with winding
//! `kᵢ` and frequency `τcᵢ`, mode `k` grows at rate `2π(k − τcᵢ)`, so
//! trajectories started off the stable manifold leave every neighbourhood of
//! the critical point.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{action_and_gradient, StateTangent};
use crate::geometry::{j0, ProductSystem};
use crate::loopspace::{forward, inverse, time_derivative, wavenumber, FlowState, LoopDocument};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `w ← w − ds·∇𝒜ᵣ(w)`.
    ExplicitEuler,
    /// Exponential Euler: `−J∂_t` integrated exactly per Fourier mode, the
    /// remaining terms frozen over the step. Critical points are exact fixed
    /// points.
    ExponentialSplitting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub ds: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub scheme: Scheme,
    /// Abort once any sample coordinate or `|τ|` exceeds this.
    pub blowup_norm: f64,
    /// Record a trace row every `record_stride` steps (the last step is
    /// always recorded).
    pub record_stride: usize,
    /// Keep a full state snapshot every `snapshot_stride` steps.
    pub snapshot_stride: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            ds: 1e-3,
            max_steps: 10_000,
            grad_tol: 1e-6,
            scheme: Scheme::ExponentialSplitting,
            blowup_norm: 1e6,
            record_stride: 1,
            snapshot_stride: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds > 0.0 && self.ds.is_finite()) {
            return Err(Error::argument(format!("ds must be positive, got {}", self.ds)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::argument("grad_tol must be positive"));
        }
        if !(self.blowup_norm > 0.0) {
            return Err(Error::argument("blowup_norm must be positive"));
        }
        if self.record_stride == 0 || self.snapshot_stride == Some(0) {
            return Err(Error::argument("strides must be at least 1"));
        }
        Ok(())
    }
}

/// One step of the flow from `state`, whose gradient is `grad`.
pub fn flow_step_with(sys: &ProductSystem, state: &FlowState, grad: &StateTangent, cfg: &FlowConfig) -> FlowState {
    let ds = cfg.ds;
    let tau = state.tau - ds * grad.tau;
    let mut curve = state.curve.clone();
    match cfg.scheme {
        Scheme::ExplicitEuler => curve.add_scaled(-ds, &grad.curve),
        Scheme::ExponentialSplitting => {
            // remainder N = −∇ + J∂_t v = τ J X(v)
            let dv = time_derivative(&state.curve);
            let n = curve.n_samples();
            for i in 0..sys.m() {
                let rest: Vec<Complex64> = grad
                    .curve
                    .component(i)
                    .iter()
                    .zip(dv.component(i))
                    .map(|(g, d)| -g + j0(*d))
                    .collect();
                let rest_hat = forward(&rest);
                let mut hat = forward(curve.component(i));
                for (j, (h, nh)) in hat.iter_mut().zip(&rest_hat).enumerate() {
                    let rate = if j == n / 2 {
                        0.0
                    } else {
                        2.0 * PI * wavenumber(j, n) as f64
                    };
                    let x = rate * ds;
                    let phi1 = if x == 0.0 { 1.0 } else { x.exp_m1() / x };
                    *h = *h * x.exp() + nh * (ds * phi1);
                }
                curve.component_mut(i).copy_from_slice(&inverse(&hat));
            }
        }
    }
    FlowState { curve, tau, r: state.r }
}

pub fn flow_step(sys: &ProductSystem, state: &FlowState, cfg: &FlowConfig) -> FlowState {
    let (_, grad) = action_and_gradient(sys, state);
    flow_step_with(sys, state, &grad, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub s: f64,
    pub action: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub s: f64,
    pub tau: f64,
    pub r: f64,
    pub curve: LoopDocument,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowReport {
    pub termination: Termination,
    pub steps: usize,
    pub r: f64,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
    #[serde(skip)]
    pub final_state: FlowState,
}

impl FlowReport {
    pub fn actions(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.action).collect()
    }

    pub fn last(&self) -> &TraceRow {
        self.trace.last().expect("a flow report always has a row")
    }

    /// `step, s, action, grad_norm, tau`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn diverged(state: &FlowState, limit: f64) -> bool {
    !state.tau.is_finite()
        || state.tau.abs() > limit
        || !state.curve.is_finite()
        || state.curve.max_abs_coordinate() > limit
}

fn snapshot(state: &FlowState, step: usize, s: f64) -> Snapshot {
    Snapshot {
        step,
        s,
        tau: state.tau,
        r: state.r,
        curve: LoopDocument::from(&state.curve),
    }
}

/// Iterates [`flow_step`] until convergence, divergence or the step budget.
pub fn flow_run(sys: &ProductSystem, start: FlowState, cfg: &FlowConfig) -> Result<FlowReport> {
    cfg.validate()?;
    let mut state = start;
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0usize;
    let termination = loop {
        let s = step as f64 * cfg.ds;
        let (a, grad) = action_and_gradient(sys, &state);
        let gn = grad.norm();
        let row = TraceRow {
            step,
            s,
            action: a,
            grad_norm: gn,
            tau: state.tau,
        };
        if let Some(stride) = cfg.snapshot_stride {
            if step.is_multiple_of(stride) {
                snapshots.push(snapshot(&state, step, s));
            }
        }
        let outcome = if !(a.is_finite() && gn.is_finite()) || diverged(&state, cfg.blowup_norm) {
            Some(Termination::Diverged)
        } else if gn <= cfg.grad_tol {
            Some(Termination::Converged)
        } else if step >= cfg.max_steps {
            Some(Termination::BudgetExhausted)
        } else {
            None
        };
        if outcome.is_some() || step.is_multiple_of(cfg.record_stride) {
            trace.push(row);
        }
        if let Some(t) = outcome {
            break t;
        }
        state = flow_step_with(sys, &state, &grad, cfg);
        step += 1;
    };
    Ok(FlowReport {
        termination,
        steps: step,
        r: state.r,
        trace,
        snapshots,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{action, grad_norm, gradient, random_direction};
    use crate::geometry::{Coupling, Plane};
    use crate::loopspace::{circle, Loop};

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

    fn ellipsoid_orbit(n: usize, r: f64) -> FlowState {
        let v = Loop::from_fn(2, n, |i, t| {
            if i == 0 {
                circle(1.0, 1, 0.0)(t)
            } else {
                Plane::default()
            }
        })
        .unwrap();
        FlowState::new(v, 1.0, r).unwrap()
    }

    fn pairwise_orbit(n: usize, r: f64) -> FlowState {
        let h = 2f64.sqrt() - 1.0;
        let v = Loop::from_fn(2, n, |i, t| circle(h, 1, 0.2 * i as f64)(t)).unwrap();
        FlowState::new(v, 1.0 / 2f64.sqrt(), r).unwrap()
    }

    fn perturbed(sys: &ProductSystem, st: &FlowState, size: f64, seed: u64) -> FlowState {
        let dir = random_direction(sys, st, seed).unwrap();
        crate::functionals::displace(st, size / dir.norm(), &dir)
    }

    fn distance(a: &FlowState, b: &FlowState) -> f64 {
        let mut d = a.curve.clone();
        d.add_scaled(-1.0, &b.curve);
        (d.l2_norm().powi(2) + (a.tau - b.tau).powi(2)).sqrt()
    }

    #[test]
    fn critical_points_are_fixed() {
        for scheme in [Scheme::ExplicitEuler, Scheme::ExponentialSplitting] {
            let cfg = FlowConfig {
                ds: 1e-3,
                scheme,
                ..Default::default()
            };
            for (sys, st) in [
                (ellipsoid(), ellipsoid_orbit(128, 0.5)),
                (pairwise(), pairwise_orbit(128, 0.3)),
            ] {
                let next = flow_step(&sys, &st, &cfg);
                assert!(distance(&next, &st) <= 1e-8 * cfg.ds, "{scheme:?}");
            }
        }
    }

    #[test]
    fn tau_grows_linearly_at_the_origin() {
        let sys = ProductSystem::uncut(1, Coupling::linear(vec![1.0], -1.0)).unwrap();
        let cfg = FlowConfig {
            ds: 0.01,
            scheme: Scheme::ExplicitEuler,
            max_steps: 250,
            ..Default::default()
        };
        let start = FlowState::new(Loop::zeros(1, 16).unwrap(), -0.4, 0.5).unwrap();
        let report = flow_run(&sys, start, &cfg).unwrap();
        assert_eq!(report.termination, Termination::BudgetExhausted);
        for row in &report.trace {
            assert!((row.tau - (-0.4 + row.s)).abs() < 1e-12);
        }
        assert_eq!(report.final_state.curve.l2_norm(), 0.0);
    }

    #[test]
    fn euler_step_descends_near_orbit() {
        for (sys, st) in [
            (ellipsoid(), ellipsoid_orbit(128, 0.5)),
            (pairwise(), pairwise_orbit(128, 0.5)),
        ] {
            let start = perturbed(&sys, &st, 1e-2, 5);
            for ds in [1e-3, 1e-4] {
                let cfg = FlowConfig {
                    ds,
                    scheme: Scheme::ExplicitEuler,
                    ..Default::default()
                };
                let next = flow_step(&sys, &start, &cfg);
                assert!(action(&sys, &next) < action(&sys, &start));
            }
        }
    }

    #[test]
    fn run_from_critical_converges_immediately() {
        let sys = pairwise();
        let report = flow_run(&sys, pairwise_orbit(128, 0.5), &FlowConfig::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        assert!(report.steps <= 1);
    }

    #[test]
    fn zero_budget_gives_single_row() {
        let sys = ellipsoid();
        let start = perturbed(&sys, &ellipsoid_orbit(64, 0.5), 1e-2, 1);
        let cfg = FlowConfig {
            max_steps: 0,
            ..Default::default()
        };
        let report = flow_run(&sys, start, &cfg).unwrap();
        assert_eq!(report.termination, Termination::BudgetExhausted);
        assert_eq!(report.trace.len(), 1);
    }

    #[test]
    fn huge_steps_diverge() {
        let sys = ellipsoid();
        let start = perturbed(&sys, &ellipsoid_orbit(64, 0.5), 1e-1, 2);
        let cfg = FlowConfig {
            ds: 10.0,
            scheme: Scheme::ExplicitEuler,
            max_steps: 1000,
            ..Default::default()
        };
        let report = flow_run(&sys, start, &cfg).unwrap();
        assert_eq!(report.termination, Termination::Diverged);
    }

    #[test]
    fn action_trace_is_monotone() {
        for (sys, st) in [
            (ellipsoid(), ellipsoid_orbit(128, 0.5)),
            (pairwise(), pairwise_orbit(128, 0.5)),
        ] {
            let start = perturbed(&sys, &st, 1e-2, 9);
            for scheme in [Scheme::ExplicitEuler, Scheme::ExponentialSplitting] {
                let cfg = FlowConfig {
                    ds: 1e-4,
                    scheme,
                    max_steps: 300,
                    ..Default::default()
                };
                let report = flow_run(&sys, start.clone(), &cfg).unwrap();
                for w in report.trace.windows(2) {
                    let tol = 1e-12 * (1.0 + w[0].action.abs());
                    assert!(
                        w[1].action <= w[0].action + tol,
                        "{scheme:?}: {} -> {}",
                        w[0].action,
                        w[1].action
                    );
                }
            }
        }
    }

    #[test]
    fn action_decay_rate_is_minus_grad_norm_squared() {
        let sys = pairwise();
        let st = perturbed(&sys, &pairwise_orbit(128, 0.5), 5e-2, 3);
        let a0 = action(&sys, &st);
        let g2 = grad_norm(&sys, &st).powi(2);
        let errs: Vec<f64> = [1e-4, 5e-5, 2.5e-5]
            .iter()
            .map(|&ds| {
                let cfg = FlowConfig {
                    ds,
                    scheme: Scheme::ExplicitEuler,
                    ..Default::default()
                };
                let next = flow_step(&sys, &st, &cfg);
                ((action(&sys, &next) - a0) / ds + g2).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() < 0.1, "observed order {order}, errors {errs:?}");
        }
    }

    // The stiff part is not dissipative: a mode above the orbit's frequency grows.
    #[test]
    fn modes_above_the_frequency_grow() {
        let sys = ellipsoid();
        let st = ellipsoid_orbit(64, 0.5);
        // factor 2 sits at the origin with frequency τ·f₂ = 1/2
        for (k, amp) in [(3i64, 1e-9), (-2, 1e-9)] {
            let mut start = st.clone();
            for (j, z) in start.curve.component_mut(1).iter_mut().enumerate() {
                *z = Plane::from_polar(amp, 2.0 * PI * k as f64 * j as f64 / 64.0);
            }
            let cfg = FlowConfig {
                ds: 1e-3,
                max_steps: 100,
                grad_tol: 1e-300,
                ..Default::default()
            };
            let report = flow_run(&sys, start, &cfg).unwrap();
            let s = report.last().s;
            let end = report.final_state.curve.component(1)[0].norm();
            let rate = (end / amp).ln() / s;
            let expected = 2.0 * PI * (k as f64 - 0.5);
            assert!(
                (rate - expected).abs() < 1e-2 * expected.abs(),
                "k = {k}: rate {rate}, expected {expected}"
            );
        }
    }

    #[test]
    fn csv_has_expected_columns() {
        let sys = ellipsoid();
        let start = perturbed(&sys, &ellipsoid_orbit(64, 0.5), 1e-2, 1);
        let cfg = FlowConfig {
            max_steps: 3,
            ..Default::default()
        };
        let report = flow_run(&sys, start, &cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,s,action,grad_norm,tau\n"));
        assert_eq!(text.lines().count(), 5);
        let _ = gradient(&sys, &report.final_state);
    }
}

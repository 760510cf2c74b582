//! The interpolated action
//!
//! ```text
//! 𝒜ᵣ(v, τ) = −∫ v*λ + τ ( r f(H̄(v)) + (1 − r) ∫ f(H(v(t))) dt )
//! ```
//!
//! and its gradient for the L² metric `g_J`. Since `J` is the standard
//! structure on each plane, `ω(ξ, Jη) = ⟨ξ, η⟩` and `g_J` is the flat L²
//! product on the loop slot plus the product of the `τ` slots.
//!
//! The discrete action uses the spectral derivative (skew-adjoint on the grid)
//! and the trapezoid rule, so [`gradient`] is the exact gradient of the
//! discrete action with respect to the discrete pairing.

use crate::error::{Error, Result};
use crate::geometry::{j0, ProductSystem};
use crate::loopspace::{area_with_derivative, average_h, h_trace, time_derivative, FlowState, Loop, LoopTangent};

/// A tangent vector `(ξ, τ̂)` to `𝓛 × ℝ`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTangent {
    pub curve: LoopTangent,
    pub tau: f64,
}

impl StateTangent {
    pub fn zeros_like(state: &FlowState) -> Self {
        StateTangent {
            curve: state.curve.scaled(0.0),
            tau: 0.0,
        }
    }

    /// The `g_J` pairing.
    pub fn pairing(&self, other: &StateTangent) -> f64 {
        self.curve.inner(&other.curve) + self.tau * other.tau
    }

    pub fn norm(&self) -> f64 {
        self.pairing(self).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        StateTangent {
            curve: self.curve.scaled(alpha),
            tau: self.tau * alpha,
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &StateTangent) {
        self.curve.add_scaled(alpha, &other.curve);
        self.tau += alpha * other.tau;
    }
}

/// `state + alpha · dir`; the ambient space is linear so this acts samplewise.
pub fn displace(state: &FlowState, alpha: f64, dir: &StateTangent) -> FlowState {
    let mut curve = state.curve.clone();
    curve.add_scaled(alpha, &dir.curve);
    FlowState {
        curve,
        tau: state.tau + alpha * dir.tau,
        r: state.r,
    }
}

/// Everything the action and gradient share, computed once per state.
struct Evaluation {
    derivative: Loop,
    trace: Vec<Vec<f64>>,
    hbar: Vec<f64>,
    constraint: f64,
}

fn evaluate(sys: &ProductSystem, state: &FlowState) -> Evaluation {
    let v = &state.curve;
    let derivative = time_derivative(v);
    let trace = h_trace(sys, v);
    let hbar = average_h(sys, v);
    let f = sys.coupling();
    let mean_fh = trace.iter().map(|h| f.eval(h)).sum::<f64>() / trace.len() as f64;
    let constraint = state.r * f.eval(&hbar) + (1.0 - state.r) * mean_fh;
    Evaluation {
        derivative,
        trace,
        hbar,
        constraint,
    }
}

/// `r f∘H̄(v) + (1 − r) avg(f∘H)(v)`, the scalar slot of the gradient.
pub fn constraint(sys: &ProductSystem, state: &FlowState) -> f64 {
    let f = sys.coupling();
    let trace = h_trace(sys, &state.curve);
    let mean_fh = trace.iter().map(|h| f.eval(h)).sum::<f64>() / trace.len() as f64;
    state.r * f.eval(&average_h(sys, &state.curve)) + (1.0 - state.r) * mean_fh
}

/// `𝒜ᵣ(v, τ)`.
pub fn action(sys: &ProductSystem, state: &FlowState) -> f64 {
    let ev = evaluate(sys, state);
    -area_with_derivative(&state.curve, &ev.derivative) + state.tau * ev.constraint
}

/// Coefficients `cᵢ(t_j) = r fᵢ(H̄(v)) + (1 − r) fᵢ(H(v(t_j)))`, indexed `[j][i]`.
pub(crate) fn coefficients(sys: &ProductSystem, r: f64, trace: &[Vec<f64>], hbar: &[f64]) -> Vec<Vec<f64>> {
    let f = sys.coupling();
    let m = sys.m();
    let gbar = f.grad(hbar);
    let mut local = vec![0.0; m];
    trace
        .iter()
        .map(|h| {
            f.grad_into(h, &mut local);
            gbar.iter()
                .zip(&local)
                .map(|(gb, gl)| r * gb + (1.0 - r) * gl)
                .collect()
        })
        .collect()
}

/// The loop residual `∂_t v − τ X_{r df(H̄)H + (1−r) fH}(v)`.
fn residual_from(sys: &ProductSystem, state: &FlowState, ev: &Evaluation) -> Loop {
    let coeffs = coefficients(sys, state.r, &ev.trace, &ev.hbar);
    let mut res = ev.derivative.clone();
    for (i, fac) in sys.factors().iter().enumerate() {
        let vi = state.curve.component(i);
        for ((rj, zj), cj) in res.component_mut(i).iter_mut().zip(vi).zip(&coeffs) {
            *rj -= fac.vector_field(*zj) * (state.tau * cj[i]);
        }
    }
    res
}

/// `∂_t v − τ X_{r df(H̄(v))H + (1−r) fH}(v)`; its L² norm is the loop part of
/// the gradient norm.
pub fn residual(sys: &ProductSystem, state: &FlowState) -> Loop {
    let ev = evaluate(sys, state);
    residual_from(sys, state, &ev)
}

/// `∇𝒜ᵣ(v, τ) = ( J(∂_t v − τ X(v)), r f∘H̄(v) + (1 − r) avg(f∘H)(v) )`.
pub fn gradient(sys: &ProductSystem, state: &FlowState) -> StateTangent {
    let ev = evaluate(sys, state);
    let mut curve = residual_from(sys, state, &ev);
    for i in 0..curve.m() {
        curve.component_mut(i).iter_mut().for_each(|z| *z = j0(*z));
    }
    StateTangent {
        curve,
        tau: ev.constraint,
    }
}

/// Action and gradient from one shared evaluation.
pub fn action_and_gradient(sys: &ProductSystem, state: &FlowState) -> (f64, StateTangent) {
    let ev = evaluate(sys, state);
    let a = -area_with_derivative(&state.curve, &ev.derivative) + state.tau * ev.constraint;
    let mut curve = residual_from(sys, state, &ev);
    for i in 0..curve.m() {
        curve.component_mut(i).iter_mut().for_each(|z| *z = j0(*z));
    }
    (
        a,
        StateTangent {
            curve,
            tau: ev.constraint,
        },
    )
}

/// `‖∇𝒜ᵣ(v, τ)‖` in the `g_J` norm.
pub fn grad_norm(sys: &ProductSystem, state: &FlowState) -> f64 {
    gradient(sys, state).norm()
}

/// Central difference `(𝒜(w + h·d) − 𝒜(w − h·d)) / 2h`.
pub fn directional_derivative_fd(
    sys: &ProductSystem,
    state: &FlowState,
    direction: &StateTangent,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::argument(format!("step must be positive, got {h}")));
    }
    let plus = action(sys, &displace(state, h, direction));
    let minus = action(sys, &displace(state, -h, direction));
    Ok((plus - minus) / (2.0 * h))
}

/// Random smooth tangent direction, deterministic in `seed`.
pub fn random_direction(sys: &ProductSystem, state: &FlowState, seed: u64) -> Result<StateTangent> {
    use rand::{Rng, SeedableRng};
    let curve = crate::loopspace::random_loop(sys, state.curve.n_samples(), seed, 2.0, 1.0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(StateTangent {
        curve,
        tau: rng.random_range(-1.0..1.0),
    })
}

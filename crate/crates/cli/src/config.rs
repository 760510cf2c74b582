//! The experiment document: one TOML file fully determines a run.

use std::path::Path;

use rabiflow_core::flow::{FlowConfig, Scheme};
use rabiflow_core::{Coupling, CouplingDescriptor, Factor, ProductSystem};
use serde::Deserialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemSection,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub orbits: OrbitsSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub m: usize,
    pub coupling: CouplingDescriptor,
    /// Per-factor cutoff radii; `0` leaves a factor uncut. Omitted means
    /// every factor is uncut.
    #[serde(default)]
    pub cutoffs: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Discretization {
    pub n_samples: usize,
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization { n_samples: 256 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitsSection {
    /// Winding vectors handed to the reduced solver.
    pub k: Vec<Vec<i64>>,
    /// Initial guesses, one per winding vector (defaults to `0.5` per factor).
    pub h0: Vec<Vec<f64>>,
    /// For ellipsoid couplings, also list the closed-form spectrum up to this
    /// winding.
    pub ellipsoid_k_max: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStart {
    /// A solved orbit from `[orbits]`, perturbed by a random direction.
    Orbit,
    /// A random loop.
    Random,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub ds: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub scheme: Scheme,
    pub blowup_norm: f64,
    pub record_stride: usize,
    pub snapshot_stride: Option<usize>,
    pub start: FlowStart,
    pub orbit_index: usize,
    pub perturbation: f64,
    pub r: f64,
    /// Initial `τ` for random starts.
    pub tau: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let d = FlowConfig::default();
        FlowSection {
            ds: d.ds,
            max_steps: d.max_steps,
            grad_tol: d.grad_tol,
            scheme: d.scheme,
            blowup_norm: d.blowup_norm,
            record_stride: d.record_stride,
            snapshot_stride: d.snapshot_stride,
            start: FlowStart::Orbit,
            orbit_index: 0,
            perturbation: 1e-2,
            r: 0.5,
            tau: 1.0,
            amplitude: 0.3,
            seed: 1,
        }
    }
}

impl FlowSection {
    pub fn integrator(&self) -> FlowConfig {
        FlowConfig {
            ds: self.ds,
            max_steps: self.max_steps,
            grad_tol: self.grad_tol,
            scheme: self.scheme,
            blowup_norm: self.blowup_norm,
            record_stride: self.record_stride,
            snapshot_stride: self.snapshot_stride,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub seed: u64,
    pub region_radius: f64,
    pub grid_resolution: usize,
    pub epsilon: f64,
    pub tol: f64,
    pub r_grid: Vec<f64>,
    /// Moves every orbit's `h` off `{f = 0}` before the theorem-a suite.
    pub corrupt_h: f64,
    pub lemma_n_samples: usize,
    pub lemma_random: usize,
    pub lemma_perturbed: usize,
    pub lemma_near_circle: usize,
    pub lemma_flow_trajectories: usize,
    pub lemma_flow_snapshots: usize,
    pub lemma_flow_stride: usize,
    pub tau_max: f64,
    pub r_values: Vec<f64>,
    pub invariance_shifts: usize,
    /// Require the shift `(0, ½)` to change the undelayed action; defaults
    /// to on for two factors with a nonlinear coupling.
    pub invariance_witness: Option<bool>,
    pub gradient_states: usize,
    pub gradient_dirs: usize,
    pub gradient_n_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            seed: 1,
            region_radius: 2.0,
            grid_resolution: 201,
            epsilon: 0.05,
            tol: 1e-8,
            r_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            corrupt_h: 0.0,
            lemma_n_samples: 64,
            lemma_random: 4000,
            lemma_perturbed: 3000,
            lemma_near_circle: 2000,
            lemma_flow_trajectories: 100,
            lemma_flow_snapshots: 10,
            lemma_flow_stride: 20,
            tau_max: 20.0,
            r_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            invariance_shifts: 32,
            invariance_witness: None,
            gradient_states: 20,
            gradient_dirs: 5,
            gradient_n_samples: 128,
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim_end().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_column(text, span.start);
                    ConfigError(format!("{origin}:{line}:{col}: {msg}"))
                }
                None => ConfigError(format!("{origin}: {msg}")),
            }
        })?;
        config.validate().map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Config::parse(&text, &path.display().to_string())
    }

    fn validate(&self) -> Result<(), String> {
        let m = self.system.m;
        if m == 0 {
            return Err("system.m must be at least 1".into());
        }
        if !self.system.cutoffs.is_empty() && self.system.cutoffs.len() != m {
            return Err(format!("system.cutoffs must list {m} radii"));
        }
        if self.system.cutoffs.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err("system.cutoffs must be non-negative".into());
        }
        let n = self.discretization.n_samples;
        if n < 4 || !n.is_power_of_two() {
            return Err(format!("discretization.n_samples must be a power of two ≥ 4, got {n}"));
        }
        for k in &self.orbits.k {
            if k.len() != m {
                return Err(format!("orbits.k entry {k:?} must have {m} components"));
            }
        }
        if !self.orbits.h0.is_empty() && self.orbits.h0.len() != self.orbits.k.len() {
            return Err("orbits.h0 must have one entry per orbits.k entry".into());
        }
        if self.orbits.h0.iter().any(|h| h.len() != m) {
            return Err(format!("orbits.h0 entries must have {m} components"));
        }
        self.flow.integrator().validate().map_err(|e| format!("flow: {e}"))?;
        if !(0.0..=1.0).contains(&self.flow.r) {
            return Err("flow.r must lie in [0, 1]".into());
        }
        let v = &self.verify;
        if v.r_grid.iter().chain(&v.r_values).any(|r| !(0.0..=1.0).contains(r)) {
            return Err("verify r values must lie in [0, 1]".into());
        }
        if v.r_grid.is_empty() || v.r_values.is_empty() {
            return Err("verify.r_grid and verify.r_values must be non-empty".into());
        }
        if !v.lemma_n_samples.is_power_of_two() || !v.gradient_n_samples.is_power_of_two() {
            return Err("verify sample counts must be powers of two".into());
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ProductSystem, ConfigError> {
        let coupling = Coupling::from_descriptor(self.system.coupling.clone())
            .map_err(|e| ConfigError(format!("system.coupling: {e}")))?;
        let factors = if self.system.cutoffs.is_empty() {
            vec![Factor::uncut(); self.system.m]
        } else {
            self.system
                .cutoffs
                .iter()
                .map(|&r| {
                    if r > 0.0 {
                        Factor::with_cutoff(r)
                    } else {
                        Factor::uncut()
                    }
                })
                .collect()
        };
        ProductSystem::new(factors, coupling).map_err(|e| ConfigError(format!("system: {e}")))
    }

    pub fn initial_guess(&self, index: usize) -> Vec<f64> {
        self.orbits
            .h0
            .get(index)
            .cloned()
            .unwrap_or_else(|| vec![0.5; self.system.m])
    }
}

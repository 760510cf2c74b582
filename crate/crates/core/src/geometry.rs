//! Pointwise symplectic data on `M = ℝ² ⊕ … ⊕ ℝ²`.
//!
//! Each plane is identified with `ℂ` via `z = x + iy`. With `ω = dx∧dy` and
//! the convention `dH = ω(·, X_H)`, a radial Hamiltonian `H(|z|)` has
//! Hamiltonian vector field `X_H(z) = i·H'(|z|)·z/|z|`, the Liouville form is
//! `λ_z(ξ) = ½ Im(z̄ ξ)` and the Liouville field is `Y(z) = z/2`. The compatible
//! complex structure `J` is multiplication by `i`, so `ω(ξ, Jξ) = |ξ|²`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of (or tangent vector to) one symplectic plane.
pub type Plane = Complex64;

/// `ω(a, b) = a_x b_y − a_y b_x` on one plane.
#[inline]
pub fn omega(a: Plane, b: Plane) -> f64 {
    a.re * b.im - a.im * b.re
}

/// The standard compatible complex structure (rotation by 90°).
#[inline]
pub fn j0(a: Plane) -> Plane {
    Plane::new(-a.im, a.re)
}

/// One plane factor `Mᵢ = ℝ²` with Hamiltonian `Hᵢ(z) = π|z|²`, optionally
/// flattened beyond a cutoff radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    /// With cutoff `R₀`, `Hᵢ = π|z|²` on `|z| ≤ R₀`, a C² quintic on
    /// `R₀ ≤ |z| ≤ 2R₀`, and the constant `4πR₀²` beyond.
    pub cutoff_radius: Option<f64>,
}

// Quintic q(u) on u ∈ [0,1] with q = (1+u)² to second order at u = 0 and
// q = 4, q' = q'' = 0 at u = 1.
const CUTOFF_Q: [f64; 6] = [1.0, 2.0, 1.0, 15.0, -26.0, 11.0];

fn cutoff_poly(u: f64) -> (f64, f64) {
    let mut q = 0.0;
    let mut dq = 0.0;
    for c in CUTOFF_Q.iter().rev() {
        dq = dq * u + q;
        q = q * u + c;
    }
    (q, dq)
}

impl Factor {
    pub fn uncut() -> Self {
        Factor { cutoff_radius: None }
    }

    pub fn with_cutoff(radius: f64) -> Self {
        Factor {
            cutoff_radius: Some(radius),
        }
    }

    /// Radial profile: `(H(ρ), H'(ρ))`.
    pub fn profile(&self, rho: f64) -> (f64, f64) {
        match self.cutoff_radius {
            Some(r0) if rho > r0 => {
                if rho >= 2.0 * r0 {
                    (4.0 * PI * r0 * r0, 0.0)
                } else {
                    let (q, dq) = cutoff_poly((rho - r0) / r0);
                    (PI * r0 * r0 * q, PI * r0 * dq)
                }
            }
            _ => (PI * rho * rho, 2.0 * PI * rho),
        }
    }

    /// `H'(ρ)/ρ`, the angular speed factor of `X_H` (equal to `2π` where
    /// the profile is uncut).
    pub fn angular_rate(&self, rho: f64) -> f64 {
        match self.cutoff_radius {
            Some(r0) if rho > r0 => self.profile(rho).1 / rho,
            _ => 2.0 * PI,
        }
    }

    #[inline]
    pub fn h(&self, z: Plane) -> f64 {
        match self.cutoff_radius {
            None => PI * z.norm_sqr(),
            Some(_) => self.profile(z.norm()).0,
        }
    }

    #[inline]
    pub fn vector_field(&self, z: Plane) -> Plane {
        let rate = match self.cutoff_radius {
            None => 2.0 * PI,
            Some(_) => self.angular_rate(z.norm()),
        };
        j0(z) * rate
    }

    /// Gradient of `H` (Euclidean), so that `dH(ξ) = ⟨∇H, ξ⟩`.
    #[inline]
    pub fn gradient(&self, z: Plane) -> Plane {
        -j0(self.vector_field(z))
    }

    /// Largest value of `‖dH‖` over the disc of the given radius.
    pub fn max_differential(&self, radius: f64) -> f64 {
        match self.cutoff_radius {
            None => 2.0 * PI * radius,
            Some(r0) if radius <= r0 => 2.0 * PI * radius,
            Some(r0) => {
                let top = radius.min(2.0 * r0);
                let steps = 2048;
                (0..=steps)
                    .map(|s| self.profile(r0 + (top - r0) * s as f64 / steps as f64).1)
                    .fold(2.0 * PI * r0, f64::max)
            }
        }
    }
}

/// A user supplied coupling function with its gradient.
pub trait SmoothCoupling: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);
}

/// Serializable description of a coupling function `f: ℝᵐ → ℝ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingDescriptor {
    /// `f(x) = a·x + b`.
    Linear {
        a: Vec<f64>,
        b: f64,
    },
    /// `f(x) = a·x + ½ xᵀβx + b` with `β` symmetric.
    PairwiseProduct {
        a: Vec<f64>,
        beta: Vec<Vec<f64>>,
        b: f64,
    },
    Custom,
}

/// The coupling `f` with `H_f = f ∘ (H₁, …, H_m)`.
#[derive(Clone, Debug)]
pub struct Coupling {
    descriptor: CouplingDescriptor,
    custom: Option<Arc<dyn SmoothCoupling>>,
}

impl Coupling {
    pub fn linear(a: Vec<f64>, b: f64) -> Self {
        Coupling {
            descriptor: CouplingDescriptor::Linear { a, b },
            custom: None,
        }
    }

    /// `f(x) = Σ xᵢ/aᵢ − 1`, whose zero set is the boundary of the ellipsoid
    /// with symplectic radii `aᵢ`.
    pub fn ellipsoid(axes: &[f64]) -> Self {
        Self::linear(axes.iter().map(|a| 1.0 / a).collect(), -1.0)
    }

    pub fn pairwise(a: Vec<f64>, beta: Vec<Vec<f64>>, b: f64) -> Self {
        Coupling {
            descriptor: CouplingDescriptor::PairwiseProduct { a, beta, b },
            custom: None,
        }
    }

    pub fn custom(f: Arc<dyn SmoothCoupling>) -> Self {
        Coupling {
            descriptor: CouplingDescriptor::Custom,
            custom: Some(f),
        }
    }

    pub fn from_descriptor(descriptor: CouplingDescriptor) -> Result<Self> {
        match descriptor {
            CouplingDescriptor::Custom => Err(Error::argument("custom couplings cannot be built from a descriptor")),
            d => Ok(Coupling {
                descriptor: d,
                custom: None,
            }),
        }
    }

    pub fn descriptor(&self) -> &CouplingDescriptor {
        &self.descriptor
    }

    pub fn dim(&self) -> usize {
        match (&self.descriptor, &self.custom) {
            (CouplingDescriptor::Linear { a, .. }, _) => a.len(),
            (CouplingDescriptor::PairwiseProduct { a, .. }, _) => a.len(),
            (_, Some(c)) => c.dim(),
            (CouplingDescriptor::Custom, None) => 0,
        }
    }

    pub fn is_linear(&self) -> bool {
        match &self.descriptor {
            CouplingDescriptor::Linear { .. } => true,
            CouplingDescriptor::PairwiseProduct { beta, .. } => beta.iter().flatten().all(|&x| x == 0.0),
            CouplingDescriptor::Custom => false,
        }
    }

    /// Symplectic radii `aᵢ` when `f = Σ xᵢ/aᵢ − 1` with positive `aᵢ`.
    pub fn ellipsoid_axes(&self) -> Option<Vec<f64>> {
        match &self.descriptor {
            CouplingDescriptor::Linear { a, b } if *b == -1.0 && a.iter().all(|&x| x > 0.0) => {
                Some(a.iter().map(|x| 1.0 / x).collect())
            }
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.descriptor {
            CouplingDescriptor::Linear { a, b } => dot(a, x) + b,
            CouplingDescriptor::PairwiseProduct { a, beta, b } => {
                let quad: f64 = beta.iter().zip(x).map(|(row, xi)| xi * dot(row, x)).sum();
                dot(a, x) + 0.5 * quad + b
            }
            CouplingDescriptor::Custom => self.custom_fn().eval(x),
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.descriptor {
            CouplingDescriptor::Linear { a, .. } => out.copy_from_slice(a),
            CouplingDescriptor::PairwiseProduct { a, beta, .. } => {
                for ((o, ai), row) in out.iter_mut().zip(a).zip(beta) {
                    *o = ai + dot(row, x);
                }
            }
            CouplingDescriptor::Custom => self.custom_fn().grad(x, out),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.grad_into(x, &mut out);
        out
    }

    /// Second derivatives, row-major `m × m`. Custom couplings use central
    /// differences of their gradient.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let m = x.len();
        match &self.descriptor {
            CouplingDescriptor::Linear { .. } => vec![0.0; m * m],
            CouplingDescriptor::PairwiseProduct { beta, .. } => beta.iter().flatten().copied().collect(),
            CouplingDescriptor::Custom => {
                let mut out = vec![0.0; m * m];
                let mut xp = x.to_vec();
                let mut gp = vec![0.0; m];
                let mut gm = vec![0.0; m];
                for j in 0..m {
                    let h = 1e-5 * (1.0 + x[j].abs());
                    xp[j] = x[j] + h;
                    self.grad_into(&xp, &mut gp);
                    xp[j] = x[j] - h;
                    self.grad_into(&xp, &mut gm);
                    xp[j] = x[j];
                    for i in 0..m {
                        out[i * m + j] = (gp[i] - gm[i]) / (2.0 * h);
                    }
                }
                out
            }
        }
    }

    fn custom_fn(&self) -> &dyn SmoothCoupling {
        self.custom.as_deref().expect("custom coupling without implementation")
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.dim() != m {
            return Err(Error::argument(format!(
                "coupling has dimension {} but the system has {m} factors",
                self.dim()
            )));
        }
        if let CouplingDescriptor::PairwiseProduct { beta, .. } = &self.descriptor {
            if beta.len() != m || beta.iter().any(|row| row.len() != m) {
                return Err(Error::argument("beta must be an m × m matrix"));
            }
            #[allow(clippy::needless_range_loop)]
            for i in 0..m {
                for j in 0..i {
                    if (beta[i][j] - beta[j][i]).abs() > 1e-12 * (1.0 + beta[i][j].abs()) {
                        return Err(Error::argument("beta must be symmetric"));
                    }
                }
            }
        }
        let finite = match &self.descriptor {
            CouplingDescriptor::Linear { a, b } => a.iter().chain([b]).all(|x| x.is_finite()),
            CouplingDescriptor::PairwiseProduct { a, beta, b } => {
                a.iter().chain(beta.iter().flatten()).chain([b]).all(|x| x.is_finite())
            }
            CouplingDescriptor::Custom => true,
        };
        if !finite {
            return Err(Error::argument("coupling coefficients must be finite"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M = ⊕ᵢ ℝ²` with `H_f = f ∘ H`.
#[derive(Clone, Debug)]
pub struct ProductSystem {
    factors: Vec<Factor>,
    coupling: Coupling,
}

impl ProductSystem {
    pub fn new(factors: Vec<Factor>, coupling: Coupling) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::argument("a product system needs at least one factor"));
        }
        for (i, fac) in factors.iter().enumerate() {
            if let Some(r) = fac.cutoff_radius {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::argument(format!(
                        "cutoff radius of factor {i} must be positive, got {r}"
                    )));
                }
            }
        }
        coupling.validate(factors.len())?;
        Ok(ProductSystem { factors, coupling })
    }

    /// All factors uncut.
    pub fn uncut(m: usize, coupling: Coupling) -> Result<Self> {
        Self::new(vec![Factor::uncut(); m], coupling)
    }

    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &Factor {
        &self.factors[i]
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.m() {
            return Err(Error::argument(format!(
                "factor index {i} out of range for m = {}",
                self.m()
            )));
        }
        Ok(())
    }

    fn check_point(&self, z: &[Plane]) -> Result<()> {
        if z.len() != self.m() {
            return Err(Error::argument(format!(
                "product point has {} components, expected {}",
                z.len(),
                self.m()
            )));
        }
        Ok(())
    }

    /// `Hᵢ(zᵢ)` (factor index is zero-based).
    pub fn factor_h(&self, i: usize, z: Plane) -> Result<f64> {
        self.check_index(i)?;
        Ok(self.factors[i].h(z))
    }

    /// `X_{Hᵢ}(zᵢ)`.
    pub fn hamiltonian_vf(&self, i: usize, z: Plane) -> Result<Plane> {
        self.check_index(i)?;
        Ok(self.factors[i].vector_field(z))
    }

    /// `X_{c·H}(z)`: the i-th component is `cᵢ · X_{Hᵢ}(zᵢ)`.
    pub fn total_vf(&self, coeffs: &[f64], z: &[Plane]) -> Result<Vec<Plane>> {
        self.check_point(z)?;
        if coeffs.len() != self.m() {
            return Err(Error::argument(format!(
                "coefficient vector has length {}, expected {}",
                coeffs.len(),
                self.m()
            )));
        }
        Ok(self
            .factors
            .iter()
            .zip(coeffs)
            .zip(z)
            .map(|((fac, c), zi)| fac.vector_field(*zi) * *c)
            .collect())
    }

    /// `λ_z(ξ) = Σᵢ ½(xᵢ dyᵢ − yᵢ dxᵢ)(ξ)`.
    pub fn liouville_eval(&self, z: &[Plane], xi: &[Plane]) -> Result<f64> {
        self.check_point(z)?;
        self.check_point(xi)?;
        Ok(z.iter().zip(xi).map(|(a, b)| liouville(*a, *b)).sum())
    }

    /// `H(z) = (H₁(z₁), …, H_m(z_m))`.
    pub fn h_vector(&self, z: &[Plane]) -> Vec<f64> {
        self.factors.iter().zip(z).map(|(f, zi)| f.h(*zi)).collect()
    }

    pub fn h_f(&self, z: &[Plane]) -> f64 {
        self.coupling.eval(&self.h_vector(z))
    }

    /// `X_{H_f}(z)` with coefficients `∇f(H(z))`.
    pub fn x_hf(&self, z: &[Plane]) -> Vec<Plane> {
        let coeffs = self.coupling.grad(&self.h_vector(z));
        self.factors
            .iter()
            .zip(&coeffs)
            .zip(z)
            .map(|((fac, c), zi)| fac.vector_field(*zi) * *c)
            .collect()
    }

    /// `λ(X_{c·H})(z) = Σ cᵢ · ½ρᵢ Hᵢ'(ρᵢ)`.
    pub fn liouville_of_vf(&self, coeffs: &[f64], z: &[Plane]) -> f64 {
        self.factors
            .iter()
            .zip(coeffs)
            .zip(z)
            .map(|((fac, c), zi)| c * liouville(*zi, fac.vector_field(*zi)))
            .sum()
    }

    /// The contact-type quantity `λ(X_{H_f})(z)`.
    pub fn liouville_of_x_hf(&self, z: &[Plane]) -> f64 {
        let coeffs = self.coupling.grad(&self.h_vector(z));
        self.liouville_of_vf(&coeffs, z)
    }

    /// `dH_f(z)[ξ]`.
    pub fn d_hf(&self, z: &[Plane], xi: &[Plane]) -> f64 {
        let coeffs = self.coupling.grad(&self.h_vector(z));
        self.factors
            .iter()
            .zip(&coeffs)
            .zip(z.iter().zip(xi))
            .map(|((fac, c), (zi, xii))| {
                let g = fac.gradient(*zi);
                c * (g.re * xii.re + g.im * xii.im)
            })
            .sum()
    }
}

#[inline]
pub fn liouville(z: Plane, xi: Plane) -> f64 {
    0.5 * (z.conj() * xi).im
}

/// The Liouville vector field `Y(z) = z/2`, characterised by `λ = ω(Y, ·)`.
#[inline]
pub fn liouville_vector(z: Plane) -> Plane {
    z * 0.5
}

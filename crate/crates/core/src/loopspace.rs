//! Band-limited loops `S¹ → ⊕ᵢ ℂ`.
//!
//! A loop with `N` samples per component represents the unique trigonometric
//! polynomial with wavenumbers in `(−N/2, N/2]` interpolating the samples at
//! `t = j/N`. Each component is complex valued, so the `N` Fourier
//! coefficients are independent; products `z̄·w` of two such loops carry
//! wavenumbers in `(−N, N)` and the trapezoid rule integrates them exactly.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{liouville, Plane, ProductSystem};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Fourier coefficients `ĉ_k = (1/N) Σ_j z_j e^{−2πijk/N}` in FFT order.
pub fn forward(samples: &[Complex64]) -> Vec<Complex64> {
    let n = samples.len();
    let mut buf = samples.to_vec();
    plan(n, false).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse of [`forward`].
pub fn inverse(coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut buf = coeffs.to_vec();
    plan(buf.len(), true).process(&mut buf);
    buf
}

/// Wavenumber of FFT slot `j` for `N` samples, in `(−N/2, N/2]`.
#[inline]
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// An m-component discretized loop; also used for tangent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Loop {
    components: Vec<Vec<Plane>>,
}

/// Tangent vectors to the loop space share the sample representation.
pub type LoopTangent = Loop;

impl Loop {
    pub fn new(components: Vec<Vec<Plane>>) -> Result<Self> {
        let n = components.first().map(Vec::len).unwrap_or(0);
        if components.is_empty() {
            return Err(Error::argument("a loop needs at least one component"));
        }
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::argument(format!(
                "sample count must be a positive power of two, got {n}"
            )));
        }
        if components.iter().any(|c| c.len() != n) {
            return Err(Error::argument("all components must share the sample count"));
        }
        Ok(Loop { components })
    }

    pub fn constant(point: &[Plane], n: usize) -> Result<Self> {
        Self::new(point.iter().map(|p| vec![*p; n]).collect())
    }

    pub fn zeros(m: usize, n: usize) -> Result<Self> {
        Self::constant(&vec![Plane::default(); m], n)
    }

    /// Samples `g(i, t)` at `t = j/N`.
    pub fn from_fn(m: usize, n: usize, mut g: impl FnMut(usize, f64) -> Plane) -> Result<Self> {
        Self::new(
            (0..m)
                .map(|i| (0..n).map(|j| g(i, j as f64 / n as f64)).collect())
                .collect(),
        )
    }

    /// Builds a loop from per-component Fourier coefficients in FFT order.
    pub fn from_fourier(coeffs: &[Vec<Complex64>]) -> Result<Self> {
        Self::new(coeffs.iter().map(|c| inverse(c)).collect())
    }

    pub fn fourier(&self) -> Vec<Vec<Complex64>> {
        self.components.iter().map(|c| forward(c)).collect()
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    pub fn n_samples(&self) -> usize {
        self.components[0].len()
    }

    pub fn components(&self) -> &[Vec<Plane>] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[Plane] {
        &self.components[i]
    }

    pub fn component_mut(&mut self, i: usize) -> &mut [Plane] {
        &mut self.components[i]
    }

    /// The product point `v(j/N)`.
    pub fn point(&self, j: usize) -> Vec<Plane> {
        self.components.iter().map(|c| c[j]).collect()
    }

    pub fn same_shape(&self, other: &Loop) -> bool {
        self.m() == other.m() && self.n_samples() == other.n_samples()
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Loop) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * alpha;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Loop {
        Loop {
            components: self
                .components
                .iter()
                .map(|c| c.iter().map(|x| x * alpha).collect())
                .collect(),
        }
    }

    /// The flat L² inner product `∫₀¹ ⟨u, w⟩ dt` (trapezoid rule).
    pub fn inner(&self, other: &Loop) -> f64 {
        let n = self.n_samples() as f64;
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum::<f64>())
            .sum::<f64>()
            / n
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// Largest sample coordinate in absolute value.
    pub fn max_abs_coordinate(&self) -> f64 {
        self.components
            .iter()
            .flatten()
            .map(|z| z.re.abs().max(z.im.abs()))
            .fold(0.0, f64::max)
    }

    /// Largest per-factor sample radius `|vᵢ(t_j)|`.
    pub fn max_radius(&self) -> f64 {
        self.components.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .flatten()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// An element `(s₁, …, s_m)` of the torus `T^m`, acting by `vᵢ(t) ↦ vᵢ(t + sᵢ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusShift {
    shifts: Vec<f64>,
}

fn reduce_mod_one(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

impl TorusShift {
    pub fn new(shifts: Vec<f64>) -> Self {
        TorusShift {
            shifts: shifts.into_iter().map(reduce_mod_one).collect(),
        }
    }

    /// The diagonal circle `(σ, …, σ)`.
    pub fn diagonal(sigma: f64, m: usize) -> Self {
        Self::new(vec![sigma; m])
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn compose(&self, other: &TorusShift) -> TorusShift {
        Self::new(self.shifts.iter().zip(&other.shifts).map(|(a, b)| a + b).collect())
    }

    pub fn inverse(&self) -> TorusShift {
        Self::new(self.shifts.iter().map(|s| -s).collect())
    }
}

/// The point `(v, τ)` of the domain of the interpolated functional, together
/// with the interpolation parameter `r ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub curve: Loop,
    pub tau: f64,
    pub r: f64,
}

impl FlowState {
    pub fn new(curve: Loop, tau: f64, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::argument(format!("r must lie in [0, 1], got {r}")));
        }
        Ok(FlowState { curve, tau, r })
    }

    pub fn with_r(&self, r: f64) -> Result<Self> {
        Self::new(self.curve.clone(), self.tau, r)
    }
}

/// Spectral derivative `∂_t v`: multiplier `2πik` on wavenumber `k`, with the
/// Nyquist mode sent to zero.
pub fn time_derivative(v: &Loop) -> LoopTangent {
    let n = v.n_samples();
    Loop {
        components: v
            .components
            .iter()
            .map(|c| {
                let mut hat = forward(c);
                for (j, h) in hat.iter_mut().enumerate() {
                    if j == n / 2 {
                        *h = Complex64::default();
                    } else {
                        *h *= Complex64::new(0.0, 2.0 * PI * wavenumber(j, n) as f64);
                    }
                }
                inverse(&hat)
            })
            .collect(),
    }
}

fn shift_component(c: &[Plane], s: f64) -> Vec<Plane> {
    let n = c.len();
    let steps = s * n as f64;
    let rounded = steps.round();
    if (steps - rounded).abs() < 1e-12 {
        let k = (rounded as i64).rem_euclid(n as i64) as usize;
        let mut out = c.to_vec();
        out.rotate_left(k);
        return out;
    }
    let mut hat = forward(c);
    for (j, h) in hat.iter_mut().enumerate() {
        let phase = 2.0 * PI * wavenumber(j, n) as f64 * s;
        *h *= Complex64::from_polar(1.0, phase);
    }
    inverse(&hat)
}

/// `(s_* v)ᵢ(t) = vᵢ(t + sᵢ)`.
pub fn reparametrize(v: &Loop, s: &TorusShift) -> Result<Loop> {
    if s.shifts.len() != v.m() {
        return Err(Error::argument(format!(
            "torus shift has {} entries for a loop with {} components",
            s.shifts.len(),
            v.m()
        )));
    }
    Ok(Loop {
        components: v
            .components
            .iter()
            .zip(&s.shifts)
            .map(|(c, si)| shift_component(c, *si))
            .collect(),
    })
}

/// `H(v(t_j))` for every sample.
pub fn h_trace(sys: &ProductSystem, v: &Loop) -> Vec<Vec<f64>> {
    (0..v.n_samples())
        .map(|j| {
            sys.factors()
                .iter()
                .zip(&v.components)
                .map(|(f, c)| f.h(c[j]))
                .collect()
        })
        .collect()
}

/// `H̄(v) = ∫₀¹ H(v(t)) dt`.
pub fn average_h(sys: &ProductSystem, v: &Loop) -> Vec<f64> {
    let n = v.n_samples() as f64;
    sys.factors()
        .iter()
        .zip(&v.components)
        .map(|(f, c)| c.iter().map(|z| f.h(*z)).sum::<f64>() / n)
        .collect()
}

/// `∫₀¹ f(H(v(t))) dt`.
pub fn average_fh(sys: &ProductSystem, v: &Loop) -> f64 {
    let f = sys.coupling();
    let trace = h_trace(sys, v);
    trace.iter().map(|h| f.eval(h)).sum::<f64>() / trace.len() as f64
}

/// `∫_{S¹} v*λ = Σᵢ ∫₀¹ λ(vᵢ)[∂_t vᵢ] dt`.
pub fn area(v: &Loop) -> f64 {
    let dv = time_derivative(v);
    area_with_derivative(v, &dv)
}

pub(crate) fn area_with_derivative(v: &Loop, dv: &Loop) -> f64 {
    let n = v.n_samples() as f64;
    v.components
        .iter()
        .zip(&dv.components)
        .map(|(c, d)| c.iter().zip(d).map(|(z, xi)| liouville(*z, *xi)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Diameter of the sampled image `{H(v(t_j))}` in the Euclidean norm.
pub fn oscillation(sys: &ProductSystem, v: &Loop) -> f64 {
    oscillation_of_trace(&h_trace(sys, v))
}

pub(crate) fn oscillation_of_trace(trace: &[Vec<f64>]) -> f64 {
    let m = trace.first().map(Vec::len).unwrap_or(0);
    if m == 1 {
        let (lo, hi) = trace.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| {
            (lo.min(h[0]), hi.max(h[0]))
        });
        return hi - lo;
    }
    if m == 2 && trace.len() > 4096 {
        let pts: Vec<[f64; 2]> = trace.iter().map(|h| [h[0], h[1]]).collect();
        let hull = convex_hull(pts);
        return max_pairwise(&hull.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
    }
    max_pairwise(trace)
}

fn max_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (a, p) in points.iter().enumerate() {
        for q in &points[a + 1..] {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

// Andrew's monotone chain.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], *p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Deterministic pseudo-random loop whose mode-`k` coefficients are standard
/// complex normals scaled by `amplitude · (1 + |k|)^{−decay_p}`.
pub fn random_loop(sys: &ProductSystem, n_samples: usize, seed: u64, decay_p: f64, amplitude: f64) -> Result<Loop> {
    if !(decay_p >= 2.0) {
        return Err(Error::argument(format!("decay exponent must be ≥ 2, got {decay_p}")));
    }
    if n_samples == 0 || !n_samples.is_power_of_two() {
        return Err(Error::argument(format!(
            "sample count must be a positive power of two, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<Vec<Complex64>> = (0..sys.m())
        .map(|_| {
            (0..n_samples)
                .map(|j| {
                    let k = wavenumber(j, n_samples).unsigned_abs() as f64;
                    let scale = amplitude * (1.0 + k).powf(-decay_p);
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re, im) * scale
                })
                .collect()
        })
        .collect();
    Loop::from_fourier(&coeffs)
}

/// Sample-based JSON form of a loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopDocument {
    pub n_samples: usize,
    pub components: Vec<Vec<[f64; 2]>>,
}

/// Coefficient-based JSON form of a loop (FFT order, normalized by `1/N`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierLoopDocument {
    pub n_samples: usize,
    pub fourier: Vec<Vec<[f64; 2]>>,
}

fn to_pairs(c: &[Complex64]) -> Vec<[f64; 2]> {
    c.iter().map(|z| [z.re, z.im]).collect()
}

fn from_pairs(c: &[[f64; 2]]) -> Vec<Complex64> {
    c.iter().map(|p| Complex64::new(p[0], p[1])).collect()
}

impl From<&Loop> for LoopDocument {
    fn from(v: &Loop) -> Self {
        LoopDocument {
            n_samples: v.n_samples(),
            components: v.components.iter().map(|c| to_pairs(c)).collect(),
        }
    }
}

impl TryFrom<LoopDocument> for Loop {
    type Error = Error;

    fn try_from(doc: LoopDocument) -> Result<Loop> {
        let v = Loop::new(doc.components.iter().map(|c| from_pairs(c)).collect())?;
        if v.n_samples() != doc.n_samples {
            return Err(Error::argument("n_samples does not match the component length"));
        }
        Ok(v)
    }
}

impl From<&Loop> for FourierLoopDocument {
    fn from(v: &Loop) -> Self {
        FourierLoopDocument {
            n_samples: v.n_samples(),
            fourier: v.fourier().iter().map(|c| to_pairs(c)).collect(),
        }
    }
}

impl TryFrom<FourierLoopDocument> for Loop {
    type Error = Error;

    fn try_from(doc: FourierLoopDocument) -> Result<Loop> {
        let coeffs: Vec<Vec<Complex64>> = doc.fourier.iter().map(|c| from_pairs(c)).collect();
        let v = Loop::from_fourier(&coeffs)?;
        if v.n_samples() != doc.n_samples {
            return Err(Error::argument("n_samples does not match the coefficient length"));
        }
        Ok(v)
    }
}

/// Writes `t, H_1, …, H_m, H_f` per sample.
pub fn write_h_trace_csv<W: Write>(sys: &ProductSystem, v: &Loop, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=sys.m()).map(|i| format!("H_{i}")));
    header.push("H_f".into());
    w.write_record(&header)?;
    let n = v.n_samples();
    for (j, h) in h_trace(sys, v).iter().enumerate() {
        let mut row = vec![(j as f64 / n as f64).to_string()];
        row.extend(h.iter().map(|x| x.to_string()));
        row.push(sys.coupling().eval(h).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A component traversing the circle `π|z|² = h` `k` times, starting at angle
/// `2πφ`.
pub fn circle(h: f64, k: i64, phase: f64) -> impl Fn(f64) -> Plane {
    let rho = (h.max(0.0) / PI).sqrt();
    move |t| Plane::from_polar(rho, 2.0 * PI * (k as f64 * t + phase))
}

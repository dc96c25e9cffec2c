//! Interaction kernels `F₀`, the radial mollifier `ψ`, the blob function `φ`
//! and the mollified kernels `F₀ * ψ_δ`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_ball, unit_ball_volume, unit_sphere_area, Tolerance};

/// Number of radial nodes in the tabulated mollified singular kernels.
pub const RADIAL_TABLE_POINTS: usize = 4096;

/// Absolute tolerance used for mollified-kernel quadrature.
pub const CONVOLUTION_TOL: f64 = 1e-8;

/// String ids accepted by [`KernelSpec::from_id`].
pub const KERNEL_IDS: [&str; 5] = ["zero", "tanh-gauss", "newton", "coulomb", "vortex"];

// ---------------------------------------------------------------------------
// Mollifier ψ
// ---------------------------------------------------------------------------

fn psi_profile(r: f64, dim: usize) -> f64 {
    if r > 1.0 {
        0.0
    } else {
        (1.0 + (PI * r).cos()).powi(dim as i32 + 2)
    }
}

/// Normalization constant `C` such that `∫_{|x|≤1} C(1+cos π|x|)^{d+2} dx = 1`,
/// by radial quadrature.
pub fn psi_normalization(dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let radial = integrate(
        |r| psi_profile(r, dim) * r.powi(dim as i32 - 1),
        0.0,
        1.0,
        Tolerance {
            abs: 1e-14,
            rel: 1e-12,
        },
    )?;
    Ok(1.0 / (unit_sphere_area(dim) * radial))
}

/// Evaluates the unit mollifier `ψ(x) = C(1+cos π|x|)^{d+2}` for `|x| ≤ 1`.
pub fn eval_psi(x: &[f64], normalization: f64) -> f64 {
    let r = norm(x);
    normalization * psi_profile(r, x.len())
}

/// Radial mollifier of length `delta`: `ψ_δ(x) = δ^{-d} ψ(x/δ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub delta: f64,
    pub dim: usize,
    pub normalization: f64,
}

impl MollifierSpec {
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(
                "delta",
                format!("must be positive, got {delta}"),
            ));
        }
        Ok(MollifierSpec {
            delta,
            dim,
            normalization: psi_normalization(dim)?,
        })
    }

    /// Unit-scale profile `ψ(x)`.
    pub fn eval_unit(&self, x: &[f64]) -> f64 {
        eval_psi(x, self.normalization)
    }

    /// Rescaled profile `ψ_δ(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = norm(x) / self.delta;
        self.normalization * psi_profile(r, self.dim) / self.delta.powi(self.dim as i32)
    }
}

/// Mollification length `δ_h = h^κ`.
pub fn mollification_length(h: f64, kappa: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("must be positive, got {h}")));
    }
    if !(kappa > 0.5 && kappa < 1.0) {
        return Err(Error::invalid(
            "kappa",
            format!("must lie in (1/2, 1), got {kappa}"),
        ));
    }
    Ok(h.powf(kappa))
}

// ---------------------------------------------------------------------------
// Blob φ
// ---------------------------------------------------------------------------

/// The one-dimensional factor `b(u) = c·exp(-1/(1-(2u)²))` on `|u| < 1/2`.
#[derive(Clone, Debug)]
pub struct Bump1d {
    pub normalization: f64,
    /// `∫ b²`
    pub l2_sq: f64,
    /// `∫ b'²`
    pub grad_l2_sq: f64,
    /// `max |b'|`
    pub grad_sup: f64,
}

fn raw_bump(u: f64) -> f64 {
    let s = 1.0 - 4.0 * u * u;
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

fn raw_bump_derivative(u: f64) -> f64 {
    let s = 1.0 - 4.0 * u * u;
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp() * (-8.0 * u / (s * s))
    }
}

impl Bump1d {
    fn compute() -> Result<Self> {
        let tol = Tolerance {
            abs: 1e-15,
            rel: 1e-13,
        };
        let mass = integrate(raw_bump, -0.5, 0.5, tol)?;
        let c = 1.0 / mass;
        let l2_sq = integrate(|u| (c * raw_bump(u)).powi(2), -0.5, 0.5, tol)?;
        let grad_l2_sq = integrate(|u| (c * raw_bump_derivative(u)).powi(2), -0.5, 0.5, tol)?;

        // |b'| is unimodal on (0, 1/2): coarse scan, then golden-section refinement.
        let g = |u: f64| (c * raw_bump_derivative(u)).abs();
        let n = 2000;
        let mut best = 0;
        for k in 1..n {
            if g(0.5 * k as f64 / n as f64) > g(0.5 * best as f64 / n as f64) {
                best = k;
            }
        }
        let (mut lo, mut hi) = (
            0.5 * (best as f64 - 1.0) / n as f64,
            0.5 * (best as f64 + 1.0) / n as f64,
        );
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if g(m1) < g(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        Ok(Bump1d {
            normalization: c,
            l2_sq,
            grad_l2_sq,
            grad_sup: g(0.5 * (lo + hi)),
        })
    }

    /// Shared reference bump; the quadrature runs once per process.
    pub fn reference() -> &'static Bump1d {
        static BUMP: OnceLock<Bump1d> = OnceLock::new();
        BUMP.get_or_init(|| Bump1d::compute().expect("bump quadrature converges"))
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.normalization * raw_bump(u)
    }

    pub fn derivative(&self, u: f64) -> f64 {
        self.normalization * raw_bump_derivative(u)
    }

    pub fn sup(&self) -> f64 {
        self.eval(0.0)
    }
}

/// Tensor-product blob `φ(x) = Π b(x_k)` rescaled to width `epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub epsilon: f64,
    pub dim: usize,
}

impl BlobSpec {
    pub fn new(dim: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(
                "epsilon",
                format!("must be positive, got {epsilon}"),
            ));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        Ok(BlobSpec { epsilon, dim })
    }

    /// One-dimensional factor of `φ_ε`: `b(u/ε)/ε`.
    pub fn eval_axis(&self, u: f64) -> f64 {
        Bump1d::reference().eval(u / self.epsilon) / self.epsilon
    }

    /// Unscaled `φ(x)`.
    pub fn eval_unit(&self, x: &[f64]) -> f64 {
        let b = Bump1d::reference();
        x.iter().map(|&u| b.eval(u)).product()
    }

    /// `‖φ‖_∞ = b(0)^d`
    pub fn sup_norm(&self) -> f64 {
        Bump1d::reference().sup().powi(self.dim as i32)
    }

    /// `max_k ‖∂φ/∂x_k‖_∞` of the unscaled blob.
    pub fn max_partial_sup(&self) -> f64 {
        let b = Bump1d::reference();
        b.grad_sup * b.sup().powi(self.dim as i32 - 1)
    }

    /// `‖∇φ‖²` of the unscaled blob.
    pub fn grad_l2_sq(&self) -> f64 {
        let b = Bump1d::reference();
        self.dim as f64 * b.grad_l2_sq * b.l2_sq.powi(self.dim as i32 - 1)
    }

    /// `‖∇φ_ε‖² = ε^{-d-2} ‖∇φ‖²`.
    pub fn scaled_grad_l2_sq(&self) -> f64 {
        self.grad_l2_sq() * self.epsilon.powi(-(self.dim as i32) - 2)
    }
}

/// Evaluates `φ_ε(x) = ε^{-d} φ(x/ε)`.
pub fn eval_blob(x: &[f64], spec: &BlobSpec) -> f64 {
    x.iter().map(|&u| spec.eval_axis(u)).product()
}

/// Blob width `ε_h = h^{q₀}`, with `q₀ = 1/(6d)` unless overridden.
pub fn blob_width(h: f64, dim: usize, q0: Option<f64>) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("must be positive, got {h}")));
    }
    let q = q0.unwrap_or(1.0 / (6.0 * dim as f64));
    if !(q > 0.0) {
        return Err(Error::invalid("q0", format!("must be positive, got {q}")));
    }
    Ok(h.powf(q))
}

// ---------------------------------------------------------------------------
// Potentials and kernels
// ---------------------------------------------------------------------------

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `C_d = 1/(d(d-2)α_d)` for `d ≥ 3`.
pub fn newton_constant(dim: usize) -> f64 {
    1.0 / (dim as f64 * (dim as f64 - 2.0) * unit_ball_volume(dim))
}

/// Fundamental potential `Φ`: `-(1/2π) ln|x|` in 2-D, `C_d/|x|^{d-2}` for `d ≥ 3`.
pub fn eval_potential(x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Domain(format!(
            "potential requires d >= 2, got d = {d}"
        )));
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::Domain("potential is singular at x = 0".into()));
    }
    Ok(if d == 2 {
        -r.ln() / (2.0 * PI)
    } else {
        newton_constant(d) / r.powi(d as i32 - 2)
    })
}

/// Bounded Lipschitz kernel families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    Zero,
    /// `F₀(x)_k = -tanh(x_k)·exp(-|x|²)`
    TanhGauss,
    /// Spatially constant field; not odd, used to check that mollification
    /// preserves constants.
    Constant(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelVariant {
    BoundedLipschitz(KernelFamily),
    /// Attractive `∇Φ` (Keller–Segel).
    Newton,
    /// Repulsive `-∇Φ` (drift-diffusion).
    Coulomb,
    /// Two-dimensional Biot–Savart kernel `-∇^⊥Φ`, `∇^⊥ = (∂₂, -∂₁)`.
    Vortex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub dim: usize,
    pub variant: KernelVariant,
    /// `L_F`; infinite for singular variants.
    pub lipschitz_bound: f64,
    /// `sup |F₀|`; infinite for singular variants.
    pub sup_bound: f64,
    /// `U_F`, stored as metadata only.
    pub regularity_bound: Option<f64>,
}

impl KernelSpec {
    pub fn zero(dim: usize) -> Self {
        KernelSpec {
            dim,
            variant: KernelVariant::BoundedLipschitz(KernelFamily::Zero),
            lipschitz_bound: 0.0,
            sup_bound: 0.0,
            regularity_bound: Some(0.0),
        }
    }

    pub fn tanh_gauss(dim: usize) -> Self {
        // Entrywise Jacobian bound 1 + 2 max_t |t| e^{-t²} = 1 + √(2/e);
        // the Frobenius norm is then at most d times that.
        let entry = 1.0 + (2.0 / std::f64::consts::E).sqrt();
        KernelSpec {
            dim,
            variant: KernelVariant::BoundedLipschitz(KernelFamily::TanhGauss),
            lipschitz_bound: dim as f64 * entry,
            sup_bound: (dim as f64).sqrt(),
            regularity_bound: None,
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let sup = norm(&value);
        KernelSpec {
            dim: value.len(),
            variant: KernelVariant::BoundedLipschitz(KernelFamily::Constant(value)),
            lipschitz_bound: 0.0,
            sup_bound: sup,
            regularity_bound: None,
        }
    }

    fn singular(dim: usize, variant: KernelVariant) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(
                "dim",
                format!("singular kernels need d >= 2, got {dim}"),
            ));
        }
        if variant == KernelVariant::Vortex && dim != 2 {
            return Err(Error::invalid(
                "dim",
                format!("the vortex kernel is two-dimensional, got {dim}"),
            ));
        }
        Ok(KernelSpec {
            dim,
            variant,
            lipschitz_bound: f64::INFINITY,
            sup_bound: f64::INFINITY,
            regularity_bound: None,
        })
    }

    pub fn newton(dim: usize) -> Result<Self> {
        Self::singular(dim, KernelVariant::Newton)
    }

    pub fn coulomb(dim: usize) -> Result<Self> {
        Self::singular(dim, KernelVariant::Coulomb)
    }

    pub fn vortex() -> Self {
        Self::singular(2, KernelVariant::Vortex).expect("d = 2")
    }

    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        match id {
            "zero" => Ok(Self::zero(dim)),
            "tanh-gauss" => Ok(Self::tanh_gauss(dim)),
            "newton" => Self::newton(dim),
            "coulomb" => Self::coulomb(dim),
            "vortex" => {
                if dim != 2 {
                    return Err(Error::invalid(
                        "dim",
                        format!("the vortex kernel is two-dimensional, got {dim}"),
                    ));
                }
                Ok(Self::vortex())
            }
            other => Err(Error::invalid(
                "kernel",
                format!(
                    "unknown kernel id `{other}`; valid ids: {}",
                    KERNEL_IDS.join(", ")
                ),
            )),
        }
    }

    pub fn id(&self) -> &'static str {
        match &self.variant {
            KernelVariant::BoundedLipschitz(KernelFamily::Zero) => "zero",
            KernelVariant::BoundedLipschitz(KernelFamily::TanhGauss) => "tanh-gauss",
            KernelVariant::BoundedLipschitz(KernelFamily::Constant(_)) => "constant",
            KernelVariant::Newton => "newton",
            KernelVariant::Coulomb => "coulomb",
            KernelVariant::Vortex => "vortex",
        }
    }

    pub fn is_singular(&self) -> bool {
        !matches!(self.variant, KernelVariant::BoundedLipschitz(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(
            self.variant,
            KernelVariant::BoundedLipschitz(KernelFamily::Zero)
        )
    }

    pub fn is_odd(&self) -> bool {
        !matches!(
            self.variant,
            KernelVariant::BoundedLipschitz(KernelFamily::Constant(_))
        )
    }

    /// Writes `F₀(x)` into `out`. Singular variants fail at `x = 0`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.variant {
            KernelVariant::BoundedLipschitz(KernelFamily::Zero) => {
                out.iter_mut().for_each(|o| *o = 0.0)
            }
            KernelVariant::BoundedLipschitz(KernelFamily::TanhGauss) => {
                let e = (-x.iter().map(|v| v * v).sum::<f64>()).exp();
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -v.tanh() * e;
                }
            }
            KernelVariant::BoundedLipschitz(KernelFamily::Constant(v)) => out.copy_from_slice(v),
            KernelVariant::Newton | KernelVariant::Coulomb | KernelVariant::Vortex => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                if r2 == 0.0 {
                    return Err(Error::Domain(format!(
                        "{} kernel is singular at x = 0",
                        self.id()
                    )));
                }
                let r = r2.sqrt();
                // |∇Φ| = 1/(S_{d-1} r^{d-1})
                let magnitude = 1.0 / (unit_sphere_area(self.dim) * r.powi(self.dim as i32 - 1));
                self.radial_field(x, r, magnitude, out);
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Assembles the vector field of a singular variant from the radial
    /// magnitude `g(r) = |∇Φ|` (or its mollified counterpart).
    fn radial_field(&self, x: &[f64], r: f64, magnitude: f64, out: &mut [f64]) {
        if r == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let s = magnitude / r;
        match self.variant {
            KernelVariant::Newton => out.iter_mut().zip(x).for_each(|(o, &v)| *o = -s * v),
            KernelVariant::Coulomb => out.iter_mut().zip(x).for_each(|(o, &v)| *o = s * v),
            KernelVariant::Vortex => {
                out[0] = s * x[1];
                out[1] = -s * x[0];
            }
            KernelVariant::BoundedLipschitz(_) => unreachable!("radial_field on a bounded family"),
        }
    }
}

// ---------------------------------------------------------------------------
// Mollified kernels F₀ * ψ_δ
// ---------------------------------------------------------------------------

/// Scale-free profile `G(u) = m(u)/u^{d-1}` on `u ∈ [0, 1]`, where `m(u)` is
/// the mollifier mass inside radius `u`. For a singular variant,
/// `|F_{0,δ}(x)| = G(|x|/δ) / (S_{d-1} δ^{d-1})` when `|x| < δ`.
#[derive(Clone, Debug)]
pub struct RadialTable {
    dim: usize,
    values: Vec<f64>,
}

impl RadialTable {
    pub fn build(dim: usize) -> Result<Self> {
        let c = psi_normalization(dim)?;
        let area = unit_sphere_area(dim);
        let n = RADIAL_TABLE_POINTS;
        let step = 1.0 / (n - 1) as f64;
        let mut values = Vec::with_capacity(n);
        values.push(0.0);
        let mut mass = 0.0;
        for k in 1..n {
            let (a, b) = ((k - 1) as f64 * step, k as f64 * step);
            mass += area
                * c
                * integrate(
                    |s| psi_profile(s, dim) * s.powi(dim as i32 - 1),
                    a,
                    b,
                    Tolerance {
                        abs: 1e-16,
                        rel: 1e-13,
                    },
                )?;
            let u = b;
            values.push(mass / u.powi(dim as i32 - 1));
        }
        // The enclosed mass at u = 1 is one up to quadrature error.
        let last = *values.last().unwrap();
        if (last - 1.0).abs() > 1e-9 {
            return Err(Error::Quadrature {
                estimate: last,
                error: (last - 1.0).abs(),
                tolerance: 1e-9,
            });
        }
        Ok(RadialTable { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cubic (four-point Lagrange) interpolation of `G(u)`; `G = 1` for `u ≥ 1`.
    pub fn profile(&self, u: f64) -> f64 {
        if u >= 1.0 {
            return 1.0;
        }
        let n = self.values.len();
        let pos = u * (n - 1) as f64;
        let i = (pos.floor() as usize).clamp(1, n - 3);
        let t = pos - i as f64;
        let (p0, p1, p2, p3) = (
            self.values[i - 1],
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
        );
        // nodes at -1, 0, 1, 2
        let l0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let l1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let l2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let l3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        p0 * l0 + p1 * l1 + p2 * l2 + p3 * l3
    }

    pub fn max_profile(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
enum MollifiedRepr {
    Zero,
    Quadrature,
    Radial(RadialTable),
}

/// `F_{0,δ} = F₀ * ψ_δ`, evaluated by table lookup for singular variants and by
/// ball quadrature for bounded families.
#[derive(Clone, Debug)]
pub struct MollifiedKernel {
    kernel: KernelSpec,
    mollifier: MollifierSpec,
    repr: MollifiedRepr,
}

impl MollifiedKernel {
    pub fn new(kernel: KernelSpec, delta: f64) -> Result<Self> {
        let mollifier = MollifierSpec::new(kernel.dim, delta)?;
        let repr = if kernel.is_zero() {
            MollifiedRepr::Zero
        } else if kernel.is_singular() {
            MollifiedRepr::Radial(RadialTable::build(kernel.dim)?)
        } else {
            MollifiedRepr::Quadrature
        };
        Ok(MollifiedKernel {
            kernel,
            mollifier,
            repr,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mollifier(&self) -> &MollifierSpec {
        &self.mollifier
    }

    pub fn delta(&self) -> f64 {
        self.mollifier.delta
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.repr {
            MollifiedRepr::Zero => {
                out.iter_mut().for_each(|o| *o = 0.0);
                Ok(())
            }
            MollifiedRepr::Quadrature => {
                let v = self.eval_direct(x)?;
                out.copy_from_slice(&v);
                Ok(())
            }
            MollifiedRepr::Radial(table) => {
                let r = norm(x);
                let d = self.kernel.dim as i32;
                let magnitude = if r >= self.mollifier.delta {
                    1.0 / (unit_sphere_area(self.kernel.dim) * r.powi(d - 1))
                } else {
                    table.profile(r / self.mollifier.delta)
                        / (unit_sphere_area(self.kernel.dim) * self.mollifier.delta.powi(d - 1))
                };
                self.kernel.radial_field(x, r, magnitude, out);
                Ok(())
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.kernel.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Direct ball quadrature of `∫ F₀(x-y) ψ_δ(y) dy`. This is the oracle for
    /// the tabulated path; for singular variants it is only reliable when the
    /// singularity lies outside the mollifier support (`|x| > δ`).
    pub fn eval_direct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_direct_with_tolerance(x, CONVOLUTION_TOL * 0.1)
    }

    /// [`Self::eval_direct`] with an explicit absolute tolerance.
    pub fn eval_direct_with_tolerance(&self, x: &[f64], tol: f64) -> Result<Vec<f64>> {
        let d = self.kernel.dim;
        let mut shifted = vec![0.0; d];
        let mut value = vec![0.0; d];
        let mut failure = None;
        let res = integrate_ball(d, self.mollifier.delta, d, tol, |y, out| {
            for k in 0..d {
                shifted[k] = x[k] - y[k];
            }
            let w = self.mollifier.eval(y);
            match self.kernel.eval_into(&shifted, &mut value) {
                Ok(()) => {
                    for k in 0..d {
                        out[k] = w * value[k];
                    }
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(res),
        }
    }

    /// `sup_x |F_{0,δ}(x)|`.
    pub fn sup_bound(&self) -> f64 {
        match &self.repr {
            MollifiedRepr::Zero => 0.0,
            MollifiedRepr::Quadrature => self.kernel.sup_bound,
            MollifiedRepr::Radial(table) => {
                let d = self.kernel.dim as i32;
                table.max_profile()
                    / (unit_sphere_area(self.kernel.dim) * self.mollifier.delta.powi(d - 1))
            }
        }
    }

    /// Writes the radial magnitude table `(radius, |F_{0,δ}|)` as CSV.
    /// Only singular variants carry a table.
    pub fn write_radial_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let MollifiedRepr::Radial(table) = &self.repr else {
            return Err(Error::invalid(
                "kernel",
                "only singular kernels are tabulated",
            ));
        };
        let d = self.kernel.dim as i32;
        let scale = 1.0 / (unit_sphere_area(self.kernel.dim) * self.mollifier.delta.powi(d - 1));
        writeln!(w, "radius,value")?;
        let n = table.values.len();
        for (k, g) in table.values.iter().enumerate() {
            let r = self.mollifier.delta * k as f64 / (n - 1) as f64;
            writeln!(w, "{r:.17e},{:.17e}", g * scale)?;
        }
        Ok(())
    }
}

/// Either the raw kernel or its mollification: the pair interaction used by
/// the particle integrators.
#[derive(Clone, Debug)]
pub enum Interaction {
    Exact(KernelSpec),
    Mollified(MollifiedKernel),
}

impl Interaction {
    pub fn dim(&self) -> usize {
        match self {
            Interaction::Exact(k) => k.dim,
            Interaction::Mollified(m) => m.dim(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Interaction::Exact(k) => k.is_zero(),
            Interaction::Mollified(m) => m.kernel().is_zero(),
        }
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Interaction::Exact(k) => k.eval_into(x, out),
            Interaction::Mollified(m) => m.eval_into(x, out),
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match self {
            Interaction::Exact(k) => k.sup_bound,
            Interaction::Mollified(m) => m.sup_bound(),
        }
    }
}

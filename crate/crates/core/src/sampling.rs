//! Lattice (Chorin) initial data: particles on `hθ ∈ D`, `θ ∈ Z^d`, carrying
//! mass `ρ₀(hθ)·h^d`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Bump1d;

/// Relative slack for lattice membership of points lying on `∂D`.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Closed axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid(
                "box",
                "lo and hi must be nonempty and of equal length",
            ));
        }
        for (k, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::invalid(
                    "box",
                    format!("axis {k}: need finite lo < hi, got [{a}, {b}]"),
                ));
            }
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.extent(k)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&a, &b))| v >= a && v <= b)
    }

    /// The box grown by `r` on every side.
    pub fn fattened(&self, r: f64) -> BoxDomain {
        BoxDomain {
            lo: self.lo.iter().map(|a| a - r).collect(),
            hi: self.hi.iter().map(|b| b + r).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    Uniform,
    Bump,
    Custom,
}

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A compactly supported initial density `ρ₀` with its declared metadata.
#[derive(Clone)]
pub struct InitialDensity {
    pub kind: DensityKind,
    pub support: BoxDomain,
    /// `L_{ρ₀}`; infinite when `ρ₀` is not Lipschitz on `R^d`.
    pub lipschitz_constant: f64,
    /// `‖ρ₀‖_∞`
    pub sup_norm: f64,
    pub declared_mass: f64,
    evaluator: Evaluator,
}

impl fmt::Debug for InitialDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialDensity")
            .field("kind", &self.kind)
            .field("support", &self.support)
            .field("lipschitz_constant", &self.lipschitz_constant)
            .field("sup_norm", &self.sup_norm)
            .field("declared_mass", &self.declared_mass)
            .finish_non_exhaustive()
    }
}

pub const DENSITY_IDS: [&str; 2] = ["bump", "uniform"];

impl InitialDensity {
    /// Uniform density `1/|D|` on the closed box. It is discontinuous across
    /// `∂D`, so its Lipschitz constant is reported as infinite.
    pub fn uniform(support: BoxDomain) -> Self {
        let value = 1.0 / support.volume();
        let domain = support.clone();
        InitialDensity {
            kind: DensityKind::Uniform,
            lipschitz_constant: f64::INFINITY,
            sup_norm: value,
            declared_mass: 1.0,
            evaluator: Arc::new(move |x| if domain.contains(x) { value } else { 0.0 }),
            support,
        }
    }

    /// Smooth compactly supported product bump filling the box, mass one.
    pub fn bump(support: BoxDomain) -> Self {
        let b = Bump1d::reference();
        let d = support.dim();
        let center = support.center();
        let extents: Vec<f64> = (0..d).map(|k| support.extent(k)).collect();
        let peak: f64 = extents.iter().map(|l| b.sup() / l).product();
        // |∂_k ρ| ≤ max|b'|/L_k² · Π_{j≠k} b(0)/L_j
        let lipschitz = (0..d)
            .map(|k| {
                let partial =
                    b.grad_sup / (extents[k] * extents[k]) * peak / (b.sup() / extents[k]);
                partial * partial
            })
            .sum::<f64>()
            .sqrt();
        let (c, l) = (center.clone(), extents.clone());
        InitialDensity {
            kind: DensityKind::Bump,
            lipschitz_constant: lipschitz,
            sup_norm: peak,
            declared_mass: 1.0,
            evaluator: Arc::new(move |x| {
                let b = Bump1d::reference();
                x.iter()
                    .zip(c.iter().zip(&l))
                    .map(|(&v, (&m, &len))| b.eval((v - m) / len) / len)
                    .product()
            }),
            support,
        }
    }

    /// User-supplied density. The evaluator is clipped to the support box.
    pub fn custom<F>(
        support: BoxDomain,
        lipschitz_constant: f64,
        sup_norm: f64,
        declared_mass: f64,
        f: F,
    ) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let domain = support.clone();
        InitialDensity {
            kind: DensityKind::Custom,
            lipschitz_constant,
            sup_norm,
            declared_mass,
            evaluator: Arc::new(move |x| {
                if domain.contains(x) {
                    f(x).max(0.0)
                } else {
                    0.0
                }
            }),
            support,
        }
    }

    pub fn from_id(id: &str, support: BoxDomain) -> Result<Self> {
        match id {
            "bump" => Ok(Self::bump(support)),
            "uniform" => Ok(Self::uniform(support)),
            other => Err(Error::invalid(
                "density",
                format!(
                    "unknown density id `{other}`; valid ids: {}",
                    DENSITY_IDS.join(", ")
                ),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn is_lipschitz(&self) -> bool {
        self.lipschitz_constant.is_finite()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.evaluator)(x)
    }

    /// Lattice point of maximal density (ties: nearest the box centre, then
    /// lowest index).
    pub fn mode_index(&self, sample: &LatticeSample) -> usize {
        let center = self.support.center();
        let mut best = 0;
        let mut key = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..sample.len() {
            let rho = sample.density_values[i];
            let dist: f64 = sample
                .position(i)
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if rho > key.0 || (rho == key.0 && dist < key.1) {
                best = i;
                key = (rho, dist);
            }
        }
        best
    }
}

/// Lattice initial data `{hθ_i}` with weights `w_i = ρ₀(hθ_i) h^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSample {
    pub h: f64,
    pub dim: usize,
    /// Flattened integer indices `θ_i`, `dim` entries per particle.
    pub indices: Vec<i64>,
    /// Flattened positions `hθ_i`.
    pub positions: Vec<f64>,
    /// `ρ₀(hθ_i)`
    pub density_values: Vec<f64>,
    pub weights: Vec<f64>,
    /// `L_D = |D|`
    pub lower_volume: f64,
    /// `U_D = |D₁|`, the radius-one `|·|_∞` fattening of `D`.
    pub upper_volume: f64,
}

/// Enumerates `Θ_h = {θ ∈ Z^d : hθ ∈ D}` in lexicographic order and assigns the
/// density weights.
pub fn build_lattice_sample(density: &InitialDensity, h: f64) -> Result<LatticeSample> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::invalid(
            "h",
            format!("must satisfy 0 < h < 1, got {h}"),
        ));
    }
    let d = density.dim();
    let support = &density.support;
    let mut ranges = Vec::with_capacity(d);
    for k in 0..d {
        let slack = MEMBERSHIP_SLACK * (1.0 + support.lo[k].abs().max(support.hi[k].abs()) / h);
        let lo = (support.lo[k] / h - slack).ceil() as i64;
        let hi = (support.hi[k] / h + slack).floor() as i64;
        if hi < lo {
            return Err(Error::EmptySample { h });
        }
        ranges.push((lo, hi));
    }
    let count: usize = ranges.iter().map(|(a, b)| (b - a + 1) as usize).product();
    let mut indices = Vec::with_capacity(count * d);
    let mut positions = Vec::with_capacity(count * d);
    let mut density_values = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    let hd = h.powi(d as i32);

    let mut theta: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let mut point = vec![0.0; d];
    'outer: loop {
        // Points within rounding of ∂D are snapped into D.
        for (k, p) in point.iter_mut().enumerate() {
            *p = (h * theta[k] as f64).clamp(support.lo[k], support.hi[k]);
        }
        let rho = density.eval(&point);
        indices.extend_from_slice(&theta);
        positions.extend_from_slice(&point);
        density_values.push(rho);
        weights.push(rho * hd);

        // lexicographic increment, last axis fastest
        let mut k = d;
        loop {
            if k == 0 {
                break 'outer;
            }
            k -= 1;
            if theta[k] < ranges[k].1 {
                theta[k] += 1;
                for j in k + 1..d {
                    theta[j] = ranges[j].0;
                }
                break;
            }
        }
    }

    Ok(LatticeSample {
        h,
        dim: d,
        indices,
        positions,
        density_values,
        weights,
        lower_volume: support.volume(),
        upper_volume: fattened_volume(density, 1.0),
    })
}

/// Volume of the `|·|_∞` fattening of the support box by radius `r`.
pub fn fattened_volume(density: &InitialDensity, r: f64) -> f64 {
    density.support.fattened(r.max(0.0)).volume()
}

/// `Σ_i w_i`
pub fn total_mass(sample: &LatticeSample) -> f64 {
    sample.weights.iter().sum()
}

impl LatticeSample {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn lattice_index(&self, i: usize) -> &[i64] {
        &self.indices[i * self.dim..(i + 1) * self.dim]
    }

    /// `h^d N_h`
    pub fn lattice_volume(&self) -> f64 {
        self.h.powi(self.dim as i32) * self.len() as f64
    }

    pub fn metadata(&self) -> SampleMetadata {
        SampleMetadata {
            h: self.h,
            dim: self.dim,
            count: self.len(),
            lower_volume: self.lower_volume,
            upper_volume: self.upper_volume,
            lattice_volume: self.lattice_volume(),
            total_mass: total_mass(self),
        }
    }

    /// CSV with columns `theta_0..`, `x_0..`, `weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let mut header: Vec<String> = (0..d).map(|k| format!("theta_{k}")).collect();
        header.extend((0..d).map(|k| format!("x_{k}")));
        header.push("weight".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self
                .lattice_index(i)
                .iter()
                .map(|t| t.to_string())
                .collect();
            row.extend(self.position(i).iter().map(|x| format!("{x:.17e}")));
            row.push(format!("{:.17e}", self.weights[i]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub h: f64,
    pub dim: usize,
    pub count: usize,
    pub lower_volume: f64,
    pub upper_volume: f64,
    pub lattice_volume: f64,
    pub total_mass: f64,
}

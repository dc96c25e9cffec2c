//! Cell-centred fields on uniform boxes: blob deposits, discrete gradients and
//! the `L∞(L²) ∩ L²(H¹)` error functional.
//!
//! Values are stored with axis 0 varying fastest; vector fields interleave
//! their components per cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{BlobSpec, Bump1d};
use crate::sampling::LatticeSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != cells.len() {
            return Err(Error::invalid(
                "grid",
                "bounds and cell counts must share one nonzero dimension",
            ));
        }
        for k in 0..lo.len() {
            if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] < hi[k]) {
                return Err(Error::invalid(
                    "grid",
                    format!("axis {k}: need lo < hi, got [{}, {}]", lo[k], hi[k]),
                ));
            }
            if cells[k] < 2 {
                return Err(Error::invalid(
                    "grid",
                    format!("axis {k}: need at least 2 cells, got {}", cells[k]),
                ));
            }
        }
        Ok(GridSpec { lo, hi, cells })
    }

    /// Smallest grid with spacing exactly `dx` on every axis whose box
    /// contains `[lo, hi]`, centred on it.
    pub fn covering(lo: &[f64], hi: &[f64], dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::invalid("dx", format!("must be positive, got {dx}")));
        }
        let mut glo = Vec::with_capacity(lo.len());
        let mut ghi = Vec::with_capacity(lo.len());
        let mut cells = Vec::with_capacity(lo.len());
        for k in 0..lo.len() {
            let extent = hi[k] - lo[k];
            let n = ((extent / dx) - 1e-9).ceil().max(2.0) as usize;
            let c = 0.5 * (lo[k] + hi[k]);
            let half = 0.5 * n as f64 * dx;
            glo.push(c - half);
            ghi.push(c + half);
            cells.push(n);
        }
        GridSpec::new(glo, ghi, cells)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.cells[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.spacing(k)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.dim());
        let mut acc = 1;
        for &n in &self.cells {
            s.push(acc);
            acc *= n;
        }
        s
    }

    /// Centre coordinate of cell `i` along `axis`.
    pub fn center_coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.spacing(axis)
    }

    pub fn unflatten(&self, mut flat: usize, out: &mut [usize]) {
        for (k, &n) in self.cells.iter().enumerate() {
            out[k] = flat % n;
            flat /= n;
        }
    }

    pub fn center(&self, flat: usize, out: &mut [f64]) {
        let mut idx = [0usize; 8];
        self.unflatten(flat, &mut idx[..self.dim()]);
        for k in 0..self.dim() {
            out[k] = self.center_coord(k, idx[k]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lo[k] && v <= self.hi[k])
    }

    fn same_shape(&self, other: &GridSpec) -> bool {
        self.cells == other.cells
            && self
                .lo
                .iter()
                .zip(&other.lo)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
            && self
                .hi
                .iter()
                .zip(&other.hi)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    pub components: usize,
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridField {
    pub fn zeros(grid: &GridSpec, components: usize, time: f64) -> Self {
        GridField {
            values: vec![0.0; grid.len() * components],
            grid: grid.clone(),
            components,
            time,
        }
    }

    pub fn from_values(
        grid: &GridSpec,
        components: usize,
        values: Vec<f64>,
        time: f64,
    ) -> Result<Self> {
        if values.len() != grid.len() * components {
            return Err(Error::Structural(format!(
                "{} values for {} cells × {components} components",
                values.len(),
                grid.len()
            )));
        }
        Ok(GridField {
            grid: grid.clone(),
            components,
            values,
            time,
        })
    }

    /// Scalar field sampled at cell centres.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: &GridSpec, time: f64, f: F) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|c| {
                grid.center(c, &mut x);
                f(&x)
            })
            .collect();
        GridField {
            grid: grid.clone(),
            components: 1,
            values,
            time,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.components == 1
    }

    /// `Σ values · cell volume` (scalar fields).
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest pointwise Euclidean norm over cells.
    pub fn max_magnitude(&self) -> f64 {
        self.values
            .chunks(self.components)
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> GridField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self − other`, keeping `self.time`.
    pub fn difference(&self, other: &GridField) -> Result<GridField> {
        if !self.grid.same_shape(&other.grid) || self.components != other.components {
            return Err(Error::Structural("fields live on different grids".into()));
        }
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    /// Multilinear interpolation between cell centres. Points inside the box
    /// but beyond the outermost centres take the nearest-centre value; points
    /// outside the box yield zero and `false`.
    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.grid.dim();
        out.iter_mut().for_each(|o| *o = 0.0);
        if !self.grid.contains(x) {
            return false;
        }
        let strides = self.grid.strides();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for k in 0..d {
            let n = self.grid.cells[k];
            let mut s = (x[k] - self.grid.lo[k]) / self.grid.spacing(k) - 0.5;
            if (s - s.round()).abs() < 1e-9 {
                s = s.round();
            }
            let s = s.clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                flat += (base[k] + bit) * strides[k];
            }
            if w == 0.0 {
                continue;
            }
            let v = &self.values[flat * self.components..(flat + 1) * self.components];
            for (o, c) in out.iter_mut().zip(v) {
                *o += w * c;
            }
        }
        true
    }
}

/// How blob weights are evaluated on the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepositMode {
    /// Per-axis weights rescaled so each particle's full stencil sums to its
    /// weight exactly.
    #[default]
    Normalized,
    /// Plain `φ_ε` at cell centres.
    Pointwise,
}

fn check_resolution(grid: &GridSpec, blob: &BlobSpec) -> Result<()> {
    if blob.dim != grid.dim() {
        return Err(Error::Structural(format!(
            "blob dimension {} does not match grid dimension {}",
            blob.dim,
            grid.dim()
        )));
    }
    let limit = blob.epsilon / 4.0;
    for k in 0..grid.dim() {
        let dx = grid.spacing(k);
        if dx > limit * (1.0 + 1e-12) {
            return Err(Error::Resolution {
                axis: k,
                dx,
                epsilon: blob.epsilon,
                limit,
            });
        }
    }
    Ok(())
}

/// Deposits `Σ_i w_i φ_ε(x − X_i)` using the sample's lattice weights.
pub fn deposit_empirical(
    sample: &LatticeSample,
    positions: &[f64],
    blob: &BlobSpec,
    grid: &GridSpec,
) -> Result<GridField> {
    deposit_weighted(
        positions,
        &sample.weights,
        blob,
        grid,
        DepositMode::Normalized,
    )
}

/// Deposits arbitrary weighted points; `positions` holds `weights.len()`
/// vectors of the grid dimension.
pub fn deposit_weighted(
    positions: &[f64],
    weights: &[f64],
    blob: &BlobSpec,
    grid: &GridSpec,
    mode: DepositMode,
) -> Result<GridField> {
    check_resolution(grid, blob)?;
    let d = grid.dim();
    if positions.len() != weights.len() * d {
        return Err(Error::Structural(format!(
            "{} coordinates for {} weights in dimension {d}",
            positions.len(),
            weights.len()
        )));
    }
    let mut field = GridField::zeros(grid, 1, 0.0);
    let strides = grid.strides();
    let spacings = grid.spacings();
    let bump = Bump1d::reference();
    let eps = blob.epsilon;
    let mut axis_lo = [0i64; 8];
    let mut axis_w: Vec<Vec<f64>> = vec![Vec::new(); d];

    'particles: for (p, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let x = &positions[p * d..(p + 1) * d];
        for k in 0..d {
            let dx = spacings[k];
            // centre index units: cell i has centre at lo + (i + ½)dx
            let s = (x[k] - grid.lo[k]) / dx - 0.5;
            let r = 0.5 * eps / dx;
            let first = (s - r).ceil() as i64;
            let last = (s + r).floor() as i64;
            axis_w[k].clear();
            let mut sum = 0.0;
            for i in first..=last {
                let u = (i as f64 - s) * dx / eps;
                let v = bump.eval(u) / eps;
                sum += v;
                axis_w[k].push(v);
            }
            if mode == DepositMode::Normalized {
                if sum == 0.0 {
                    continue 'particles;
                }
                let scale = 1.0 / (sum * dx);
                axis_w[k].iter_mut().for_each(|v| *v *= scale);
            }
            axis_lo[k] = first;
        }
        // tensor-product loop over the stencil, clipped to the grid
        let mut clip_lo = [0usize; 8];
        let mut clip_hi = [0usize; 8];
        for k in 0..d {
            let n = grid.cells[k] as i64;
            let a = axis_lo[k].max(0);
            let b = (axis_lo[k] + axis_w[k].len() as i64).min(n);
            if a >= b {
                continue 'particles;
            }
            clip_lo[k] = a as usize;
            clip_hi[k] = b as usize;
        }
        let mut idx = clip_lo;
        loop {
            let mut weight = w;
            let mut flat = 0;
            for k in 0..d {
                weight *= axis_w[k][(idx[k] as i64 - axis_lo[k]) as usize];
                flat += idx[k] * strides[k];
            }
            field.values[flat] += weight;
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < clip_hi[k] {
                    break;
                }
                idx[k] = clip_lo[k];
                k += 1;
                if k == d {
                    continue 'particles;
                }
            }
        }
    }
    Ok(field)
}

/// Second-order gradient of a scalar field: central differences inside,
/// one-sided three-point stencils at the faces.
pub fn gradient(field: &GridField) -> Result<GridField> {
    if !field.is_scalar() {
        return Err(Error::Structural("gradient needs a scalar field".into()));
    }
    let grid = &field.grid;
    let d = grid.dim();
    let strides = grid.strides();
    let mut out = GridField::zeros(grid, d, field.time);
    let f = &field.values;
    let mut idx = [0usize; 8];
    for c in 0..grid.len() {
        grid.unflatten(c, &mut idx[..d]);
        for k in 0..d {
            let n = grid.cells[k];
            let s = strides[k];
            let dx = grid.spacing(k);
            let i = idx[k];
            let g = if n == 2 {
                let base = c - i * s;
                (f[base + s] - f[base]) / dx
            } else if i == 0 {
                (-3.0 * f[c] + 4.0 * f[c + s] - f[c + 2 * s]) / (2.0 * dx)
            } else if i == n - 1 {
                (3.0 * f[c] - 4.0 * f[c - s] + f[c - 2 * s]) / (2.0 * dx)
            } else {
                (f[c + s] - f[c - s]) / (2.0 * dx)
            };
            out.values[c * d + k] = g;
        }
    }
    Ok(out)
}

/// Midpoint-rule `‖f‖²`, summing component squares for vector fields.
pub fn l2_norm_sq(field: &GridField) -> f64 {
    field.values.iter().map(|v| v * v).sum::<f64>() * field.grid.cell_volume()
}

/// Midpoint-rule `‖f‖_{L¹}` of a scalar field.
pub fn l1_norm(field: &GridField) -> f64 {
    field.values.iter().map(|v| v.abs()).sum::<f64>() * field.grid.cell_volume()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevError {
    pub times: Vec<f64>,
    /// `‖e(t_k)‖²`
    pub l2_sq: Vec<f64>,
    /// `‖∇e(t_k)‖²`
    pub grad_sq: Vec<f64>,
    /// Trapezoid `∫₀^{t_k} ‖∇e‖²`.
    pub cumulative: Vec<f64>,
    /// `max_k (‖e(t_k)‖² + cumulative_k)`
    pub headline: f64,
}

pub fn sobolev_error(rho: &[GridField], rho_h: &[GridField]) -> Result<SobolevError> {
    if rho.len() != rho_h.len() {
        return Err(Error::Structural(format!(
            "series lengths differ ({} vs {})",
            rho.len(),
            rho_h.len()
        )));
    }
    if rho.is_empty() {
        return Err(Error::Structural("empty field series".into()));
    }
    let mut out = SobolevError {
        times: Vec::with_capacity(rho.len()),
        l2_sq: Vec::with_capacity(rho.len()),
        grad_sq: Vec::with_capacity(rho.len()),
        cumulative: Vec::with_capacity(rho.len()),
        headline: 0.0,
    };
    for (k, (a, b)) in rho.iter().zip(rho_h).enumerate() {
        if (a.time - b.time).abs() > 1e-9 * (1.0 + a.time.abs()) {
            return Err(Error::Structural(format!(
                "frame {k}: times differ ({} vs {})",
                a.time, b.time
            )));
        }
        if k > 0 && !(a.time > out.times[k - 1]) {
            return Err(Error::Structural(format!("frame {k}: times must increase")));
        }
        let e = a.difference(b)?;
        if !e.is_scalar() {
            return Err(Error::Structural(
                "error functional needs scalar fields".into(),
            ));
        }
        let l2 = l2_norm_sq(&e);
        let g2 = l2_norm_sq(&gradient(&e)?);
        let cum = if k == 0 {
            0.0
        } else {
            out.cumulative[k - 1] + 0.5 * (a.time - out.times[k - 1]) * (g2 + out.grad_sq[k - 1])
        };
        out.headline = out.headline.max(l2 + cum);
        out.times.push(a.time);
        out.l2_sq.push(l2);
        out.grad_sq.push(g2);
        out.cumulative.push(cum);
    }
    Ok(out)
}

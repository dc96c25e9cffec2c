//! Finite-volume solver for the mean-field equation
//! `∂ρ/∂t = νΔρ − ∇·(ρF)`, `F = F₀ * ρ`, on a zero-flux box.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::VelocityField;
use crate::error::{Error, Result};
use crate::fields::{GridField, GridSpec};
use crate::kernels::{Interaction, KernelSpec, MollifiedKernel};
use crate::sampling::InitialDensity;

/// Direct sums are used up to this many cells when the path is automatic.
pub const DIRECT_CELL_LIMIT: usize = 256;

/// Safety factor applied to the explicit diffusion bound.
pub const DIFFUSION_SAFETY: f64 = 0.9;

/// Courant number of the advection substep.
pub const ADVECTION_CFL: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingularMode {
    /// Use `F₀ * ψ_δ`.
    #[default]
    Mollified,
    /// Exact kernel with the zero offset skipped.
    PrincipalValue,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvolutionPath {
    #[default]
    Auto,
    Direct,
    Fft,
}

#[derive(Clone, Debug)]
pub struct PdeConfig {
    pub grid: GridSpec,
    pub dt: f64,
    pub horizon: f64,
    pub kernel: KernelSpec,
    pub delta: Option<f64>,
    pub nu: f64,
    pub singular_mode: SingularMode,
    pub path: ConvolutionPath,
    /// Keep every `record_every`-th frame (the final frame is always kept).
    pub record_every: usize,
    pub blowup_factor: f64,
}

impl PdeConfig {
    pub fn new(grid: GridSpec, kernel: KernelSpec, dt: f64, horizon: f64) -> Self {
        PdeConfig {
            grid,
            dt,
            horizon,
            kernel,
            delta: None,
            nu: 0.5,
            singular_mode: SingularMode::Mollified,
            path: ConvolutionPath::Auto,
            record_every: 1,
            blowup_factor: 1e3,
        }
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.dim != self.grid.dim() {
            return Err(Error::Structural(format!(
                "kernel dimension {} does not match grid dimension {}",
                self.kernel.dim,
                self.grid.dim()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(
                "dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::invalid(
                "nu",
                format!("must be nonnegative, got {}", self.nu),
            ));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        let max_dt = max_diffusion_dt(&self.grid, self.nu);
        if self.dt > max_dt {
            return Err(Error::Stability {
                substep: "diffusion",
                dt: self.dt,
                max_dt,
            });
        }
        Ok(())
    }
}

/// Largest stable explicit diffusion step, `0.9·Δx²/(2dν)` with the finest axis.
pub fn max_diffusion_dt(grid: &GridSpec, nu: f64) -> f64 {
    if nu == 0.0 {
        return f64::INFINITY;
    }
    let inv: f64 = (0..grid.dim()).map(|k| grid.spacing(k).powi(-2)).sum();
    DIFFUSION_SAFETY / (2.0 * nu * inv)
}

/// Splits `outer` into the fewest equal substeps that respect the diffusion bound.
pub fn stable_substeps(grid: &GridSpec, nu: f64, outer: f64) -> usize {
    let max = max_diffusion_dt(grid, nu);
    ((outer / max) * (1.0 + 1e-12)).ceil().max(1.0) as usize
}

struct FftPlan {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
    spectra: Vec<Vec<Complex64>>,
}

/// Discrete convolution `F(x_c) = Σ_y F₀(x_c − y)ρ(y)ΔV` on a fixed grid.
pub struct VelocityConvolver {
    grid: GridSpec,
    zero: bool,
    offset_dims: Vec<usize>,
    table: Vec<f64>,
    fft: Option<FftPlan>,
}

impl std::fmt::Debug for VelocityConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VelocityConvolver")
            .field("grid", &self.grid)
            .field("zero", &self.zero)
            .field("fft", &self.fft.is_some())
            .finish()
    }
}

impl VelocityConvolver {
    pub fn new(
        grid: &GridSpec,
        kernel: &KernelSpec,
        delta: Option<f64>,
        mode: SingularMode,
    ) -> Result<Self> {
        let d = grid.dim();
        if kernel.dim != d {
            return Err(Error::Structural(
                "kernel and grid dimensions differ".into(),
            ));
        }
        let interaction = if kernel.is_singular() && mode == SingularMode::Mollified {
            let delta = delta.ok_or_else(|| {
                Error::invalid("delta", "singular kernels need a mollification length")
            })?;
            Some(Interaction::Mollified(MollifiedKernel::new(
                kernel.clone(),
                delta,
            )?))
        } else if kernel.is_zero() {
            None
        } else {
            Some(Interaction::Exact(kernel.clone()))
        };
        let offset_dims: Vec<usize> = grid.cells.iter().map(|n| 2 * n - 1).collect();
        let count: usize = offset_dims.iter().product();
        let table = match &interaction {
            None => Vec::new(),
            Some(inter) => {
                let spacing = grid.spacings();
                let mut table = vec![0.0; count * d];
                table
                    .par_chunks_mut(d)
                    .enumerate()
                    .try_for_each(|(flat, out)| -> Result<()> {
                        let mut rem = flat;
                        let mut x = [0.0f64; 8];
                        let mut origin = true;
                        for k in 0..d {
                            let o = (rem % offset_dims[k]) as i64 - (grid.cells[k] as i64 - 1);
                            rem /= offset_dims[k];
                            origin &= o == 0;
                            x[k] = o as f64 * spacing[k];
                        }
                        if origin && matches!(inter, Interaction::Exact(k) if k.is_singular()) {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            return Ok(());
                        }
                        inter.eval_into(&x[..d], out)
                    })?;
                table
            }
        };
        Ok(VelocityConvolver {
            grid: grid.clone(),
            zero: interaction.is_none(),
            offset_dims,
            table,
            fft: None,
        })
    }

    fn ensure_fft(&mut self) {
        if self.fft.is_some() || self.zero {
            return;
        }
        let d = self.grid.dim();
        let dims: Vec<usize> = self.grid.cells.iter().map(|n| 2 * n).collect();
        let total: usize = dims.iter().product();
        let mut planner = FftPlanner::new();
        let forward: Vec<_> = dims.iter().map(|&m| planner.plan_fft_forward(m)).collect();
        let inverse: Vec<_> = dims.iter().map(|&m| planner.plan_fft_inverse(m)).collect();
        let mut spectra = vec![vec![Complex64::new(0.0, 0.0); total]; d];
        let offset_count: usize = self.offset_dims.iter().product();
        for flat in 0..offset_count {
            let mut rem = flat;
            let mut target = 0;
            let mut stride = 1;
            for (k, &n) in dims.iter().enumerate() {
                let o = (rem % self.offset_dims[k]) as i64 - (self.grid.cells[k] as i64 - 1);
                rem /= self.offset_dims[k];
                target += o.rem_euclid(n as i64) as usize * stride;
                stride *= n;
            }
            for (c, spectrum) in spectra.iter_mut().enumerate() {
                spectrum[target].re = self.table[flat * d + c];
            }
        }
        for s in spectra.iter_mut() {
            fft_nd(s, &dims, &forward);
        }
        self.fft = Some(FftPlan {
            dims,
            forward,
            inverse,
            spectra,
        });
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Chooses a path from the cell count.
    pub fn convolve(&mut self, rho: &GridField, path: ConvolutionPath) -> Result<GridField> {
        let direct = match path {
            ConvolutionPath::Direct => true,
            ConvolutionPath::Fft => false,
            ConvolutionPath::Auto => self.grid.len() <= DIRECT_CELL_LIMIT,
        };
        if direct {
            self.convolve_direct(rho)
        } else {
            self.convolve_fft(rho)
        }
    }

    fn check_input(&self, rho: &GridField) -> Result<()> {
        if !rho.is_scalar() || rho.grid != self.grid {
            return Err(Error::Structural(
                "density must be a scalar field on the convolver grid".into(),
            ));
        }
        Ok(())
    }

    pub fn convolve_direct(&self, rho: &GridField) -> Result<GridField> {
        self.check_input(rho)?;
        let d = self.grid.dim();
        let mut out = GridField::zeros(&self.grid, d, rho.time);
        if self.zero {
            return Ok(out);
        }
        let vol = self.grid.cell_volume();
        let sources: Vec<(usize, f64)> = rho
            .values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        let grid = &self.grid;
        let off_strides: Vec<usize> = {
            let mut s = Vec::with_capacity(d);
            let mut acc = 1;
            for &m in &self.offset_dims {
                s.push(acc);
                acc *= m;
            }
            s
        };
        out.values
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(c, acc)| {
                let mut ic = [0usize; 8];
                let mut iy = [0usize; 8];
                grid.unflatten(c, &mut ic[..d]);
                for &(y, v) in &sources {
                    grid.unflatten(y, &mut iy[..d]);
                    let mut flat = 0;
                    for k in 0..d {
                        flat += (ic[k] + grid.cells[k] - 1 - iy[k]) * off_strides[k];
                    }
                    for (a, t) in acc.iter_mut().zip(&self.table[flat * d..(flat + 1) * d]) {
                        *a += t * v;
                    }
                }
                acc.iter_mut().for_each(|a| *a *= vol);
            });
        Ok(out)
    }

    pub fn convolve_fft(&mut self, rho: &GridField) -> Result<GridField> {
        self.check_input(rho)?;
        let d = self.grid.dim();
        let mut out = GridField::zeros(&self.grid, d, rho.time);
        if self.zero {
            return Ok(out);
        }
        self.ensure_fft();
        let plan = self.fft.as_ref().expect("plan built above");
        let total: usize = plan.dims.iter().product();
        let pad_index = |c: usize| {
            let mut rem = c;
            let mut target = 0;
            let mut stride = 1;
            for k in 0..d {
                let i = rem % self.grid.cells[k];
                rem /= self.grid.cells[k];
                target += i * stride;
                stride *= plan.dims[k];
            }
            target
        };
        let mut dens = vec![Complex64::new(0.0, 0.0); total];
        for (c, &v) in rho.values.iter().enumerate() {
            dens[pad_index(c)].re = v;
        }
        fft_nd(&mut dens, &plan.dims, &plan.forward);
        let scale = self.grid.cell_volume() / total as f64;
        for (comp, spectrum) in plan.spectra.iter().enumerate() {
            let mut prod: Vec<Complex64> = dens.iter().zip(spectrum).map(|(a, b)| a * b).collect();
            fft_nd(&mut prod, &plan.dims, &plan.inverse);
            for c in 0..self.grid.len() {
                out.values[c * d + comp] = prod[pad_index(c)].re * scale;
            }
        }
        Ok(out)
    }
}

/// In-place multidimensional FFT as successive 1-D transforms (axis 0 fastest).
fn fft_nd(data: &mut [Complex64], dims: &[usize], plans: &[Arc<dyn Fft<f64>>]) {
    let total = data.len();
    let mut stride = 1;
    for (k, &n) in dims.iter().enumerate() {
        let plan = &plans[k];
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        let block = stride * n;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for j in 0..n {
                    line[j] = data[base + j * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for j in 0..n {
                    data[base + j * stride] = line[j];
                }
            }
        }
        stride *= n;
    }
}

/// Conservative first-order upwind update `ρ ← ρ − dt ∇·(ρF)` with zero flux
/// through the box faces.
pub fn advect(rho: &GridField, velocity: &GridField, dt: f64) -> Result<GridField> {
    let grid = &rho.grid;
    let d = grid.dim();
    if velocity.components != d || velocity.grid != *grid {
        return Err(Error::Structural(
            "velocity must be a vector field on the density grid".into(),
        ));
    }
    let strides = grid.strides();
    let mut out = rho.clone();
    let r = &rho.values;
    let v = &velocity.values;
    let mut idx = [0usize; 8];
    for c in 0..grid.len() {
        grid.unflatten(c, &mut idx[..d]);
        let mut div = 0.0;
        for k in 0..d {
            let s = strides[k];
            let dx = grid.spacing(k);
            let face = |left: usize, right: usize| {
                let u = 0.5 * (v[left * d + k] + v[right * d + k]);
                if u > 0.0 {
                    u * r[left]
                } else {
                    u * r[right]
                }
            };
            let flux_hi = if idx[k] + 1 < grid.cells[k] {
                face(c, c + s)
            } else {
                0.0
            };
            let flux_lo = if idx[k] > 0 { face(c - s, c) } else { 0.0 };
            div += (flux_hi - flux_lo) / dx;
        }
        out.values[c] -= dt * div;
    }
    Ok(out)
}

/// Explicit `ρ ← ρ + ν dt Δρ` with reflecting (zero-flux) faces.
pub fn diffuse(rho: &GridField, nu: f64, dt: f64) -> Result<GridField> {
    let grid = &rho.grid;
    let max_dt = max_diffusion_dt(grid, nu);
    if dt > max_dt {
        return Err(Error::Stability {
            substep: "diffusion",
            dt,
            max_dt,
        });
    }
    let d = grid.dim();
    let strides = grid.strides();
    let r = &rho.values;
    let mut out = rho.clone();
    let mut idx = [0usize; 8];
    for c in 0..grid.len() {
        grid.unflatten(c, &mut idx[..d]);
        let mut lap = 0.0;
        for k in 0..d {
            let s = strides[k];
            let inv = grid.spacing(k).powi(-2);
            if idx[k] + 1 < grid.cells[k] {
                lap += (r[c + s] - r[c]) * inv;
            }
            if idx[k] > 0 {
                lap += (r[c - s] - r[c]) * inv;
            }
        }
        out.values[c] += nu * dt * lap;
    }
    Ok(out)
}

/// Largest advection substep, `0.5·min Δx/(d·max|F|)`.
pub fn max_advection_dt(velocity: &GridField) -> f64 {
    let vmax = velocity.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if vmax == 0.0 {
        return f64::INFINITY;
    }
    let dx = velocity
        .grid
        .spacings()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    ADVECTION_CFL * dx / (velocity.grid.dim() as f64 * vmax)
}

/// One split step: advection (sub-cycled to the CFL bound), then diffusion.
pub fn step_pde(rho: &GridField, velocity: &GridField, dt: f64, nu: f64) -> Result<GridField> {
    let max_diff = max_diffusion_dt(&rho.grid, nu);
    if dt > max_diff {
        return Err(Error::Stability {
            substep: "diffusion",
            dt,
            max_dt: max_diff,
        });
    }
    let sub = ((dt / max_advection_dt(velocity)) * (1.0 + 1e-12))
        .ceil()
        .max(1.0) as usize;
    let h = dt / sub as f64;
    let mut current = rho.clone();
    if velocity.values.iter().any(|&v| v != 0.0) {
        for _ in 0..sub {
            current = advect(&current, velocity, h)?;
        }
    }
    let mut next = if nu > 0.0 {
        diffuse(&current, nu, dt)?
    } else {
        current
    };
    next.time = rho.time + dt;
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct PdeSolution {
    pub density: Vec<GridField>,
    pub velocity: Vec<GridField>,
    /// Discrete mass of each recorded frame.
    pub mass: Vec<f64>,
    /// Minimum density of each recorded frame before clipping.
    pub min_density: Vec<f64>,
    /// Total mass removed by clipping negative round-off.
    pub clipped_mass: f64,
    /// Mass of the initial projection onto the grid.
    pub projected_mass: f64,
    pub dt: f64,
    pub steps: usize,
}

impl PdeSolution {
    pub fn times(&self) -> Vec<f64> {
        self.density.iter().map(|f| f.time).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.density.last().map_or(0.0, |f| f.time)
    }

    /// Relative change in mass between the first and last frame.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.mass[0];
        let m1 = *self.mass.last().expect("at least one frame");
        if m0 == 0.0 {
            m1.abs()
        } else {
            ((m1 - m0) / m0).abs()
        }
    }
}

/// Projects the initial density onto the grid and evolves it.
pub fn solve_pde(density: &InitialDensity, cfg: &PdeConfig) -> Result<PdeSolution> {
    let rho0 = GridField::from_fn(&cfg.grid, 0.0, |x| density.eval(x));
    solve_pde_from(rho0, cfg)
}

pub fn solve_pde_from(rho0: GridField, cfg: &PdeConfig) -> Result<PdeSolution> {
    cfg.validate()?;
    if rho0.grid != cfg.grid || !rho0.is_scalar() {
        return Err(Error::Structural(
            "initial field must be a scalar field on the solver grid".into(),
        ));
    }
    if rho0.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "initial density has non-finite values".into(),
        ));
    }
    let mut conv = VelocityConvolver::new(&cfg.grid, &cfg.kernel, cfg.delta, cfg.singular_mode)?;
    let steps = cfg.steps();
    let initial_max = rho0.max();
    let projected_mass = rho0.mass();
    let mut sol = PdeSolution {
        density: Vec::new(),
        velocity: Vec::new(),
        mass: Vec::new(),
        min_density: Vec::new(),
        clipped_mass: 0.0,
        projected_mass,
        dt: cfg.dt,
        steps,
    };
    let mut rho = rho0;
    let mut min_raw = rho.min();
    for k in 0..=steps {
        rho.time = k as f64 * cfg.dt;
        let velocity = conv.convolve(&rho, cfg.path)?;
        if k % cfg.record_every == 0 || k == steps {
            sol.density.push(rho.clone());
            sol.velocity.push(velocity.clone());
            sol.mass.push(rho.mass());
            sol.min_density.push(min_raw);
        }
        if k == steps {
            break;
        }
        let mut next = step_pde(&rho, &velocity, cfg.dt, cfg.nu)?;
        min_raw = next.min();
        if min_raw < 0.0 {
            let vol = cfg.grid.cell_volume();
            for v in next.values.iter_mut().filter(|v| **v < 0.0) {
                sol.clipped_mass -= *v * vol;
                *v = 0.0;
            }
        }
        if next.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                time: (k + 1) as f64 * cfg.dt,
                ratio: f64::INFINITY,
            });
        }
        let ratio = if initial_max > 0.0 {
            next.max() / initial_max
        } else {
            0.0
        };
        if ratio > cfg.blowup_factor {
            return Err(Error::BlowUp {
                time: (k + 1) as f64 * cfg.dt,
                ratio,
            });
        }
        rho = next;
    }
    Ok(sol)
}

/// Velocity frames of a solution as a piecewise-constant-in-time field.
#[derive(Clone, Debug)]
pub struct GridVelocity {
    frames: Vec<GridField>,
    times: Vec<f64>,
}

pub fn velocity_provider(sol: &PdeSolution) -> GridVelocity {
    GridVelocity {
        times: sol.velocity.iter().map(|f| f.time).collect(),
        frames: sol.velocity.clone(),
    }
}

impl GridVelocity {
    pub fn frames(&self) -> &[GridField] {
        &self.frames
    }

    /// Index of the last frame at or before `t`.
    pub fn frame_index(&self, t: f64) -> Result<usize> {
        let horizon = *self.times.last().unwrap_or(&0.0);
        let slack = 1e-9 * (1.0 + t.abs());
        if t > horizon + slack {
            return Err(Error::Horizon {
                requested: t,
                available: horizon,
            });
        }
        Ok(self
            .times
            .partition_point(|&s| s <= t + slack)
            .saturating_sub(1))
    }
}

impl VelocityField for GridVelocity {
    fn dim(&self) -> usize {
        self.frames[0].grid.dim()
    }

    fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> bool {
        let k = self.frame_index(t).unwrap_or(self.frames.len() - 1);
        self.frames[k].interpolate(x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::l2_norm_sq;
    use crate::sampling::BoxDomain;
    use approx::assert_abs_diff_eq;

    fn gaussian(var: f64) -> impl Fn(&[f64]) -> f64 {
        move |x: &[f64]| {
            let d = x.len() as f64;
            let r2: f64 = x.iter().map(|v| v * v).sum();
            (2.0 * std::f64::consts::PI * var).powf(-d / 2.0) * (-r2 / (2.0 * var)).exp()
        }
    }

    #[test]
    fn single_cell_convolution_is_kernel() {
        let g = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![12, 12]).unwrap();
        let k = KernelSpec::tanh_gauss(2);
        let mut rho = GridField::zeros(&g, 1, 0.0);
        let y0 = 5 + 12 * 7;
        rho.values[y0] = 1.0 / g.cell_volume();
        let mut conv = VelocityConvolver::new(&g, &k, None, SingularMode::Mollified).unwrap();
        let direct = conv.convolve_direct(&rho).unwrap();
        let fft = conv.convolve_fft(&rho).unwrap();
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        g.center(y0, &mut y);
        for c in 0..g.len() {
            g.center(c, &mut x);
            let f = k.eval(&[x[0] - y[0], x[1] - y[1]]).unwrap();
            for (j, fj) in f.iter().enumerate() {
                assert_abs_diff_eq!(direct.values[2 * c + j], *fj, epsilon = 1e-12);
                assert_abs_diff_eq!(fft.values[2 * c + j], *fj, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn paths_agree_for_mollified_singular() {
        let g = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![16, 12]).unwrap();
        let rho = GridField::from_fn(&g, 0.0, |x| (1.0 + x[0]) * (1.0 - x[1] * x[1]));
        for k in [KernelSpec::newton(2).unwrap(), KernelSpec::vortex()] {
            let mut conv =
                VelocityConvolver::new(&g, &k, Some(0.2), SingularMode::Mollified).unwrap();
            let a = conv.convolve_direct(&rho).unwrap();
            let b = conv.convolve_fft(&rho).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-10);
            }
        }
        let singular = KernelSpec::coulomb(2).unwrap();
        assert!(VelocityConvolver::new(&g, &singular, None, SingularMode::Mollified).is_err());
        let mut pv =
            VelocityConvolver::new(&g, &singular, None, SingularMode::PrincipalValue).unwrap();
        let a = pv.convolve_direct(&rho).unwrap();
        assert!(a.values.iter().all(|v| v.is_finite()));
        let b = pv.convolve_fft(&rho).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn symmetric_density_odd_kernel_vanishes_at_center() {
        let g = GridSpec::new(vec![-1.0], vec![1.0], vec![21]).unwrap();
        let rho = GridField::from_fn(&g, 0.0, |x| 1.0 - x[0] * x[0]);
        let conv = VelocityConvolver::new(
            &g,
            &KernelSpec::tanh_gauss(1),
            None,
            SingularMode::Mollified,
        )
        .unwrap();
        let f = conv.convolve_direct(&rho).unwrap();
        assert_abs_diff_eq!(f.values[10], 0.0, epsilon = 1e-12);
        let z = VelocityConvolver::new(&g, &KernelSpec::zero(1), None, SingularMode::Mollified)
            .unwrap();
        assert!(z
            .convolve_direct(&rho)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_density_stays_zero() {
        let g = GridSpec::new(vec![-1.0], vec![1.0], vec![20]).unwrap();
        let rho = GridField::zeros(&g, 1, 0.0);
        let v = GridField::zeros(&g, 1, 0.0);
        let next = step_pde(&rho, &v, 1e-3, 0.5).unwrap();
        assert!(next.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn diffusion_refuses_unstable_step() {
        let g = GridSpec::new(vec![-1.0], vec![1.0], vec![20]).unwrap();
        let rho = GridField::zeros(&g, 1, 0.0);
        let v = GridField::zeros(&g, 1, 0.0);
        assert!(matches!(
            step_pde(&rho, &v, 0.1, 0.5),
            Err(Error::Stability { .. })
        ));
        let cfg = PdeConfig::new(g, KernelSpec::zero(1), 0.1, 1.0);
        assert!(matches!(cfg.validate(), Err(Error::Stability { .. })));
    }

    fn heat_error(n: usize, dt: f64) -> f64 {
        let g = GridSpec::new(vec![-5.0], vec![5.0], vec![n]).unwrap();
        let t = 0.5;
        let cfg = PdeConfig::new(g.clone(), KernelSpec::zero(1), dt, t);
        let rho0 = GridField::from_fn(&g, 0.0, gaussian(0.25));
        let sol = solve_pde_from(rho0, &cfg).unwrap();
        let exact = GridField::from_fn(&g, t, gaussian(0.25 + t));
        l2_norm_sq(&sol.density.last().unwrap().difference(&exact).unwrap()).sqrt()
    }

    #[test]
    fn heat_oracle_refines() {
        let e1 = heat_error(100, 0.004);
        let e2 = heat_error(200, 0.001);
        assert!(e1 < 1e-2, "{e1}");
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn translation_without_diffusion() {
        let g = GridSpec::new(vec![0.0], vec![4.0], vec![400]).unwrap();
        let bell = gaussian(0.02);
        let rho = GridField::from_fn(&g, 0.0, |x| bell(&[x[0] - 1.0]));
        let mut v = GridField::zeros(&g, 1, 0.0);
        v.values.iter_mut().for_each(|u| *u = 0.5);
        let mut cur = rho.clone();
        for _ in 0..200 {
            cur = step_pde(&cur, &v, 0.01, 0.0).unwrap();
        }
        assert_abs_diff_eq!(cur.mass(), rho.mass(), epsilon = 1e-12);
        let mean: f64 = (0..400)
            .map(|i| g.center_coord(0, i) * cur.values[i])
            .sum::<f64>()
            * g.cell_volume();
        assert_abs_diff_eq!(mean, 2.0, epsilon = 1e-6);
        assert!(cur.min() >= 0.0);
    }

    #[test]
    fn coulomb_conserves_mass_and_spreads() {
        let g = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![24, 24]).unwrap();
        let density = InitialDensity::bump(BoxDomain::cube(2, -0.5, 0.5).unwrap());
        let mut cfg = PdeConfig::new(g, KernelSpec::coulomb(2).unwrap(), 0.005, 0.5);
        cfg.delta = Some(0.2);
        let sol = solve_pde(&density, &cfg).unwrap();
        assert_eq!(
            sol.density[0].values,
            GridField::from_fn(&cfg.grid, 0.0, |x| density.eval(x)).values
        );
        assert!(sol.mass_drift() < 1e-12);
        assert!(sol.min_density.iter().all(|&m| m >= -1e-12));
        let maxes: Vec<f64> = sol.density.iter().map(|f| f.max()).collect();
        for w in maxes.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let bound = MollifiedKernel::new(KernelSpec::coulomb(2).unwrap(), 0.2)
            .unwrap()
            .sup_bound()
            * sol.projected_mass;
        for v in &sol.velocity {
            assert!(v.max_magnitude() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn heat_dissipates_l2() {
        let g = GridSpec::new(vec![-2.0], vec![2.0], vec![80]).unwrap();
        let density = InitialDensity::bump(BoxDomain::cube(1, -1.0, 1.0).unwrap());
        let cfg = PdeConfig::new(g, KernelSpec::zero(1), 0.002, 0.2);
        let sol = solve_pde(&density, &cfg).unwrap();
        for w in sol.density.windows(2) {
            assert!(l2_norm_sq(&w[1]) <= l2_norm_sq(&w[0]) + 1e-10);
        }
    }

    #[test]
    fn blow_up_guard() {
        let g = GridSpec::new(vec![-1.0], vec![1.0], vec![40]).unwrap();
        let density = InitialDensity::bump(BoxDomain::cube(1, -0.8, 0.8).unwrap());
        let mut cfg = PdeConfig::new(g, KernelSpec::tanh_gauss(1), 0.01, 2.0);
        // pure aggregation concentrates mass; a low threshold trips the guard
        cfg.nu = 0.0;
        cfg.blowup_factor = 1.01;
        assert!(matches!(
            solve_pde(&density, &cfg),
            Err(Error::BlowUp { .. })
        ));
        cfg.blowup_factor = 1e3;
        assert!(solve_pde(&density, &cfg).is_ok());
    }

    #[test]
    fn provider_frames() {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![10]).unwrap();
        let frames: Vec<GridField> = (0..3)
            .map(|k| {
                let mut f = GridField::from_fn(&g, k as f64 * 0.1, |x| 2.0 * x[0] + k as f64);
                f.components = 1;
                f
            })
            .collect();
        let sol = PdeSolution {
            density: frames.clone(),
            velocity: frames,
            mass: vec![1.0; 3],
            min_density: vec![0.0; 3],
            clipped_mass: 0.0,
            projected_mass: 1.0,
            dt: 0.1,
            steps: 2,
        };
        let p = velocity_provider(&sol);
        let mut out = [0.0];
        assert!(p.velocity(&[0.35], 0.15, &mut out));
        assert_abs_diff_eq!(out[0], 0.7 + 1.0, epsilon = 1e-12);
        assert!(p.velocity(&[0.05], 0.2, &mut out));
        assert_abs_diff_eq!(out[0], 0.1 + 2.0, epsilon = 1e-12);
        assert!(!p.velocity(&[1.5], 0.0, &mut out));
        assert!(p.frame_index(0.5).is_err());
    }
}

//! Convergence sweeps over the lattice spacing, the separation statistic of
//! the self-consistent system, and the computable error-decomposition terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    coupling_distance, lhp_norm, simulate_interacting, simulate_regularized_with,
    simulate_self_consistent, SdeConfig, TrajectoryEnsemble, VelocityField, Weighting, ZeroField,
};
use crate::error::{Error, Result};
use crate::fields::{deposit_empirical, l2_norm_sq, sobolev_error, GridField, GridSpec};
use crate::kernels::{blob_width, mollification_length, BlobSpec, KernelSpec, MollifiedKernel};
use crate::noise::BrownianNoise;
use crate::pde::{
    solve_pde, stable_substeps, velocity_provider, ConvolutionPath, PdeConfig, PdeSolution,
    SingularMode,
};
use crate::sampling::{build_lattice_sample, total_mass, BoxDomain, InitialDensity, LatticeSample};
use crate::stats::{bootstrap_loglog_slope, std_dev, wilson_interval, SlopeFit, Summary};

/// Normal quantile for the 95% Wilson intervals.
const WILSON_Z: f64 = 1.959963984540054;

fn default_density() -> String {
    "bump".into()
}
fn default_sigma() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    0.75
}
fn default_c() -> f64 {
    1.0
}
fn default_output_frames() -> usize {
    64
}
fn default_resamples() -> usize {
    1000
}
fn default_level() -> f64 {
    0.9
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPolicy {
    /// Fixed spacing; overrides the blob-based rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    /// Cap on the spacing (default 0.01 in 1-D, otherwise none).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dx: Option<f64>,
    /// Cells per blob width (default 16 in 1-D, 8 otherwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_blob: Option<f64>,
    /// Padding around the support (default `6√(νT) + T·|F|_∞ + ε/2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<f64>,
}

impl GridPolicy {
    pub fn spacing(&self, epsilon: f64, dim: usize) -> f64 {
        if let Some(dx) = self.dx {
            return dx;
        }
        let per = self.per_blob.unwrap_or(if dim == 1 { 16.0 } else { 8.0 });
        let cap = self
            .max_dx
            .unwrap_or(if dim == 1 { 0.01 } else { f64::INFINITY });
        (epsilon / per).min(cap)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdePolicy {
    #[serde(default)]
    pub singular_mode: SingularMode,
    #[serde(default)]
    pub path: ConvolutionPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            resamples: default_resamples(),
            level: default_level(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationSettings {
    /// Designated particle; defaults to the one nearest the density mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    /// Also average the statistic over every `j`.
    #[serde(default)]
    pub all_j: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    #[serde(default = "default_density")]
    pub density: String,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    pub kernel: String,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub horizon: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub weighting: Weighting,
    pub h: Vec<f64>,
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<f64>,
    #[serde(default = "default_c")]
    pub probability_c: f64,
    /// SDE step; defaults to `min(ε²/4, T/64)` per `h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_output_frames")]
    pub output_frames: usize,
    #[serde(default)]
    pub grid: GridPolicy,
    #[serde(default)]
    pub pde: PdePolicy,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default)]
    pub separation: SeparationSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > 3 {
            return Err(Error::invalid(
                "dim",
                format!("supported dimensions are 1, 2, 3; got {}", self.dim),
            ));
        }
        if self.support_lo.len() != self.dim || self.support_hi.len() != self.dim {
            return Err(Error::invalid(
                "support_lo",
                format!("support bounds need {} entries", self.dim),
            ));
        }
        if self.h.is_empty() {
            return Err(Error::invalid("h", "need at least one lattice spacing"));
        }
        for &h in &self.h {
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::invalid(
                    "h",
                    format!("every spacing must lie in (0, 1), got {h}"),
                ));
            }
        }
        if self.h.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid("h", "spacings must be strictly decreasing"));
        }
        if self.realizations == 0 {
            return Err(Error::invalid("realizations", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(
                "sigma",
                format!("must be nonnegative, got {}", self.sigma),
            ));
        }
        if !(self.probability_c >= 0.0) {
            return Err(Error::invalid("probability_c", "must be nonnegative"));
        }
        if self.output_frames == 0 {
            return Err(Error::invalid("output_frames", "must be at least 1"));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt <= self.horizon) {
                return Err(Error::invalid(
                    "dt",
                    format!("must lie in (0, horizon], got {dt}"),
                ));
            }
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err(Error::invalid("bootstrap.level", "must lie in (0, 1)"));
        }
        let kernel = self.kernel_spec()?;
        if kernel.is_singular() {
            mollification_length(0.5, self.kappa)?;
        }
        self.initial_density()?;
        Ok(())
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::from_id(&self.kernel, self.dim)
    }

    pub fn initial_density(&self) -> Result<InitialDensity> {
        InitialDensity::from_id(
            &self.density,
            BoxDomain::new(self.support_lo.clone(), self.support_hi.clone())?,
        )
    }

    pub fn nu(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    /// Canonical JSON used for hashing and embedding in reports.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn content_hash(&self) -> String {
        content_hash(self.canonical_json().as_bytes())
    }
}

/// SHA-256 over `"blob <len>\0" + bytes`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything shared by the realizations at one `h`.
pub struct Prepared {
    pub h: f64,
    pub sample: LatticeSample,
    pub blob: BlobSpec,
    pub kernel: KernelSpec,
    pub mollified: Option<MollifiedKernel>,
    pub sde: SdeConfig,
    pub grid: GridSpec,
    pub pde: Option<PdeSolution>,
    pub output_steps: Vec<usize>,
}

impl Prepared {
    /// Builds the sample, widths, time grid and spatial grid, then solves the
    /// PDE when its density frames or velocity are needed.
    pub fn build(cfg: &ExperimentConfig, h: f64, need_pde_density: bool) -> Result<Self> {
        let mut prepared = Prepared::layout(cfg, h)?;
        if need_pde_density || !prepared.kernel.is_zero() {
            let steps = prepared.sde.steps();
            let sol = solve_pde(&cfg.initial_density()?, &prepared.pde_config(cfg))?;
            if sol.density.len() != steps + 1 {
                return Err(Error::Structural(format!(
                    "PDE recorded {} frames for {} SDE steps",
                    sol.density.len(),
                    steps
                )));
            }
            prepared.pde = Some(sol);
        }
        Ok(prepared)
    }

    /// Everything except the PDE solve.
    pub fn layout(cfg: &ExperimentConfig, h: f64) -> Result<Self> {
        let density = cfg.initial_density()?;
        let kernel = cfg.kernel_spec()?;
        let d = cfg.dim;
        let sample = build_lattice_sample(&density, h)?;
        let epsilon = blob_width(h, d, cfg.q0)?;
        let blob = BlobSpec::new(d, epsilon)?;
        let mollified = if kernel.is_singular() {
            Some(MollifiedKernel::new(
                kernel.clone(),
                mollification_length(h, cfg.kappa)?,
            )?)
        } else {
            None
        };
        let t = cfg.horizon;
        let dt_target = cfg
            .dt
            .unwrap_or_else(|| (epsilon * epsilon / 4.0).min(t / 64.0));
        let steps = ((t / dt_target) - 1e-9).ceil().max(1.0) as usize;
        let sde = SdeConfig {
            horizon: t,
            dt: t / steps as f64,
            sigma: cfg.sigma,
            seed: cfg.seed,
            weighting: cfg.weighting,
        };

        let force = match &mollified {
            Some(m) => m.sup_bound(),
            None => kernel.sup_bound,
        } * total_mass(&sample).max(density.declared_mass);
        let padding = cfg
            .grid
            .padding
            .unwrap_or(6.0 * (cfg.nu() * t).sqrt() + t * force + epsilon / 2.0);
        let lo: Vec<f64> = cfg.support_lo.iter().map(|v| v - padding).collect();
        let hi: Vec<f64> = cfg.support_hi.iter().map(|v| v + padding).collect();
        let grid = GridSpec::covering(&lo, &hi, cfg.grid.spacing(epsilon, d))?;

        let cadence = (steps / cfg.output_frames).max(1);
        let mut output_steps: Vec<usize> = (0..=steps).step_by(cadence).collect();
        if *output_steps.last().expect("nonempty") != steps {
            output_steps.push(steps);
        }

        Ok(Prepared {
            h,
            sample,
            blob,
            kernel,
            mollified,
            sde,
            grid,
            pde: None,
            output_steps,
        })
    }

    /// Solver settings on this layout, with a step dividing the SDE step and
    /// one recorded frame per SDE step.
    pub fn pde_config(&self, cfg: &ExperimentConfig) -> PdeConfig {
        let sub = stable_substeps(&self.grid, cfg.nu(), self.sde.dt);
        let mut pc = PdeConfig::new(
            self.grid.clone(),
            self.kernel.clone(),
            self.sde.dt / sub as f64,
            cfg.horizon,
        );
        pc.nu = cfg.nu();
        pc.delta = self.delta();
        pc.singular_mode = cfg.pde.singular_mode;
        pc.path = cfg.pde.path;
        pc.record_every = sub;
        pc
    }

    pub fn epsilon(&self) -> f64 {
        self.blob.epsilon
    }

    pub fn delta(&self) -> Option<f64> {
        self.mollified.as_ref().map(|m| m.delta())
    }

    pub fn sde_for(&self, realization: usize) -> SdeConfig {
        let mut s = self.sde.clone();
        s.seed = self.sde.seed.wrapping_add(realization as u64);
        s
    }

    /// Interacting system, or the regularized one for singular kernels.
    pub fn simulate_particles(&self, realization: usize) -> Result<TrajectoryEnsemble> {
        let sde = self.sde_for(realization);
        match &self.mollified {
            Some(m) => {
                simulate_regularized_with(&self.sample, m, &sde, &BrownianNoise::new(sde.seed))
            }
            None => simulate_interacting(&self.sample, &self.kernel, &sde),
        }
    }

    pub fn simulate_self_consistent(&self, realization: usize) -> Result<TrajectoryEnsemble> {
        let sde = self.sde_for(realization);
        match &self.pde {
            Some(sol) if !self.kernel.is_zero() => {
                let field = velocity_provider(sol);
                simulate_self_consistent(&self.sample, &field as &dyn VelocityField, &sde)
            }
            _ => simulate_self_consistent(
                &self.sample,
                &ZeroField {
                    dim: self.sample.dim,
                },
                &sde,
            ),
        }
    }

    fn deposits(&self, traj: &TrajectoryEnsemble) -> Result<Vec<GridField>> {
        self.output_steps
            .iter()
            .map(|&k| {
                let mut f = deposit_empirical(&self.sample, traj.frame(k), &self.blob, &self.grid)?;
                f.time = traj.time(k);
                Ok(f)
            })
            .collect()
    }

    fn pde_frames(&self) -> Vec<GridField> {
        let sol = self.pde.as_ref().expect("density frames requested");
        self.output_steps
            .iter()
            .map(|&k| sol.density[k].clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub h: f64,
    pub c: f64,
    pub threshold: f64,
    pub probability: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeDiagnostics {
    pub projected_mass: f64,
    pub mass_drift: f64,
    pub clipped_mass: f64,
    pub min_density: f64,
    pub max_velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingCheck {
    pub frames: usize,
    pub violations: usize,
    /// Largest `‖ρ_h − ρ̂_h‖ / bound` over frames and realizations.
    pub worst_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub particles: usize,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub dt: f64,
    pub steps: usize,
    pub output_frames: usize,
    pub grid_cells: Vec<usize>,
    pub grid_dx: Vec<f64>,
    pub pde: PdeDiagnostics,
    pub initial_error: f64,
    pub truncation_constant: f64,
    /// Headline error of the particle system against the PDE, per realization.
    pub errors: Vec<f64>,
    pub errors_self_consistent: Vec<f64>,
    pub headline: Summary,
    pub headline_self_consistent: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<ProbabilityEstimate>,
    /// `max_k |X − X̂|_{l_h^1}` per realization.
    pub coupling_l1: Vec<f64>,
    pub coupling_l2: Summary,
    pub coupling_check: CouplingCheck,
    pub out_of_grid: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub content_hash: String,
    /// The rate exponent `1/(12d)`.
    pub rate_exponent: f64,
    pub rows: Vec<ConvergenceRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<SlopeFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_c: Option<f64>,
}

struct RealizationResult {
    error: f64,
    error_self: f64,
    coupling_l1: f64,
    coupling_l2: f64,
    frames: usize,
    violations: usize,
    worst_ratio: f64,
    out_of_grid: u64,
}

/// `2 c_d ‖ρ₀‖_∞ max_k‖∂φ/∂x_k‖_∞ ε^{-d/2-1}` with `c_d = √d`.
pub fn coupling_constant(sup_density: f64, blob: &BlobSpec) -> f64 {
    let d = blob.dim as f64;
    2.0 * d.sqrt() * sup_density * blob.max_partial_sup() * blob.epsilon.powf(-d / 2.0 - 1.0)
}

fn run_realization(
    p: &Prepared,
    m: usize,
    pde_frames: &[GridField],
    sup_density: f64,
) -> Result<RealizationResult> {
    let a = p.simulate_particles(m)?;
    let b = p.simulate_self_consistent(m)?;
    let rho_h = p.deposits(&a)?;
    let rho_hat = p.deposits(&b)?;
    let error = sobolev_error(pde_frames, &rho_h)?.headline;
    let error_self = sobolev_error(pde_frames, &rho_hat)?.headline;
    let coupling_l1 = coupling_distance(&a, &b, 1.0)?;
    let coupling_l2 = coupling_distance(&a, &b, 2.0)?;
    let constant = coupling_constant(sup_density, &p.blob);
    let mut violations = 0;
    let mut worst_ratio = 0.0f64;
    for (idx, &k) in p.output_steps.iter().enumerate() {
        let lhs = l2_norm_sq(&rho_h[idx].difference(&rho_hat[idx])?).sqrt();
        let diff: Vec<f64> = a
            .frame(k)
            .iter()
            .zip(b.frame(k))
            .map(|(x, y)| x - y)
            .collect();
        let rhs = constant * lhp_norm(&diff, p.sample.dim, p.h, 1.0)?;
        if lhs > rhs {
            violations += 1;
        }
        if lhs > 0.0 {
            worst_ratio = worst_ratio.max(if rhs > 0.0 { lhs / rhs } else { f64::INFINITY });
        }
    }
    Ok(RealizationResult {
        error,
        error_self,
        coupling_l1,
        coupling_l2,
        frames: p.output_steps.len(),
        violations,
        worst_ratio,
        out_of_grid: b.out_of_grid,
    })
}

/// Fraction of realizations with error below `c·h^{1/(12d)}`, with a Wilson interval.
pub fn event_probability(h: f64, dim: usize, errors: &[f64], c: f64) -> ProbabilityEstimate {
    let threshold = c * h.powf(1.0 / (12.0 * dim as f64));
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    let (ci_low, ci_high) = wilson_interval(hits, errors.len(), WILSON_Z);
    ProbabilityEstimate {
        h,
        c,
        threshold,
        probability: if errors.is_empty() {
            0.0
        } else {
            hits as f64 / errors.len() as f64
        },
        ci_low,
        ci_high,
    }
}

/// Smallest `c` with `P̂[error < c·r] ≥ 1 − c·r`, `r = h^{1/(12d)}`.
pub fn fitted_constant(h: f64, dim: usize, errors: &[f64]) -> f64 {
    let r = h.powf(1.0 / (12.0 * dim as f64));
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut best = 1.0 / r;
    for (j, e) in std::iter::once(0.0)
        .chain(sorted.iter().copied())
        .enumerate()
    {
        let c = e.max(1.0 - j as f64 / m) / r;
        best = best.min(c);
    }
    best
}

/// Per-`h` event probabilities of a finished sweep at constant `c`.
pub fn theorem1_probability(report: &ConvergenceReport, c: f64) -> Vec<ProbabilityEstimate> {
    report
        .rows
        .iter()
        .map(|row| event_probability(row.h, report.config.dim, &row.errors, c))
        .collect()
}

/// A single constant serving every `h` of the sweep.
pub fn fitted_report_constant(report: &ConvergenceReport) -> f64 {
    report
        .rows
        .iter()
        .map(|row| fitted_constant(row.h, report.config.dim, &row.errors))
        .fold(0.0, f64::max)
}

pub fn run_convergence_sweep(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let density = cfg.initial_density()?;
    let mut rows = Vec::with_capacity(cfg.h.len());
    for &h in &cfg.h {
        let p = Prepared::build(cfg, h, true).map_err(|e| e.at(h, None))?;
        let pde_frames = p.pde_frames();
        let results: Vec<RealizationResult> = (0..cfg.realizations)
            .into_par_iter()
            .map(|m| {
                run_realization(&p, m, &pde_frames, density.sup_norm).map_err(|e| e.at(h, Some(m)))
            })
            .collect::<Result<_>>()?;
        let sol = p.pde.as_ref().expect("solved above");
        let errors: Vec<f64> = results.iter().map(|r| r.error).collect();
        let errors_self: Vec<f64> = results.iter().map(|r| r.error_self).collect();
        let l2: Vec<f64> = results.iter().map(|r| r.coupling_l2).collect();
        rows.push(ConvergenceRow {
            h,
            particles: p.sample.len(),
            epsilon: p.epsilon(),
            delta: p.delta(),
            dt: p.sde.dt,
            steps: p.sde.steps(),
            output_frames: p.output_steps.len(),
            grid_cells: p.grid.cells.clone(),
            grid_dx: p.grid.spacings(),
            pde: PdeDiagnostics {
                projected_mass: sol.projected_mass,
                mass_drift: sol.mass_drift(),
                clipped_mass: sol.clipped_mass,
                min_density: sol
                    .min_density
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min),
                max_velocity: sol
                    .velocity
                    .iter()
                    .map(|v| v.max_magnitude())
                    .fold(0.0, f64::max),
            },
            initial_error: initial_error(&p.sample, &density, &p.blob, &p.grid)?,
            truncation_constant: truncation_constant(&p.sample, &p.blob, cfg.horizon),
            headline: Summary::of(&errors)?,
            headline_self_consistent: Summary::of(&errors_self)?,
            probability: (cfg.realizations >= 8)
                .then(|| event_probability(h, cfg.dim, &errors, cfg.probability_c)),
            errors,
            errors_self_consistent: errors_self,
            coupling_l1: results.iter().map(|r| r.coupling_l1).collect(),
            coupling_l2: Summary::of(&l2)?,
            coupling_check: CouplingCheck {
                frames: results.iter().map(|r| r.frames).sum(),
                violations: results.iter().map(|r| r.violations).sum(),
                worst_ratio: results.iter().map(|r| r.worst_ratio).fold(0.0, f64::max),
            },
            out_of_grid: results.iter().map(|r| r.out_of_grid).sum(),
        });
    }
    let slope = if rows.len() >= 2 {
        let hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
        let errs: Vec<Vec<f64>> = rows.iter().map(|r| r.errors.clone()).collect();
        Some(bootstrap_loglog_slope(
            &hs,
            &errs,
            cfg.bootstrap.resamples,
            cfg.bootstrap.level,
            cfg.seed,
        )?)
    } else {
        None
    };
    let mut report = ConvergenceReport {
        config: cfg.clone(),
        content_hash: cfg.content_hash(),
        rate_exponent: 1.0 / (12.0 * cfg.dim as f64),
        rows,
        slope,
        fitted_c: None,
    };
    if cfg.realizations >= 8 {
        report.fitted_c = Some(fitted_report_constant(&report));
    }
    Ok(report)
}

/// `‖ρ_h(·,0) − ρ₀‖²` on the grid.
pub fn initial_error(
    sample: &LatticeSample,
    density: &InitialDensity,
    blob: &BlobSpec,
    grid: &GridSpec,
) -> Result<f64> {
    let deposit = deposit_empirical(sample, &sample.positions, blob, grid)?;
    let projected = GridField::from_fn(grid, 0.0, |x| density.eval(x));
    Ok(l2_norm_sq(&deposit.difference(&projected)?))
}

/// `h^{2d} s ‖∇φ_ε‖² Σ_i ρ₀(hθ_i)²`
pub fn truncation_constant(sample: &LatticeSample, blob: &BlobSpec, s: f64) -> f64 {
    let sum: f64 = sample.density_values.iter().map(|v| v * v).sum();
    sample.h.powi(2 * sample.dim as i32) * s * blob.scaled_grad_l2_sq() * sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub h: f64,
    pub particles: usize,
    pub epsilon: f64,
    pub j: usize,
    /// `(1/N_h) Σ_{i≠j} ∫₀^t P(|X̂_i − X̂_j| ≤ 2ε) ds`
    pub estimate: f64,
    pub std_error: f64,
    /// The same sum divided by `N_h − 1` instead of `N_h`.
    pub per_other_particle: f64,
    /// `ε^{d−1}`
    pub epsilon_power: f64,
    /// `1/(N_h ε)`
    pub inverse_count_epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub all_j_average: Option<f64>,
    pub out_of_grid: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub config: ExperimentConfig,
    pub content_hash: String,
    pub horizon: f64,
    pub rows: Vec<SeparationRow>,
}

/// Per-realization time integrals `∫ 1{|X̂_i − X̂_j| ≤ r}` for every `i`,
/// trapezoid over all steps.
fn encounter_times(traj: &TrajectoryEnsemble, j: usize, radius: f64) -> Vec<f64> {
    let d = traj.dim;
    let mut out = vec![0.0; traj.count];
    let mut prev = vec![0.0; traj.count];
    for k in 0..=traj.steps {
        let f = traj.frame(k);
        let xj = &f[j * d..(j + 1) * d];
        for i in 0..traj.count {
            let r2: f64 = (0..d).map(|c| (f[i * d + c] - xj[c]).powi(2)).sum();
            let ind = if r2.sqrt() <= radius { 1.0 } else { 0.0 };
            if k > 0 {
                out[i] += 0.5 * traj.dt * (ind + prev[i]);
            }
            prev[i] = ind;
        }
    }
    out
}

pub fn estimate_separation(cfg: &ExperimentConfig, j: Option<usize>) -> Result<SeparationReport> {
    cfg.validate()?;
    if cfg.realizations < 8 {
        return Err(Error::invalid(
            "realizations",
            "the separation estimate needs at least 8",
        ));
    }
    let density = cfg.initial_density()?;
    let d = cfg.dim;
    let mut rows = Vec::new();
    for &h in &cfg.h {
        let p = Prepared::build(cfg, h, false).map_err(|e| e.at(h, None))?;
        let n = p.sample.len();
        let jj = j
            .or(cfg.separation.j)
            .unwrap_or_else(|| density.mode_index(&p.sample));
        if jj >= n {
            return Err(Error::invalid(
                "separation.j",
                format!("index {jj} out of range for {n} particles"),
            )
            .at(h, None));
        }
        let radius = 2.0 * p.epsilon();
        let per_real: Vec<(f64, Option<f64>, u64)> = (0..cfg.realizations)
            .into_par_iter()
            .map(|m| {
                let traj = p
                    .simulate_self_consistent(m)
                    .map_err(|e| e.at(h, Some(m)))?;
                let sum_except = |j: usize| -> f64 {
                    encounter_times(&traj, j, radius)
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != j)
                        .map(|(_, v)| v)
                        .sum()
                };
                let e = sum_except(jj) / n as f64;
                let all = cfg
                    .separation
                    .all_j
                    .then(|| (0..n).map(|j| sum_except(j) / n as f64).sum::<f64>() / n as f64);
                Ok((e, all, traj.out_of_grid))
            })
            .collect::<Result<_>>()?;
        let values: Vec<f64> = per_real.iter().map(|r| r.0).collect();
        let estimate = values.iter().sum::<f64>() / values.len() as f64;
        let eps = p.epsilon();
        rows.push(SeparationRow {
            h,
            particles: n,
            epsilon: eps,
            j: jj,
            estimate,
            std_error: std_dev(&values) / (values.len() as f64).sqrt(),
            per_other_particle: if n > 1 {
                estimate * n as f64 / (n - 1) as f64
            } else {
                0.0
            },
            epsilon_power: eps.powi(d as i32 - 1),
            inverse_count_epsilon: 1.0 / (n as f64 * eps),
            all_j_average: cfg.separation.all_j.then(|| {
                per_real.iter().map(|r| r.1.unwrap_or(0.0)).sum::<f64>() / per_real.len() as f64
            }),
            out_of_grid: per_real.iter().map(|r| r.2).sum(),
        });
    }
    Ok(SeparationReport {
        config: cfg.clone(),
        content_hash: cfg.content_hash(),
        horizon: cfg.horizon,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            dim: 1,
            density: "bump".into(),
            support_lo: vec![-1.0],
            support_hi: vec![1.0],
            kernel: "tanh-gauss".into(),
            kappa: 0.75,
            horizon: 0.1,
            sigma: 1.0,
            weighting: Weighting::Lattice,
            h: vec![0.25],
            realizations: 2,
            seed: 3,
            q0: None,
            probability_c: 1.0,
            dt: Some(0.025),
            output_frames: 64,
            grid: GridPolicy {
                dx: Some(0.05),
                ..GridPolicy::default()
            },
            pde: PdePolicy::default(),
            bootstrap: BootstrapSettings::default(),
            separation: SeparationSettings::default(),
        }
    }

    #[test]
    fn validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.h = vec![0.1, 0.2];
        assert!(c.validate().is_err());
        c.h = vec![1.5];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.kernel = "gravity".into();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("tanh-gauss"), "{msg}");
    }

    #[test]
    fn content_hash_is_git_style() {
        // empty blob under the git framing
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        let c = small_config();
        assert_eq!(c.content_hash(), c.clone().content_hash());
    }

    #[test]
    fn zero_kernel_has_zero_coupling() {
        let mut c = small_config();
        c.kernel = "zero".into();
        let r = run_convergence_sweep(&c).unwrap();
        assert!(r.rows[0].coupling_l1.iter().all(|&v| v == 0.0));
        assert_eq!(r.rows[0].errors, r.rows[0].errors_self_consistent);
    }

    #[test]
    fn sweep_is_deterministic() {
        let c = small_config();
        let a = serde_json::to_string(&run_convergence_sweep(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run_convergence_sweep(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probability_edges() {
        let errs = [0.1, 0.2, 0.3];
        assert_eq!(event_probability(0.1, 1, &errs, 1e9).probability, 1.0);
        assert_eq!(event_probability(0.1, 1, &errs, 0.0).probability, 0.0);
    }

    #[test]
    fn fitted_constant_oracle() {
        // brute-force scan of c
        let errs = [0.05, 0.3, 0.12, 0.7, 0.2, 0.01, 0.4, 0.33];
        let h: f64 = 0.1;
        let r = h.powf(1.0 / 12.0);
        let fitted = fitted_constant(h, 1, &errs);
        let ok = |c: f64| {
            let p = errs.iter().filter(|&&e| e < c * r).count() as f64 / errs.len() as f64;
            p >= 1.0 - c * r
        };
        assert!(ok(fitted + 1e-9));
        let mut c = 0.0;
        while c < fitted - 1e-6 {
            assert!(!ok(c), "c = {c} already satisfies the event");
            c += 1e-4;
        }
    }

    #[test]
    fn truncation_constant_properties() {
        let density = InitialDensity::bump(BoxDomain::cube(1, -1.0, 1.0).unwrap());
        let blob = |h: f64| BlobSpec::new(1, blob_width(h, 1, None).unwrap()).unwrap();
        let s = build_lattice_sample(&density, 0.1).unwrap();
        assert_eq!(truncation_constant(&s, &blob(0.1), 0.0), 0.0);
        let one = truncation_constant(&s, &blob(0.1), 0.7);
        assert_eq!(truncation_constant(&s, &blob(0.1), 1.4), 2.0 * one);
        // direct evaluation of the defining sum
        let direct: f64 = s
            .density_values
            .iter()
            .map(|v| 0.1f64.powi(2) * 0.7 * blob(0.1).scaled_grad_l2_sq() * v * v)
            .sum();
        assert_abs_diff_eq!(one, direct, epsilon = 1e-12 * direct);
        let mut prev = f64::INFINITY;
        for h in [0.2, 0.1, 0.05, 0.025] {
            let s = build_lattice_sample(&density, h).unwrap();
            let v = truncation_constant(&s, &blob(h), 1.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn initial_error_zero_density() {
        let support = BoxDomain::cube(1, -1.0, 1.0).unwrap();
        let zero = InitialDensity::custom(support, 0.0, 0.0, 0.0, |_| 0.0);
        let s = build_lattice_sample(&zero, 0.1).unwrap();
        let blob = BlobSpec::new(1, 0.4).unwrap();
        let g = GridSpec::covering(&[-2.0], &[2.0], 0.05).unwrap();
        assert_eq!(initial_error(&s, &zero, &blob, &g).unwrap(), 0.0);
    }

    #[test]
    fn pinned_pair_separation() {
        let mut c = small_config();
        c.kernel = "zero".into();
        c.density = "uniform".into();
        c.support_lo = vec![0.0];
        c.support_hi = vec![0.5];
        c.h = vec![0.5];
        c.sigma = 0.0;
        c.horizon = 0.4;
        c.dt = Some(0.1);
        c.realizations = 8;
        let r = estimate_separation(&c, None).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.particles, 2);
        assert_abs_diff_eq!(row.per_other_particle, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(row.estimate, 0.2, epsilon = 1e-12);
        assert!(row.std_error < 1e-15);
    }

    #[test]
    fn distant_pair_never_meets() {
        let mut c = small_config();
        c.kernel = "zero".into();
        c.density = "uniform".into();
        c.support_lo = vec![0.0];
        c.support_hi = vec![0.5];
        c.h = vec![0.5];
        // ε = 0.5^{q0} = 0.005, gap = 100 ε
        c.q0 = Some((0.005f64).ln() / (0.5f64).ln());
        c.horizon = 1e-4;
        c.dt = Some(1e-5);
        c.realizations = 32;
        c.grid.dx = Some(0.1);
        let r = estimate_separation(&c, Some(0)).unwrap();
        assert_eq!(r.rows[0].estimate, 0.0);
        c.realizations = 4;
        assert!(estimate_separation(&c, Some(0)).is_err());
    }
}

//! Euler–Maruyama integrators for the interacting, regularized and
//! self-consistent particle systems, all driven by the same counter-based
//! Brownian increments, plus the `l_h^p` coupling distances.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Interaction, KernelSpec, MollifiedKernel};
use crate::noise::{BrownianNoise, NoiseSource};
use crate::sampling::LatticeSample;

/// How the pair interaction is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_j = ρ₀(hθ_j)·h^d`
    #[default]
    Lattice,
    /// `w_j = 1/N` (equal-weight system).
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub weighting: Weighting,
}

fn default_sigma() -> f64 {
    1.0
}

impl SdeConfig {
    pub fn new(horizon: f64, dt: f64, seed: u64) -> Self {
        SdeConfig {
            horizon,
            dt,
            sigma: 1.0,
            seed,
            weighting: Weighting::Lattice,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(
                "dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        if !(self.horizon >= self.dt * (1.0 - 1e-12)) {
            return Err(Error::invalid(
                "horizon",
                format!("must be at least dt, got {}", self.horizon),
            ));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(
                "sigma",
                format!("must be nonnegative, got {}", self.sigma),
            ));
        }
        Ok(())
    }

    /// Number of steps `K` with `K·dt ≥ T` (exact when `T/dt` is an integer up
    /// to rounding).
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SystemTag {
    Interacting,
    Regularized { delta: f64 },
    SelfConsistent,
}

/// Particle paths `X_i(t_k)`, `t_k = k·dt`, stored frame by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEnsemble {
    pub dim: usize,
    pub count: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub system: SystemTag,
    /// `(steps+1)·count·dim` values, frame-major.
    pub states: Vec<f64>,
    /// Self-consistent runs: number of field queries that fell outside the grid.
    pub out_of_grid: u64,
}

impl TrajectoryEnsemble {
    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.count * self.dim;
        &self.states[k * n..(k + 1) * n]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn final_frame(&self) -> &[f64] {
        self.frame(self.steps)
    }
}

/// Spatial drift of the self-consistent process, `F(x, t)`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    /// Last time at which the field may be queried.
    fn horizon(&self) -> f64;
    /// Writes `F(x, t)`; returns `false` when `x` lies outside the field's
    /// domain (the value written is then zero).
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> bool;
}

#[derive(Clone, Copy, Debug)]
pub struct ZeroField {
    pub dim: usize,
}

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> f64 {
        f64::INFINITY
    }
    fn velocity(&self, _x: &[f64], _t: f64, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        true
    }
}

/// Closure-backed field, defined everywhere.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> f64 {
        f64::INFINITY
    }
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> bool {
        (self.f)(x, t, out);
        true
    }
}

fn check_sample(sample: &LatticeSample, dim: usize) -> Result<()> {
    if sample.dim != dim {
        return Err(Error::Structural(format!(
            "sample dimension {} does not match kernel/field dimension {dim}",
            sample.dim
        )));
    }
    if sample.is_empty() {
        return Err(Error::EmptySample { h: sample.h });
    }
    Ok(())
}

fn interaction_weights(sample: &LatticeSample, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Lattice => sample.weights.clone(),
        Weighting::Uniform => vec![1.0 / sample.len() as f64; sample.len()],
    }
}

/// Generic Euler–Maruyama loop; `drift` fills the per-particle drift for the
/// state at step `k` and returns the count of out-of-domain queries.
fn integrate<N, D>(
    sample: &LatticeSample,
    cfg: &SdeConfig,
    noise: &N,
    system: SystemTag,
    drift: D,
) -> Result<TrajectoryEnsemble>
where
    N: NoiseSource + ?Sized,
    D: Fn(usize, &[f64], &mut [f64]) -> Result<u64>,
{
    cfg.validate()?;
    let d = sample.dim;
    let n = sample.len();
    let steps = cfg.steps();
    let frame_len = n * d;
    let mut states = Vec::with_capacity((steps + 1) * frame_len);
    states.extend_from_slice(&sample.positions);
    let mut rates = vec![0.0; frame_len];
    let mut out_of_grid = 0u64;

    for k in 0..steps {
        let current = &states[k * frame_len..(k + 1) * frame_len];
        out_of_grid += drift(k, current, &mut rates)?;
        let mut next = vec![0.0; frame_len];
        next.par_chunks_mut(d)
            .zip(current.par_chunks(d))
            .zip(rates.par_chunks(d))
            .enumerate()
            .for_each(|(i, ((x_new, x), v))| {
                let mut db = [0.0f64; 8];
                let db = if d <= 8 {
                    &mut db[..d]
                } else {
                    unreachable!("dimension above 8")
                };
                noise.increment(i, k, cfg.dt, db);
                for c in 0..d {
                    x_new[c] = x[c] + cfg.dt * v[c] + cfg.sigma * db[c];
                }
            });
        if let Some(pos) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                particle: pos / d,
            });
        }
        states.extend_from_slice(&next);
    }

    Ok(TrajectoryEnsemble {
        dim: d,
        count: n,
        h: sample.h,
        dt: cfg.dt,
        steps,
        seed: cfg.seed,
        system,
        states,
        out_of_grid,
    })
}

/// Pairwise drift `Σ_j F(X_i − X_j) w_j`, self term included.
fn pair_drift(
    interaction: &Interaction,
    weights: &[f64],
    state: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let d = interaction.dim();
    if interaction.is_zero() {
        // Σ_j 0·w_j, written out so the arithmetic matches the zero-field path.
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }
    let failures: Vec<Error> = out
        .par_chunks_mut(d)
        .enumerate()
        .filter_map(|(i, acc)| {
            let xi = &state[i * d..(i + 1) * d];
            let mut diff = [0.0f64; 8];
            let mut f = [0.0f64; 8];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &w) in weights.iter().enumerate() {
                let xj = &state[j * d..(j + 1) * d];
                for c in 0..d {
                    diff[c] = xi[c] - xj[c];
                }
                if let Err(e) = interaction.eval_into(&diff[..d], &mut f[..d]) {
                    return Some(e);
                }
                for c in 0..d {
                    acc[c] += f[c] * w;
                }
            }
            None
        })
        .collect();
    match failures.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d > 8 {
        return Err(Error::invalid(
            "dim",
            format!("supported dimensions are 1..=8, got {d}"),
        ));
    }
    Ok(())
}

/// Interacting system with a bounded Lipschitz kernel.
pub fn simulate_interacting(
    sample: &LatticeSample,
    kernel: &KernelSpec,
    cfg: &SdeConfig,
) -> Result<TrajectoryEnsemble> {
    simulate_interacting_with_noise(sample, kernel, cfg, &BrownianNoise::new(cfg.seed))
}

pub fn simulate_interacting_with_noise<N: NoiseSource + ?Sized>(
    sample: &LatticeSample,
    kernel: &KernelSpec,
    cfg: &SdeConfig,
    noise: &N,
) -> Result<TrajectoryEnsemble> {
    if kernel.is_singular() {
        return Err(Error::invalid(
            "kernel",
            format!("`{}` is singular; use the regularized system", kernel.id()),
        ));
    }
    check_dim(kernel.dim)?;
    check_sample(sample, kernel.dim)?;
    let interaction = Interaction::Exact(kernel.clone());
    let weights = interaction_weights(sample, cfg.weighting);
    integrate(
        sample,
        cfg,
        noise,
        SystemTag::Interacting,
        |_, state, out| pair_drift(&interaction, &weights, state, out).map(|_| 0),
    )
}

/// Regularized system with `F_{0,δ}` in place of `F₀`.
pub fn simulate_regularized(
    sample: &LatticeSample,
    kernel: &KernelSpec,
    delta: f64,
    cfg: &SdeConfig,
) -> Result<TrajectoryEnsemble> {
    let mollified = MollifiedKernel::new(kernel.clone(), delta)?;
    simulate_regularized_with(sample, &mollified, cfg, &BrownianNoise::new(cfg.seed))
}

/// Regularized system with a prebuilt mollified kernel and explicit noise.
pub fn simulate_regularized_with<N: NoiseSource + ?Sized>(
    sample: &LatticeSample,
    kernel: &MollifiedKernel,
    cfg: &SdeConfig,
    noise: &N,
) -> Result<TrajectoryEnsemble> {
    check_dim(kernel.dim())?;
    check_sample(sample, kernel.dim())?;
    let interaction = Interaction::Mollified(kernel.clone());
    let weights = interaction_weights(sample, cfg.weighting);
    integrate(
        sample,
        cfg,
        noise,
        SystemTag::Regularized {
            delta: kernel.delta(),
        },
        |_, state, out| pair_drift(&interaction, &weights, state, out).map(|_| 0),
    )
}

/// Self-consistent process driven by the given field.
pub fn simulate_self_consistent<F: VelocityField + ?Sized>(
    sample: &LatticeSample,
    field: &F,
    cfg: &SdeConfig,
) -> Result<TrajectoryEnsemble> {
    simulate_self_consistent_with_noise(sample, field, cfg, &BrownianNoise::new(cfg.seed))
}

pub fn simulate_self_consistent_with_noise<F: VelocityField + ?Sized, N: NoiseSource + ?Sized>(
    sample: &LatticeSample,
    field: &F,
    cfg: &SdeConfig,
    noise: &N,
) -> Result<TrajectoryEnsemble> {
    let d = field.dim();
    check_dim(d)?;
    check_sample(sample, d)?;
    cfg.validate()?;
    // the last drift evaluation happens at t_{K-1}
    let last_query = (cfg.steps() - 1) as f64 * cfg.dt;
    if last_query > field.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Horizon {
            requested: last_query,
            available: field.horizon(),
        });
    }
    integrate(
        sample,
        cfg,
        noise,
        SystemTag::SelfConsistent,
        |k, state, out| {
            let t = k as f64 * cfg.dt;
            let outside = AtomicU64::new(0);
            out.par_chunks_mut(d)
                .zip(state.par_chunks(d))
                .for_each(|(v, x)| {
                    if !field.velocity(x, t, v) {
                        outside.fetch_add(1, Ordering::Relaxed);
                    }
                });
            Ok(outside.into_inner())
        },
    )
}

/// `(h^d Σ_i |x_i|^p)^{1/p}` over vectors of length `dim`.
pub fn lhp_norm(values: &[f64], dim: usize, h: f64, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::invalid("p", format!("must be at least 1, got {p}")));
    }
    if values.is_empty() || dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::invalid(
            "values",
            "need a nonempty list of dim-vectors",
        ));
    }
    let sum: f64 = values
        .chunks(dim)
        .map(|x| x.iter().map(|c| c * c).sum::<f64>().sqrt().powf(p))
        .sum();
    Ok((h.powi(dim as i32) * sum).powf(1.0 / p))
}

/// `l_h^p` norm of the per-particle difference of two frames.
pub fn frame_distance(a: &[f64], b: &[f64], dim: usize, h: f64, p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Structural("frames have different lengths".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    lhp_norm(&diff, dim, h, p)
}

/// `max_k |X^a(t_k) − X^b(t_k)|_{l_h^p}`.
pub fn coupling_distance(a: &TrajectoryEnsemble, b: &TrajectoryEnsemble, p: f64) -> Result<f64> {
    if a.dim != b.dim || a.count != b.count || a.steps != b.steps || a.dt != b.dt || a.h != b.h {
        return Err(Error::Structural(
            "trajectories differ in sample or time grid".into(),
        ));
    }
    if a.seed != b.seed {
        return Err(Error::Structural(format!(
            "trajectories use different seeds ({} vs {})",
            a.seed, b.seed
        )));
    }
    if a.frame(0) != b.frame(0) {
        return Err(Error::Structural(
            "trajectories start from different samples".into(),
        ));
    }
    let mut max = 0.0f64;
    for k in 0..=a.steps {
        max = max.max(frame_distance(a.frame(k), b.frame(k), a.dim, a.h, p)?);
    }
    Ok(max)
}

//! Batch front end: configuration loading, run manifests and the five
//! subcommands (`sample`, `simulate`, `pde`, `converge`, `separation`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use meanfield::dynamics::{simulate_interacting, simulate_regularized_with, TrajectoryEnsemble};
use meanfield::experiments::{
    estimate_separation, run_convergence_sweep, ConvergenceReport, ExperimentConfig, Prepared,
    SeparationReport,
};
use meanfield::io::{encode_fields, encode_trajectory, write_fields_csv, write_trajectory_csv};
use meanfield::kernels::{mollification_length, MollifiedKernel};
use meanfield::noise::BrownianNoise;
use meanfield::pde::{max_diffusion_dt, solve_pde};
use meanfield::sampling::build_lattice_sample;

/// Environment variable consulted for the worker count.
pub const WORKERS_ENV: &str = "MEANFIELD_WORKERS";

pub const PRESETS: [(&str, &str); 3] = [
    ("smoke", include_str!("presets/smoke.toml")),
    ("desk", include_str!("presets/desk.toml")),
    (
        "paper-direction",
        include_str!("presets/paper-direction.toml"),
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Sample,
    Simulate,
    Pde,
    Converge,
    Separation,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Simulate => "simulate",
            Command::Pde => "pde",
            Command::Converge => "converge",
            Command::Separation => "separation",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemChoice {
    /// Interacting system; singular kernels switch to the regularized one.
    #[default]
    Interacting,
    Regularized,
    SelfConsistent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub system: SystemChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default)]
    pub realization: usize,
    #[serde(default)]
    pub csv: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Solver step; defaults to the largest stable step dividing the SDE step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Keep every k-th frame; defaults to about 64 frames over the horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub csv: bool,
}

/// One run's configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub pde: PdeSection,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved configuration")
    }

    fn pick_h(&self, key: &str, h: Option<f64>) -> Result<f64> {
        let h = h.unwrap_or(self.experiment.h[0]);
        if !(h > 0.0 && h < 1.0) {
            bail!("invalid `{key}.h`: must lie in (0, 1), got {h}");
        }
        Ok(h)
    }
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            anyhow!(
                "unknown preset `{name}`; valid presets: {}",
                names.join(", ")
            )
        })
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a configuration, layering it over a preset when one is named by
/// `preset_override` or the file's `preset` key.
pub fn parse_config(text: &str, preset_override: Option<&str>) -> Result<RunConfig> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| anyhow!("invalid configuration: {e}"))?;
    let preset = preset_override.map(str::to_owned).or_else(|| {
        table
            .get("preset")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
    });
    let cfg: RunConfig = match &preset {
        None => toml::from_str(text).map_err(|e| anyhow!("invalid configuration: {e}"))?,
        Some(name) => {
            let mut base: toml::Table = toml::from_str(preset_text(name)?).expect("presets parse");
            merge(&mut base, table);
            base.insert("preset".into(), toml::Value::String(name.clone()));
            let merged = toml::to_string(&base).expect("tables serialize");
            toml::from_str(&merged).map_err(|e| {
                anyhow!("invalid configuration (after applying preset `{name}`): {e}")
            })?
        }
    };
    cfg.experiment
        .validate()
        .context("invalid `experiment` section")?;
    if cfg.workers == Some(0) {
        bail!("invalid `workers`: must be at least 1");
    }
    Ok(cfg)
}

/// Loads a TOML configuration, or the resolved configuration stored in a
/// run manifest (`.json`).
pub fn load_config(path: &Path, preset_override: Option<&str>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        return parse_config(&manifest.config_toml, None);
    }
    parse_config(&text, preset_override).with_context(|| format!("in {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub status: String,
    pub workers: usize,
    /// Resolved configuration, replayable with `--config manifest.json`.
    pub config_toml: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
    pub started_unix: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<OutputRecord>,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub preset: Option<String>,
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m)? + "\n";
    fs::write(out.join("manifest.json"), text).context("writing manifest.json")
}

/// Loads the configuration, writes the manifest, runs the command on a pool
/// of the resolved size and finalizes the manifest.
pub fn execute(inv: &Invocation) -> Result<RunManifest> {
    let cfg = load_config(&inv.config, inv.preset.as_deref())?;
    let source_bytes = fs::read(&inv.config)?;
    let workers = inv
        .workers
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!("invalid `--workers`: must be at least 1");
    }
    fs::create_dir_all(&inv.out).with_context(|| format!("creating {}", inv.out.display()))?;
    let config_toml = cfg.to_toml()?;
    let mut manifest = RunManifest {
        tool: "meanfield".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: inv.command,
        status: "running".into(),
        workers,
        config_hash: meanfield::experiments::content_hash(config_toml.as_bytes()),
        config_toml,
        source: Some(inv.config.display().to_string()),
        source_hash: Some(sha256_hex(&source_bytes)),
        started_unix: now_unix(),
        finished_unix: None,
        elapsed_seconds: None,
        error: None,
        outputs: Vec::new(),
    };
    write_manifest(&inv.out, &manifest)?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building the worker pool")?;
    let result = pool.install(|| run_command(inv.command, &cfg, &inv.out));
    manifest.finished_unix = Some(now_unix());
    manifest.elapsed_seconds = Some(start.elapsed().as_secs_f64());
    match result {
        Ok(files) => {
            for f in files {
                let bytes = fs::read(inv.out.join(&f))?;
                manifest.outputs.push(OutputRecord {
                    path: f,
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                });
            }
            manifest.status = "complete".into();
            write_manifest(&inv.out, &manifest)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(format!("{e:#}"));
            write_manifest(&inv.out, &manifest)?;
            Err(e)
        }
    }
}

/// Runs one command, returning the written file names relative to `out`.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    match cmd {
        Command::Sample => cmd_sample(cfg, out),
        Command::Simulate => cmd_simulate(cfg, out),
        Command::Pde => cmd_pde(cfg, out),
        Command::Converge => cmd_converge(cfg, out),
        Command::Separation => cmd_separation(cfg, out),
    }
}

fn write_file(out: &Path, name: &str, bytes: &[u8], files: &mut Vec<String>) -> Result<()> {
    fs::write(out.join(name), bytes).with_context(|| format!("writing {name}"))?;
    files.push(name.to_owned());
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let h = cfg.pick_h("sample", cfg.sample.h)?;
    let density = cfg.experiment.initial_density()?;
    let sample = build_lattice_sample(&density, h)?;
    let mut files = Vec::new();
    let mut csv = Vec::new();
    sample.write_csv(&mut csv)?;
    write_file(out, "sample.csv", &csv, &mut files)?;
    write_file(
        out,
        "sample.json",
        &json_bytes(&sample.metadata())?,
        &mut files,
    )?;
    Ok(files)
}

#[derive(Serialize)]
struct TrajectorySummary<'a> {
    system: &'a meanfield::dynamics::SystemTag,
    h: f64,
    particles: usize,
    dim: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    out_of_grid: u64,
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let h = cfg.pick_h("simulate", cfg.simulate.h)?;
    let exp = &cfg.experiment;
    let self_consistent = cfg.simulate.system == SystemChoice::SelfConsistent;
    let prepared = if self_consistent {
        Prepared::build(exp, h, false)?
    } else {
        Prepared::layout(exp, h)?
    };
    let m = cfg.simulate.realization;
    let sde = prepared.sde_for(m);
    let traj: TrajectoryEnsemble = match cfg.simulate.system {
        SystemChoice::SelfConsistent => prepared.simulate_self_consistent(m)?,
        SystemChoice::Interacting if !prepared.kernel.is_singular() => {
            simulate_interacting(&prepared.sample, &prepared.kernel, &sde)?
        }
        _ => {
            let mollified = match &prepared.mollified {
                Some(k) => k.clone(),
                None => MollifiedKernel::new(
                    prepared.kernel.clone(),
                    mollification_length(h, exp.kappa)?,
                )?,
            };
            simulate_regularized_with(
                &prepared.sample,
                &mollified,
                &sde,
                &BrownianNoise::new(sde.seed),
            )?
        }
    };
    let mut files = Vec::new();
    write_file(out, "trajectory.bin", &encode_trajectory(&traj), &mut files)?;
    if cfg.simulate.csv {
        let mut csv = Vec::new();
        write_trajectory_csv(&traj, &mut csv)?;
        write_file(out, "trajectory.csv", &csv, &mut files)?;
    }
    let summary = TrajectorySummary {
        system: &traj.system,
        h,
        particles: traj.count,
        dim: traj.dim,
        steps: traj.steps,
        dt: traj.dt,
        seed: traj.seed,
        out_of_grid: traj.out_of_grid,
    };
    write_file(out, "trajectory.json", &json_bytes(&summary)?, &mut files)?;
    Ok(files)
}

#[derive(Serialize)]
struct PdeSummary {
    h: f64,
    dt: f64,
    steps: usize,
    frames: usize,
    grid: meanfield::fields::GridSpec,
    nu: f64,
    kernel: String,
    delta: Option<f64>,
    projected_mass: f64,
    mass_drift: f64,
    clipped_mass: f64,
    min_density: f64,
}

pub fn cmd_pde(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let h = cfg.pick_h("pde", cfg.pde.h)?;
    let exp = &cfg.experiment;
    let mut pc = Prepared::layout(exp, h)?.pde_config(exp);
    if let Some(dt) = cfg.pde.dt {
        let max = max_diffusion_dt(&pc.grid, pc.nu);
        if dt.is_nan() || dt <= 0.0 {
            bail!("invalid `pde.dt`: must be positive, got {dt}");
        }
        if dt > max {
            let suggested = exp.horizon / (exp.horizon / max).ceil();
            bail!(
                "invalid `pde.dt`: {dt:e} exceeds the stable diffusion step {max:e} on this grid; suggested dt = {suggested:e}"
            );
        }
        pc.dt = dt;
    }
    let steps = pc.steps();
    pc.record_every = cfg.pde.record_every.unwrap_or((steps / 64).max(1));
    if pc.record_every == 0 {
        bail!("invalid `pde.record_every`: must be at least 1");
    }
    let density = exp.initial_density()?;
    let sol = solve_pde(&density, &pc)?;
    let mut files = Vec::new();
    write_file(
        out,
        "density.bin",
        &encode_fields(&sol.density)?,
        &mut files,
    )?;
    write_file(
        out,
        "velocity.bin",
        &encode_fields(&sol.velocity)?,
        &mut files,
    )?;
    let mut ledger = String::from("time,mass,min_density\n");
    for ((f, m), lo) in sol.density.iter().zip(&sol.mass).zip(&sol.min_density) {
        let _ = writeln!(ledger, "{:.17e},{m:.17e},{lo:.17e}", f.time);
    }
    write_file(out, "mass.csv", ledger.as_bytes(), &mut files)?;
    if cfg.pde.csv {
        let mut csv = Vec::new();
        write_fields_csv(&sol.density, &mut csv)?;
        write_file(out, "density.csv", &csv, &mut files)?;
    }
    let summary = PdeSummary {
        h,
        dt: pc.dt,
        steps,
        frames: sol.density.len(),
        grid: pc.grid.clone(),
        nu: pc.nu,
        kernel: exp.kernel.clone(),
        delta: pc.delta,
        projected_mass: sol.projected_mass,
        mass_drift: sol.mass_drift(),
        clipped_mass: sol.clipped_mass,
        min_density: sol
            .min_density
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min),
    };
    write_file(out, "pde.json", &json_bytes(&summary)?, &mut files)?;
    Ok(files)
}

pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from(
        "h,particles,epsilon,dt,steps,median,q1,q3,median_self_consistent,probability,probability_ci_low,probability_ci_high,coupling_l1_max,coupling_check_violations,coupling_check_worst_ratio,initial_error,truncation_constant\n",
    );
    for r in &report.rows {
        let (p, lo, hi) = r
            .probability
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |p| {
                (p.probability, p.ci_low, p.ci_high)
            });
        let _ = writeln!(
            s,
            "{},{},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{:.17e},{},{:.17e},{:.17e},{:.17e}",
            r.h,
            r.particles,
            r.epsilon,
            r.dt,
            r.steps,
            r.headline.median,
            r.headline.q1,
            r.headline.q3,
            r.headline_self_consistent.median,
            p,
            lo,
            hi,
            r.coupling_l1.iter().copied().fold(0.0, f64::max),
            r.coupling_check.violations,
            r.coupling_check.worst_ratio,
            r.initial_error,
            r.truncation_constant
        );
    }
    s
}

pub fn separation_csv(report: &SeparationReport) -> String {
    let mut s = String::from("h,particles,epsilon,j,estimate,std_error,per_other_particle,epsilon_power,inverse_count_epsilon\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.h,
            r.particles,
            r.epsilon,
            r.j,
            r.estimate,
            r.std_error,
            r.per_other_particle,
            r.epsilon_power,
            r.inverse_count_epsilon
        );
    }
    s
}

pub fn cmd_converge(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let report = run_convergence_sweep(&cfg.experiment)?;
    let mut files = Vec::new();
    write_file(out, "converge.json", &json_bytes(&report)?, &mut files)?;
    write_file(
        out,
        "converge.csv",
        convergence_csv(&report).as_bytes(),
        &mut files,
    )?;
    Ok(files)
}

pub fn cmd_separation(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let report = estimate_separation(&cfg.experiment, None)?;
    let mut files = Vec::new();
    write_file(out, "separation.json", &json_bytes(&report)?, &mut files)?;
    write_file(
        out,
        "separation.csv",
        separation_csv(&report).as_bytes(),
        &mut files,
    )?;
    Ok(files)
}

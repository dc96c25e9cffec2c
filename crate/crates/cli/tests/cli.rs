use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meanfield_cli::{parse_config, RunManifest};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanfield"))
        .args(args)
        .env_remove("MEANFIELD_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BASE: &str = r#"
[experiment]
dim = 1
density = "bump"
support_lo = [-1.0]
support_hi = [1.0]
kernel = "tanh-gauss"
horizon = 0.1
dt = 0.025
h = [0.2]
realizations = 2
seed = 1

[experiment.grid]
dx = 0.02
"#;

#[test]
fn sample_writes_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", BASE);
    let out = tmp.path().join("out");
    let o = run(&["sample", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: RunManifest =
        serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, "complete");
    assert!(manifest.outputs.iter().any(|r| r.path == "sample.csv"));
    let csv = fs::read_to_string(out.join("sample.csv")).unwrap();
    // header plus the lattice points strictly inside (-1, 1) at spacing 0.2
    assert!(csv.lines().count() >= 10);
}

#[test]
fn h_outside_unit_interval_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        &BASE.replace("h = [0.2]", "h = [1.5]"),
    );
    let o = run(&[
        "sample",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("h"), "{}", stderr(&o));
}

#[test]
fn increasing_h_sequence_is_rejected() {
    let err = parse_config(&BASE.replace("h = [0.2]", "h = [0.1, 0.2]"), None).unwrap_err();
    assert!(format!("{err:#}").contains("h"), "{err:#}");
}

#[test]
fn unknown_keys_and_kernels_are_named() {
    let err = parse_config(&BASE.replace("seed = 1", "seed = 1\nsede = 2"), None).unwrap_err();
    assert!(format!("{err:#}").contains("sede"), "{err:#}");
    let err = parse_config(&BASE.replace("tanh-gauss", "gravity"), None).unwrap_err();
    let msg = format!("{err:#}");
    assert!(
        msg.contains("kernel") && msg.contains("tanh-gauss"),
        "{msg}"
    );
}

#[test]
fn unstable_pde_step_is_refused_with_a_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "pde.toml",
        &format!("{BASE}\n[pde]\ndt = 0.01\n"),
    );
    let o = run(&[
        "pde",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("suggested dt"), "{msg}");
}

#[test]
fn preset_flag_overrides_file_and_unknown_preset_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "p.toml", "");
    let o = run(&[
        "sample",
        "--config",
        &cfg,
        "--preset",
        "smoke",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "sample",
        "--config",
        &cfg,
        "--preset",
        "nope",
        "--out",
        tmp.path().join("p").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("smoke"), "{}", stderr(&o));
}

#[test]
fn converge_rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = write(tmp.path(), "smoke.toml", "preset = \"smoke\"\n");
    let o = run(&[
        "converge",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = a.join("manifest.json");
    let o = run(&[
        "converge",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["converge.json", "converge.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn fuzz_config_seeds_parse_and_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_parse");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap();
        let cfg = parse_config(&text, None).unwrap();
        let again = parse_config(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(
            cfg.experiment.content_hash(),
            again.experiment.content_hash()
        );
        n += 1;
    }
    assert!(n >= 3);
}

use std::path::Path;
use std::process::{Command, Output};

use wsl_cli::commands::{self, Options};
use wsl_cli::config::ExperimentConfig;
use wsl_cli::run::RunDir;
use wsl_core::downstream::reconstruct_and_score;
use wsl_core::zoo::{load_checkpoint, SplitTag, ZooGrid};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.dataset.n_train = 300;
    c.dataset.n_test = 120;
    c.zoo.grid = ZooGrid { learning_rates: vec![3e-3], seeds: vec![0, 1, 2, 3], ..ZooGrid::desk() };
    c.zoo.epochs = 2;
    c.zoo.checkpoint_epochs = vec![1, 2];
    c.ae.epochs = 2;
    c.ae.behavioral_warmup = 1;
    c.loss.n_queries = 16;
    c.grad_check.models = 1;
    c.grad_check.queries = 2;
    c.grad_check.directions = 4;
    c.downstream.anchor_percentile = 30.0;
    c.downstream.generation_count = 3;
    c
}

fn wsl(out: &Path, args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wsl"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn prepare(out: &Path, cfg: &ExperimentConfig) {
    let run = RunDir::open(out).unwrap();
    let opts = Options::default();
    commands::gen_data(&run, cfg).unwrap();
    commands::train_zoo(&run, cfg, &opts).unwrap();
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");
    for cmd in ["gen-data", "train-zoo", "train-ae", "eval", "generate", "grad-check"] {
        let o = wsl(&out, &[cmd], Some(&cfg));
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "config.json",
        "eval/metrics.json",
        "eval/pairwise.csv",
        "eval/accuracy_hist.svg",
        "eval/agreement_hist.svg",
        "generate/metrics.json",
        "generate/accuracy_hist.svg",
        "grad_check/report.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("eval/pairwise.csv")).unwrap();
    assert!(csv.starts_with("model_id,epoch,l2,agreement,"));
    let (ckpt, _) = load_checkpoint(&out.join("generate/models/generated_0000.wzoo")).unwrap();
    assert_eq!(ckpt.theta.len(), ckpt.arch.param_count());
    assert!(!out.join(".wsl.lock").exists());

    // Later commands find the stored config on their own.
    let o = wsl(&out, &["eval"], None);
    assert!(o.status.success());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");

    let o = wsl(&out, &["train-zoo"], Some(&cfg));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, tiny().to_json().replace("\"gamma\"", "\"gama\"")).unwrap();
    let o = wsl(&out, &["gen-data"], Some(&bad));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gama") && err.contains("line"), "{err}");

    let o = wsl(&tmp.path().join("empty"), &["eval"], None);
    assert_eq!(o.status.code(), Some(2));

    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".wsl.lock"), "1").unwrap();
    let o = wsl(&out, &["gen-data"], Some(&cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn identity_autoencoder_agrees_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    prepare(tmp.path(), &cfg);
    let run = RunDir::open(tmp.path()).unwrap();
    let zoo = commands::load_run_zoo(&run).unwrap();
    let (ds, _) = commands::load_data(&run).unwrap();
    let rep = reconstruct_and_score(&zoo, SplitTag::Test, |t| Ok(t.to_vec()), &ds.test).unwrap();
    assert!(!rep.models.is_empty());
    for m in &rep.models {
        assert_eq!((m.agreement, m.l2), (1.0, 0.0));
        assert_eq!(m.accuracy_original, m.accuracy_reconstructed);
    }
    assert_eq!(rep.max_accuracy_delta, 0.0);
}

#[test]
fn sweep_and_ablation_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.ae.epochs = 1;
    cfg.zoo.split_fractions = [0.5, 0.25, 0.25];
    prepare(tmp.path(), &cfg);
    let run = RunDir::open(tmp.path()).unwrap();
    let opts = Options::default();
    commands::train_ae(&run, &cfg, &opts).unwrap();
    let rows = commands::sweep_beta(&run, &cfg, &opts).unwrap();
    assert_eq!(rows.iter().map(|r| r.beta).collect::<Vec<_>>(), vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
    let table = std::fs::read_to_string(tmp.path().join("sweep_beta/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    // β = 0.1 matches the main autoencoder, which is reused instead of retrained.
    assert!(!tmp.path().join("sweep_beta/beta_0.10/model.hae").exists());

    let rows = commands::ablate_queries(&run, &cfg, &opts).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(!tmp.path().join("ablate_queries/zoo-trainset/model.hae").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        prepare(&out, &cfg);
        let run = RunDir::open(&out).unwrap();
        let opts = Options::default();
        commands::train_ae(&run, &cfg, &opts).unwrap();
        commands::eval(&run, &cfg, &opts).unwrap();
        commands::generate(&run, &cfg, &opts).unwrap();
        outputs.push([
            std::fs::read(out.join("eval/metrics.json")).unwrap(),
            std::fs::read(out.join("generate/metrics.json")).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn retraining_is_skipped_for_unchanged_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    prepare(tmp.path(), &cfg);
    let zoo_json = tmp.path().join("zoo/zoo.json");
    let before = std::fs::metadata(&zoo_json).unwrap().modified().unwrap();
    let run = RunDir::open(tmp.path()).unwrap();
    commands::train_zoo(&run, &cfg, &Options::default()).unwrap();
    assert_eq!(std::fs::metadata(&zoo_json).unwrap().modified().unwrap(), before);
}

//! The experiment commands. Each reads its inputs from the run directory,
//! writes its outputs atomically, and skips work whose inputs are unchanged.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wsl_core::ae::{load_ae, save_ae, AEConfig, HyperAe};
use wsl_core::arch::ArchitectureSpec;
use wsl_core::classifier::{accuracy, build_model, InitScheme};
use wsl_core::data::{load_dataset, save_dataset, Dataset};
use wsl_core::downstream::{
    diversity, fit_generator, generate_models, percentile, probe, reconstruct_and_score, reconstruct_with, Diversity,
    ProbeResult, ReconstructionReport, Summary,
};
use wsl_core::grad_analysis::{analyze_model, behavioral_grad_check, ModelAnalysis};
use wsl_core::losses::{sample_queries, LossConfig, QueryRegistry, QuerySource};
use wsl_core::tokenizer::TokenLayout;
use wsl_core::training::{train_ae as fit_ae, EpochLog, TrainingLog};
use wsl_core::zoo::{load_zoo, save_checkpoint, save_zoo, train_zoo as fit_zoo, ModelCheckpoint, SplitTag, Zoo};
use wsl_tensor::Scalar;

use crate::config::ExperimentConfig;
use crate::run::{is_fresh, require, seal, stage_key, write_csv, write_json, write_text, RunDir};
use crate::svg::{histogram, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub threads: usize,
    pub precision: Precision,
}

impl Default for Options {
    fn default() -> Self {
        Self { threads: 1, precision: Precision::F32 }
    }
}

// ---------------------------------------------------------------- artifacts

pub fn load_data(run: &RunDir) -> Result<(Dataset, Dataset)> {
    for dir in [run.data_dir(), run.shifted_dir()] {
        require(&dir.join("dataset.json"), "dataset", "gen-data")?;
    }
    Ok((load_dataset(&run.data_dir())?, load_dataset(&run.shifted_dir())?))
}

pub fn load_run_zoo(run: &RunDir) -> Result<Zoo> {
    require(&run.zoo_dir().join("zoo.json"), "model zoo", "train-zoo")?;
    Ok(load_zoo(&run.zoo_dir())?)
}

fn registry<'a>(arch: &ArchitectureSpec, ds: &'a Dataset, shifted: &'a Dataset) -> QueryRegistry<'a> {
    QueryRegistry { input: arch.input, trainset: Some(&ds.train), shifted: Some(&shifted.train) }
}

fn labels(ds: &Dataset) -> Result<&[u8]> {
    ds.test.labels.as_deref().context("evaluation split has no labels")
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let shifted = cfg.shifted();
    let key = json!({ "dataset": cfg.dataset, "shifted": shifted });
    if is_fresh(&run.data_dir(), &key) && run.shifted_dir().join("dataset.json").exists() {
        log::info!("dataset is up to date");
        return Ok(());
    }
    save_dataset(&cfg.dataset.generate()?, &run.data_dir())?;
    save_dataset(&shifted.generate()?, &run.shifted_dir())?;
    seal(&run.data_dir(), &key)
}

// ---------------------------------------------------------------- train-zoo

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooSummary {
    pub models: usize,
    pub checkpoints: usize,
    pub parameters: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub test_accuracy: Summary,
    pub final_test_accuracy: Summary,
}

pub fn train_zoo(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<ZooSummary> {
    let (ds, _) = load_data(run)?;
    let key = json!({ "zoo": cfg.zoo, "data": stage_key(&run.data_dir())? });
    let zoo = if is_fresh(&run.zoo_dir(), &key) && run.zoo_dir().join("zoo.json").exists() {
        log::info!("model zoo is up to date");
        load_zoo(&run.zoo_dir())?
    } else {
        let zoo = fit_zoo(&cfg.zoo, &ds, opts.threads)?;
        save_zoo(&zoo, &run.zoo_dir())?;
        seal(&run.zoo_dir(), &key)?;
        zoo
    };
    let accs: Vec<f64> = zoo.checkpoints.iter().map(|c| c.test_accuracy).collect();
    let fin: Vec<f64> = zoo.final_checkpoints().iter().map(|c| c.test_accuracy).collect();
    let summary = ZooSummary {
        models: zoo.model_ids().len(),
        checkpoints: zoo.checkpoints.len(),
        parameters: zoo.arch.param_count(),
        train: zoo.ids_in(SplitTag::Train).len(),
        val: zoo.ids_in(SplitTag::Val).len(),
        test: zoo.ids_in(SplitTag::Test).len(),
        test_accuracy: Summary::of(&accs),
        final_test_accuracy: Summary::of(&fin),
    };
    write_json(&run.zoo_dir().join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- train-ae

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeSummary {
    pub compression_ratio: f64,
    pub num_tokens: usize,
    pub parameters: usize,
    pub train_samples: usize,
    pub final_epoch: Option<EpochLog>,
}

fn ae_key(run: &RunDir, ae: &AEConfig, loss: &LossConfig, precision: Precision) -> Result<Value> {
    Ok(json!({ "ae": ae, "loss": loss, "precision": precision, "zoo": stage_key(&run.zoo_dir())? }))
}

fn train_into<T: Scalar>(dir: &Path, zoo: &Zoo, reg: &QueryRegistry, loss: &LossConfig, ae: &AEConfig) -> Result<AeSummary> {
    let (model, log) = fit_ae::<T>(zoo, reg, loss, ae)?;
    save_ae(&dir.join("model.hae"), &model)?;
    write_json(&dir.join("training_log.json"), &log)?;
    Ok(summarize(&log, model.num_parameters()))
}

fn summarize(log: &TrainingLog, parameters: usize) -> AeSummary {
    AeSummary {
        compression_ratio: log.compression_ratio,
        num_tokens: log.num_tokens,
        parameters,
        train_samples: log.train_samples,
        final_epoch: log.epochs.last().filter(|e| e.epoch > 0).cloned(),
    }
}

/// Trains an autoencoder into `dir` unless `dir`, or any of `reuse`, already
/// holds one built from the same inputs. Returns the directory holding it.
fn obtain_ae(
    run: &RunDir,
    dir: &Path,
    reuse: &[PathBuf],
    ae: &AEConfig,
    loss: &LossConfig,
    opts: &Options,
) -> Result<PathBuf> {
    let key = ae_key(run, ae, loss, opts.precision)?;
    for d in std::iter::once(dir).chain(reuse.iter().map(PathBuf::as_path)) {
        if is_fresh(d, &key) && d.join("model.hae").exists() {
            log::info!("reusing autoencoder in {}", d.display());
            return Ok(d.to_path_buf());
        }
    }
    let zoo = load_run_zoo(run)?;
    let (ds, sh) = load_data(run)?;
    let reg = registry(&zoo.arch, &ds, &sh);
    let summary = match opts.precision {
        Precision::F32 => train_into::<f32>(dir, &zoo, &reg, loss, ae)?,
        Precision::F64 => train_into::<f64>(dir, &zoo, &reg, loss, ae)?,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    seal(dir, &key)?;
    Ok(dir.to_path_buf())
}

pub fn train_ae(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<AeSummary> {
    let dir = obtain_ae(run, &run.ae_dir(), &[], &cfg.ae_config(), &cfg.loss, opts)?;
    read_json(&dir.join("summary.json"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn require_ae(dir: &Path) -> Result<()> {
    require(&dir.join("model.hae"), "trained autoencoder", "train-ae")
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: LossConfig,
    pub autoencoder: AeSummary,
    pub reconstruction: ReconstructionReport,
    pub probes: Vec<ProbeResult>,
}

#[derive(Debug, Serialize)]
struct PairRow {
    model_id: usize,
    epoch: usize,
    l2: f64,
    agreement: f64,
    noise_agreement: f64,
    accuracy_original: f64,
    accuracy_reconstructed: f64,
}

fn eval_with<T: Scalar>(ae: &HyperAe<T>, zoo: &Zoo, ds: &Dataset, cfg: &ExperimentConfig) -> Result<(ReconstructionReport, Vec<ProbeResult>)> {
    let rec = reconstruct_and_score(zoo, SplitTag::Test, reconstruct_with(ae), &ds.test)?;
    let probes = cfg.downstream.probe_targets.iter().map(|&t| probe(zoo, ae, t)).collect::<wsl_core::Result<Vec<_>>>()?;
    Ok((rec, probes))
}

pub fn eval(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<EvalMetrics> {
    require_ae(&run.ae_dir())?;
    let zoo = load_run_zoo(run)?;
    let (ds, _) = load_data(run)?;
    let path = run.ae_dir().join("model.hae");
    let (reconstruction, probes) = match opts.precision {
        Precision::F32 => eval_with(&load_ae::<f32>(&path)?, &zoo, &ds, cfg)?,
        Precision::F64 => eval_with(&load_ae::<f64>(&path)?, &zoo, &ds, cfg)?,
    };
    let metrics = EvalMetrics {
        loss: cfg.loss.clone(),
        autoencoder: read_json(&run.ae_dir().join("summary.json"))?,
        reconstruction,
        probes,
    };
    write_eval(&run.path("eval"), &metrics, cfg.downstream.histogram_bins)?;
    Ok(metrics)
}

fn write_eval(dir: &Path, m: &EvalMetrics, bins: usize) -> Result<()> {
    write_json(&dir.join("metrics.json"), m)?;
    let rows: Vec<PairRow> = m
        .reconstruction
        .models
        .iter()
        .map(|s| PairRow {
            model_id: s.model_id,
            epoch: s.epoch,
            l2: s.l2,
            agreement: s.agreement,
            noise_agreement: s.noise_agreement,
            accuracy_original: s.accuracy_original,
            accuracy_reconstructed: s.accuracy_reconstructed,
        })
        .collect();
    write_csv(&dir.join("pairwise.csv"), &rows)?;
    let col = |f: fn(&PairRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (orig, rec, agr, l2) = (col(|r| r.accuracy_original), col(|r| r.accuracy_reconstructed), col(|r| r.agreement), col(|r| r.l2));
    let acc_svg = histogram(
        "Test accuracy of original and reconstructed models",
        "accuracy",
        &[Series { label: "original", values: &orig }, Series { label: "reconstructed", values: &rec }],
        0.0,
        1.0,
        bins,
    );
    write_text(&dir.join("accuracy_hist.svg"), &acc_svg)?;
    let agr_svg = histogram("Agreement with the original model", "agreement", &[Series { label: "reconstruction", values: &agr }], 0.0, 1.0, bins);
    write_text(&dir.join("agreement_hist.svg"), &agr_svg)?;
    let top = l2.iter().copied().fold(0.0, f64::max).max(1e-12);
    let l2_svg = histogram("Parameter distance to the original model", "L2 distance", &[Series { label: "reconstruction", values: &l2 }], 0.0, top, bins);
    write_text(&dir.join("l2_hist.svg"), &l2_svg)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateMetrics {
    pub anchors: usize,
    pub accuracy_threshold: f64,
    pub pca_dim: usize,
    pub explained_variance: Vec<f64>,
    pub count: usize,
    pub anchor_accuracy: Summary,
    pub accuracy: Summary,
    pub accuracies: Vec<f64>,
    pub anchor_diversity: Diversity,
    pub diversity: Option<Diversity>,
}

fn generate_with<T: Scalar>(run: &RunDir, ae: &HyperAe<T>, zoo: &Zoo, ds: &Dataset, cfg: &ExperimentConfig) -> Result<GenerateMetrics> {
    let dc = &cfg.downstream;
    let all: Vec<f64> = zoo.checkpoints.iter().map(|c| c.test_accuracy).collect();
    let threshold = dc.anchor_threshold.unwrap_or_else(|| percentile(&all, dc.anchor_percentile));
    let gen = fit_generator(zoo, ae, Some(threshold), dc.pca_dim)?;
    let models = generate_models(&gen, ae, dc.generation_count, cfg.seed)?;
    let y = labels(ds)?;
    let accuracies = models.iter().map(|m| accuracy(m, &zoo.arch, &ds.test.images, y)).collect::<wsl_core::Result<Vec<_>>>()?;
    let anchors: Vec<&ModelCheckpoint> =
        gen.anchors.iter().filter_map(|&(id, ep)| zoo.checkpoints.iter().find(|c| c.model_id == id && c.epoch == ep)).collect();
    let anchor_thetas: Vec<Vec<f32>> = anchors.iter().map(|c| c.theta.clone()).collect();
    let anchor_acc: Vec<f64> = anchors.iter().map(|c| c.test_accuracy).collect();

    let dir = run.path("generate");
    let mdir = dir.join("models");
    if mdir.exists() {
        std::fs::remove_dir_all(&mdir)?;
    }
    std::fs::create_dir_all(&mdir)?;
    let train_y = ds.train.labels.as_deref().context("training split has no labels")?;
    for (i, (theta, &acc)) in models.iter().zip(&accuracies).enumerate() {
        let ckpt = ModelCheckpoint {
            model_id: i,
            theta: theta.clone(),
            arch: zoo.arch.clone(),
            hyper: anchors[0].hyper,
            epoch: 0,
            train_accuracy: accuracy(theta, &zoo.arch, &ds.train.images, train_y)?,
            test_accuracy: acc,
        };
        save_checkpoint(&mdir.join(format!("generated_{i:04}.wzoo")), &ckpt, &zoo.dataset_fingerprint)?;
    }
    let metrics = GenerateMetrics {
        anchors: gen.anchors.len(),
        accuracy_threshold: gen.accuracy_threshold,
        pca_dim: gen.q(),
        explained_variance: gen.pca.explained_variance.clone(),
        count: models.len(),
        anchor_accuracy: Summary::of(&anchor_acc),
        accuracy: Summary::of(&accuracies),
        accuracies: accuracies.clone(),
        anchor_diversity: diversity(&anchor_thetas, &zoo.arch, &ds.test.images)?,
        diversity: if models.len() >= 2 { Some(diversity(&models, &zoo.arch, &ds.test.images)?) } else { None },
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    let svg = histogram(
        "Test accuracy of zoo, anchor and generated models",
        "accuracy",
        &[
            Series { label: "zoo", values: &all },
            Series { label: "anchors", values: &anchor_acc },
            Series { label: "generated", values: &accuracies },
        ],
        0.0,
        1.0,
        cfg.downstream.histogram_bins,
    );
    write_text(&dir.join("accuracy_hist.svg"), &svg)?;
    Ok(metrics)
}

pub fn generate(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<GenerateMetrics> {
    require_ae(&run.ae_dir())?;
    let zoo = load_run_zoo(run)?;
    let (ds, _) = load_data(run)?;
    let path = run.ae_dir().join("model.hae");
    match opts.precision {
        Precision::F32 => generate_with(run, &load_ae::<f32>(&path)?, &zoo, &ds, cfg),
        Precision::F64 => generate_with(run, &load_ae::<f64>(&path)?, &zoo, &ds, cfg),
    }
}

// ---------------------------------------------------------------- grad-check

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearControl {
    pub eps: f64,
    pub cosine: f64,
    pub rel_err: f64,
    pub double_sum_max_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckMetrics {
    pub models: Vec<ModelAnalysis>,
    /// The same check on a single linear layer, where the approximation is exact.
    pub linear_control: LinearControl,
}

pub fn grad_check(run: &RunDir, cfg: &ExperimentConfig) -> Result<GradCheckMetrics> {
    let zoo = load_run_zoo(run)?;
    let (ds, sh) = load_data(run)?;
    let g = &cfg.grad_check;
    let reg = registry(&zoo.arch, &ds, &sh);
    let q = sample_queries(QuerySource::ZooTrainset, g.queries, cfg.seed, &reg)?;
    let queries: Vec<f64> = q.inputs.iter().map(|&v| v as f64).collect();
    let mut test = zoo.final_checkpoints();
    test.retain(|c| zoo.splits.get(&c.model_id) == Some(&SplitTag::Test));
    let mut models = Vec::new();
    for c in test.iter().take(g.models) {
        log::info!("analyzing model {} at epoch {}", c.model_id, c.epoch);
        let theta: Vec<f64> = c.theta.iter().map(|&v| v as f64).collect();
        models.push(analyze_model(c.model_id, c.epoch, &theta, &zoo.arch, &queries, cfg.seed)?);
    }

    let lin = ArchitectureSpec::mlp(zoo.arch.input, &[], zoo.arch.num_classes());
    let theta: Vec<f64> = build_model(&lin, InitScheme::KaimingNormal, cfg.seed)?.iter().map(|&v| v as f64).collect();
    let dir: Vec<f64> = build_model(&lin, InitScheme::Normal, cfg.seed + 1)?.iter().map(|&v| v as f64).collect();
    let eps = 1e-3;
    let tn = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let hat: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + eps * tn * d / dn).collect();
    let r = behavioral_grad_check(&theta, &hat, &lin, &queries)?;
    let metrics = GradCheckMetrics {
        models,
        linear_control: LinearControl { eps, cosine: r.cosine, rel_err: r.rel_err, double_sum_max_err: r.double_sum_max_err },
    };
    write_json(&run.path("grad_check").join("report.json"), &metrics)?;
    Ok(metrics)
}

// ---------------------------------------------------------------- ablations

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_source: QuerySource,
    pub agreement_mean: f64,
    pub agreement_std: f64,
    pub l2_mean: f64,
    pub accuracy_reconstructed_mean: f64,
    pub accuracy_reconstructed_std: f64,
    pub max_accuracy_delta: f64,
}

fn score_dir(dir: &Path, zoo: &Zoo, ds: &Dataset, tag: SplitTag, precision: Precision) -> Result<(ReconstructionReport, Vec<ProbeResult>)> {
    use wsl_core::downstream::ProbeTarget;
    let path = dir.join("model.hae");
    fn go<T: Scalar>(ae: &HyperAe<T>, zoo: &Zoo, ds: &Dataset, tag: SplitTag) -> Result<(ReconstructionReport, Vec<ProbeResult>)> {
        let rec = reconstruct_and_score(zoo, tag, reconstruct_with(ae), &ds.test)?;
        let probes = [ProbeTarget::TestAccuracy, ProbeTarget::GeneralizationGap].into_iter().map(|t| probe(zoo, ae, t)).collect::<wsl_core::Result<_>>()?;
        Ok((rec, probes))
    }
    match precision {
        Precision::F32 => go(&load_ae::<f32>(&path)?, zoo, ds, tag),
        Precision::F64 => go(&load_ae::<f64>(&path)?, zoo, ds, tag),
    }
}

pub fn ablate_queries(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<Vec<QueryRow>> {
    let zoo = load_run_zoo(run)?;
    let (ds, _) = load_data(run)?;
    let root = run.path("ablate_queries");
    let mut rows = Vec::new();
    for &src in &cfg.sweep.query_sources {
        let loss = LossConfig { query_source: src, ..cfg.loss.clone() };
        let dir = obtain_ae(run, &root.join(src.name()), &[run.ae_dir()], &cfg.ae_config(), &loss, opts)?;
        let (rec, _) = score_dir(&dir, &zoo, &ds, SplitTag::Test, opts.precision)?;
        rows.push(QueryRow {
            query_source: src,
            agreement_mean: rec.agreement.mean,
            agreement_std: rec.agreement.std,
            l2_mean: rec.l2.mean,
            accuracy_reconstructed_mean: rec.accuracy_reconstructed.mean,
            accuracy_reconstructed_std: rec.accuracy_reconstructed.std,
            max_accuracy_delta: rec.max_accuracy_delta,
        });
    }
    write_json(&root.join("metrics.json"), &rows)?;
    write_csv(&root.join("table.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub r2_test_accuracy: f64,
    pub r2_generalization_gap: f64,
    pub l2_mean: f64,
    pub l2_std: f64,
    pub agreement_mean: f64,
    pub agreement_std: f64,
}

/// Trains one autoencoder per β and scores it on the zoo's validation split.
pub fn sweep_beta(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<Vec<BetaRow>> {
    let zoo = load_run_zoo(run)?;
    let (ds, _) = load_data(run)?;
    let root = run.path("sweep_beta");
    let mut rows = Vec::new();
    for &beta in &cfg.sweep.betas {
        let loss = LossConfig { beta, ..cfg.loss.clone() };
        let dir = obtain_ae(run, &root.join(format!("beta_{beta:.2}")), &[run.ae_dir()], &cfg.ae_config(), &loss, opts)?;
        let (rec, probes) = score_dir(&dir, &zoo, &ds, SplitTag::Val, opts.precision)?;
        rows.push(BetaRow {
            beta,
            r2_test_accuracy: probes[0].r2_test,
            r2_generalization_gap: probes[1].r2_test,
            l2_mean: rec.l2.mean,
            l2_std: rec.l2.std,
            agreement_mean: rec.agreement.mean,
            agreement_std: rec.agreement.std,
        });
    }
    write_json(&root.join("metrics.json"), &rows)?;
    write_csv(&root.join("table.csv"), &rows)?;
    Ok(rows)
}

/// Token count and compression ratio of the configured autoencoder.
pub fn layout_summary(cfg: &ExperimentConfig) -> Result<Value> {
    let layout = TokenLayout::new(&cfg.zoo.arch, cfg.ae.token_len)?;
    Ok(json!({
        "parameters": cfg.zoo.arch.param_count(),
        "tokens": layout.num_tokens(),
        "compression_ratio": cfg.ae.compression_ratio(),
    }))
}

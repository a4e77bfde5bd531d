//! Model zoos: grid training, checkpoints and train/val/test splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsl_tensor::{Adam, Tape, Tensor};

use crate::arch::ArchitectureSpec;
use crate::classifier::{accuracy, build_model, forward_classifier, InitScheme};
use crate::container;
use crate::data::{fingerprint, Dataset};
use crate::error::{config, Result, WslError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooHyperparams {
    pub init_scheme: InitScheme,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooGrid {
    pub init_schemes: Vec<InitScheme>,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl ZooGrid {
    /// 2 inits × 3 learning rates × 4 seeds.
    pub fn desk() -> Self {
        Self {
            init_schemes: vec![InitScheme::Uniform, InitScheme::KaimingNormal],
            learning_rates: vec![3e-4, 1e-3, 3e-3],
            weight_decays: vec![1e-4],
            seeds: vec![0, 1, 2, 3],
        }
    }

    /// The full grid with five distinct learning rates (the published table
    /// repeats `1e-4`).
    pub fn paper() -> Self {
        Self {
            init_schemes: InitScheme::ALL.to_vec(),
            learning_rates: vec![1e-4, 2.5e-4, 5e-4, 7.5e-4, 1e-3],
            weight_decays: vec![1e-4, 5e-4, 1e-3],
            seeds: (0..20).collect(),
        }
    }

    /// Cartesian product in (init, lr, wd, seed) order.
    pub fn cells(&self) -> Vec<ZooHyperparams> {
        let mut out = Vec::new();
        for &init_scheme in &self.init_schemes {
            for &learning_rate in &self.learning_rates {
                for &weight_decay in &self.weight_decays {
                    for &seed in &self.seeds {
                        out.push(ZooHyperparams { init_scheme, learning_rate, weight_decay, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model_id: usize,
    #[serde(skip)]
    pub theta: Vec<f32>,
    pub arch: ArchitectureSpec,
    pub hyper: ZooHyperparams,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl ModelCheckpoint {
    pub fn generalization_gap(&self) -> f64 {
        self.train_accuracy - self.test_accuracy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zoo {
    pub arch: ArchitectureSpec,
    /// Sorted by (model id, epoch).
    pub checkpoints: Vec<ModelCheckpoint>,
    pub splits: BTreeMap<usize, SplitTag>,
    pub dataset_fingerprint: String,
}

impl Zoo {
    pub fn model_ids(&self) -> Vec<usize> {
        self.splits.keys().copied().collect()
    }

    pub fn ids_in(&self, tag: SplitTag) -> Vec<usize> {
        self.splits.iter().filter(|(_, t)| **t == tag).map(|(id, _)| *id).collect()
    }

    pub fn checkpoints_in(&self, tag: SplitTag) -> Vec<&ModelCheckpoint> {
        self.checkpoints.iter().filter(|c| self.splits.get(&c.model_id) == Some(&tag)).collect()
    }

    pub fn final_checkpoints(&self) -> Vec<&ModelCheckpoint> {
        let mut last: BTreeMap<usize, &ModelCheckpoint> = BTreeMap::new();
        for c in &self.checkpoints {
            let e = last.entry(c.model_id).or_insert(c);
            if c.epoch > e.epoch {
                *e = c;
            }
        }
        last.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooTrainConfig {
    pub arch: ArchitectureSpec,
    pub grid: ZooGrid,
    pub epochs: usize,
    /// Empty means the last four evenly spaced epochs.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Train, validation and test fractions.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

fn default_batch() -> usize {
    32
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.05, 0.15]
}

impl ZooTrainConfig {
    pub fn desk() -> Self {
        Self {
            arch: ArchitectureSpec::desk_default(),
            grid: ZooGrid::desk(),
            epochs: 8,
            checkpoint_epochs: vec![2, 4, 6, 8],
            batch_size: 32,
            split_fractions: default_fractions(),
            split_seed: 0,
        }
    }

    pub fn resolved_checkpoint_epochs(&self) -> Vec<usize> {
        if !self.checkpoint_epochs.is_empty() {
            return self.checkpoint_epochs.clone();
        }
        default_checkpoint_epochs(self.epochs)
    }
}

/// Last four evenly spaced epochs ending at `epochs`, e.g. 50 → {20, 30, 40, 50}.
pub fn default_checkpoint_epochs(epochs: usize) -> Vec<usize> {
    let step = (epochs / 5).max(1);
    let mut out: Vec<usize> = (0..4).rev().filter_map(|i| epochs.checked_sub(i * step)).filter(|&e| e >= 1).collect();
    out.dedup();
    out
}

/// Seeded split assignment: test and validation counts are rounded, train takes the rest.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<SplitTag>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return config(format!("split fractions {fractions:?} must be nonnegative and sum to 1"));
    }
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_test.min(n));
    let n_test = n_test.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut tags = vec![SplitTag::Train; n];
    for (rank, &id) in order.iter().enumerate() {
        if rank < n_test {
            tags[id] = SplitTag::Test;
        } else if rank < n_test + n_val {
            tags[id] = SplitTag::Val;
        }
    }
    Ok(tags)
}

/// Trains one grid cell and returns its checkpoints.
pub fn train_model(
    model_id: usize,
    hyper: ZooHyperparams,
    cfg: &ZooTrainConfig,
    data: &Dataset,
) -> Result<Vec<ModelCheckpoint>> {
    let arch = &cfg.arch;
    let labels = data.train.labels.as_ref().ok_or_else(|| WslError::Config("zoo training data is unlabeled".into()))?;
    let test_labels = data.test.labels.as_ref().ok_or_else(|| WslError::Config("zoo test data is unlabeled".into()))?;
    let save_at = cfg.resolved_checkpoint_epochs();
    let mut theta = Tensor::from_vec(build_model(arch, hyper.init_scheme, hyper.seed)?).with_grad();
    let mut opt = Adam::new(hyper.learning_rate, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xDA7A_0BDE);
    let n = data.train.len();
    let [c, h, w] = arch.input;
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for epoch in 1..=cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let th = tape.leaf(&theta);
            let x = tape.constant(Tensor::new(&[batch.len(), c, h, w], data.train.gather(batch))?);
            let logits = forward_classifier(&mut tape, th, arch, x)?;
            let k = tape.shape(logits)[1];
            let logp = tape.log_softmax(logits)?;
            let picks: Vec<usize> = batch.iter().enumerate().map(|(r, &i)| r * k + labels[i] as usize).collect();
            let picked = tape.gather(logp, &picks)?;
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            if !tape.value(loss)[0].is_finite() {
                return Err(WslError::Numerical(format!("model {model_id} diverged at epoch {epoch}")));
            }
            tape.backward(loss)?;
            theta.zero_grad();
            tape.accumulate_into(th, &mut theta)?;
            opt.step(std::slice::from_mut(&mut theta))?;
        }
        if save_at.contains(&epoch) {
            let train_accuracy = accuracy(theta.data(), arch, &data.train.images, labels)?;
            let test_accuracy = accuracy(theta.data(), arch, &data.test.images, test_labels)?;
            out.push(ModelCheckpoint {
                model_id,
                theta: theta.data().to_vec(),
                arch: arch.clone(),
                hyper,
                epoch,
                train_accuracy,
                test_accuracy,
            });
        }
    }
    Ok(out)
}

/// Trains every grid cell. Cells are split across `threads` workers, each
/// owning its own tapes and RNG streams; results are assembled in cell order.
pub fn train_zoo(cfg: &ZooTrainConfig, data: &Dataset, threads: usize) -> Result<Zoo> {
    cfg.arch.validate()?;
    let cells = cfg.grid.cells();
    if cells.is_empty() {
        return config("zoo grid is empty");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return config("epochs and batch_size must be positive");
    }
    if data.train.shape != cfg.arch.input {
        return config(format!(
            "dataset images {:?} do not match architecture input {:?}",
            data.train.shape, cfg.arch.input
        ));
    }
    if cfg.arch.num_classes() != data.classes {
        return config(format!(
            "architecture emits {} classes but the dataset has {}",
            cfg.arch.num_classes(),
            data.classes
        ));
    }
    let save_at = cfg.resolved_checkpoint_epochs();
    if let Some(bad) = save_at.iter().find(|&&e| e == 0 || e > cfg.epochs) {
        return config(format!("checkpoint epoch {bad} outside 1..={}", cfg.epochs));
    }
    let threads = threads.max(1).min(cells.len());
    let mut results: Vec<Option<Result<Vec<ModelCheckpoint>>>> = (0..cells.len()).map(|_| None).collect();
    if threads == 1 {
        for (id, cell) in cells.iter().enumerate() {
            log::info!("training zoo model {id} ({} / lr {})", cell.init_scheme, cell.learning_rate);
            results[id] = Some(train_model(id, *cell, cfg, data));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let cells = &cells;
                    s.spawn(move || {
                        (t..cells.len())
                            .step_by(threads)
                            .map(|id| (id, train_model(id, cells[id], cfg, data)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (id, r) in h.join().expect("zoo worker panicked") {
                    results[id] = Some(r);
                }
            }
        });
    }
    let mut checkpoints = Vec::new();
    for r in results {
        checkpoints.extend(r.expect("every cell trained")?);
    }
    let tags = assign_splits(cells.len(), cfg.split_fractions, cfg.split_seed)?;
    Ok(Zoo {
        arch: cfg.arch.clone(),
        checkpoints,
        splits: tags.into_iter().enumerate().collect(),
        dataset_fingerprint: fingerprint(data),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    #[serde(flatten)]
    checkpoint: ModelCheckpoint,
    dataset_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ZooIndex {
    arch: ArchitectureSpec,
    dataset_fingerprint: String,
    splits: BTreeMap<usize, SplitTag>,
    files: Vec<String>,
}

pub fn checkpoint_file_name(model_id: usize, epoch: usize) -> String {
    format!("model_{model_id:04}_epoch_{epoch:03}.wzoo")
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint, fingerprint: &str) -> Result<()> {
    let meta = CheckpointMeta { kind: "ZOO".into(), checkpoint: ckpt.clone(), dataset_fingerprint: fingerprint.into() };
    container::write(path, &meta, &ckpt.theta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelCheckpoint, String)> {
    let (meta, theta): (CheckpointMeta, Vec<f32>) = container::read(path)?;
    let mut ckpt = meta.checkpoint;
    if theta.len() != ckpt.arch.param_count() {
        return Err(WslError::Format(format!(
            "{}: payload has {} parameters, architecture needs {}",
            path.display(),
            theta.len(),
            ckpt.arch.param_count()
        )));
    }
    ckpt.theta = theta;
    Ok((ckpt, meta.dataset_fingerprint))
}

pub fn save_zoo(zoo: &Zoo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for c in &zoo.checkpoints {
        let name = checkpoint_file_name(c.model_id, c.epoch);
        save_checkpoint(&dir.join(&name), c, &zoo.dataset_fingerprint)?;
        files.push(name);
    }
    let index = ZooIndex {
        arch: zoo.arch.clone(),
        dataset_fingerprint: zoo.dataset_fingerprint.clone(),
        splits: zoo.splits.clone(),
        files,
    };
    crate::io::write_atomic(&dir.join("zoo.json"), serde_json::to_string_pretty(&index)?.as_bytes())
}

pub fn load_zoo(dir: &Path) -> Result<Zoo> {
    let index: ZooIndex = serde_json::from_slice(&fs::read(dir.join("zoo.json"))?)?;
    let mut checkpoints = Vec::with_capacity(index.files.len());
    for f in &index.files {
        let (c, fp) = load_checkpoint(&dir.join(f))?;
        if fp != index.dataset_fingerprint || c.arch != index.arch {
            return Err(WslError::Format(format!("{f} does not belong to this zoo")));
        }
        checkpoints.push(c);
    }
    Ok(Zoo { arch: index.arch, checkpoints, splits: index.splits, dataset_fingerprint: index.dataset_fingerprint })
}

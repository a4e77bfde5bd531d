//! Training objectives: structural MSE, behavioral query losses, NTXent and
//! their weighted composite, plus the query sampler.

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsl_tensor::{Scalar, Tape, Tensor, Var};

use crate::arch::ArchitectureSpec;
use crate::classifier::{forward_classifier, logits};
use crate::data::Split;
use crate::error::{config, contract, Result, WslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehavioralVariant {
    MseLogits,
    CrossEntropy,
    Distillation,
}

impl BehavioralVariant {
    pub const ALL: [BehavioralVariant; 3] = [Self::MseLogits, Self::CrossEntropy, Self::Distillation];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    ZooTrainset,
    ShiftedSet,
    RandomUniform,
}

impl QuerySource {
    pub const ALL: [QuerySource; 3] = [Self::ZooTrainset, Self::ShiftedSet, Self::RandomUniform];

    pub fn name(self) -> &'static str {
        match self {
            Self::ZooTrainset => "zoo-trainset",
            Self::ShiftedSet => "shifted-set",
            Self::RandomUniform => "random-uniform",
        }
    }
}

impl std::str::FromStr for QuerySource {
    type Err = WslError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| WslError::Config(format!("unknown query source `{s}` (expected zoo-trainset, shifted-set or random-uniform)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
    #[serde(default = "default_variant")]
    pub behavioral_variant: BehavioralVariant,
    #[serde(default = "default_distill_temperature")]
    pub distill_temperature: f64,
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
    #[serde(default = "default_query_source")]
    pub query_source: QuerySource,
    #[serde(default = "default_ntxent_temperature")]
    pub ntxent_temperature: f64,
}

fn default_variant() -> BehavioralVariant {
    BehavioralVariant::MseLogits
}
fn default_distill_temperature() -> f64 {
    2.0
}
fn default_n_queries() -> usize {
    256
}
fn default_query_source() -> QuerySource {
    QuerySource::ZooTrainset
}
fn default_ntxent_temperature() -> f64 {
    0.1
}

impl LossConfig {
    pub fn new(gamma: f64, beta: f64) -> Self {
        Self {
            gamma,
            beta,
            behavioral_variant: default_variant(),
            distill_temperature: default_distill_temperature(),
            n_queries: default_n_queries(),
            query_source: default_query_source(),
            ntxent_temperature: default_ntxent_temperature(),
        }
    }

    /// Contrastive plus structural reconstruction.
    pub fn baseline() -> Self {
        Self::new(0.05, 1.0)
    }

    /// Contrastive plus structural plus behavioral reconstruction.
    pub fn full() -> Self {
        Self::new(0.05, 0.1)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return config(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_queries == 0 {
            return config("n_queries must be at least 1");
        }
        for (name, v) in [("distill_temperature", self.distill_temperature), ("ntxent_temperature", self.ntxent_temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return config(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn uses_contrastive(&self) -> bool {
        self.gamma > 0.0
    }

    pub fn uses_structural(&self) -> bool {
        self.gamma < 1.0 && self.beta > 0.0
    }

    pub fn uses_behavioral(&self) -> bool {
        self.gamma < 1.0 && self.beta < 1.0
    }
}

/// Unlabeled query images `[n, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub inputs: Vec<f32>,
    pub n: usize,
    pub source: QuerySource,
    pub seed: u64,
}

/// Image pools the query sampler may draw from.
#[derive(Debug, Clone, Copy)]
pub struct QueryRegistry<'a> {
    pub input: [usize; 3],
    pub trainset: Option<&'a Split>,
    pub shifted: Option<&'a Split>,
}

pub fn sample_queries(source: QuerySource, n: usize, seed: u64, registry: &QueryRegistry) -> Result<QueryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = sample_queries_with(source, n, &mut rng, registry)?;
    Ok(QueryBatch { inputs, n, source, seed })
}

/// Draws `n` distinct images from the chosen pool, or i.i.d. uniform pixels.
pub fn sample_queries_with(source: QuerySource, n: usize, rng: &mut impl Rng, registry: &QueryRegistry) -> Result<Vec<f32>> {
    if n == 0 {
        return config("n_queries must be at least 1");
    }
    let pool = match source {
        QuerySource::RandomUniform => {
            let len = n * registry.input.iter().product::<usize>();
            return Ok((0..len).map(|_| rng.random::<f32>()).collect());
        }
        QuerySource::ZooTrainset => registry.trainset,
        QuerySource::ShiftedSet => registry.shifted,
    };
    let Some(pool) = pool else {
        return config(format!("query source `{}` is not registered", source.name()));
    };
    if pool.shape != registry.input {
        return config(format!("query pool shape {:?} does not match input {:?}", pool.shape, registry.input));
    }
    if pool.len() < n {
        return config(format!("query source `{}` holds {} images, {n} requested", source.name(), pool.len()));
    }
    let idx = index::sample(rng, pool.len(), n).into_vec();
    Ok(pool.gather(&idx))
}

/// `(1/2k) Σ_j ‖θ̂_j − θ_j‖²` over `[k, p]` parameter matrices; `theta` is
/// treated as data.
pub fn structural_loss<T: Scalar>(tape: &mut Tape<T>, theta_hat: Var, theta: Var) -> Result<Var> {
    let sh = tape.shape(theta_hat).to_vec();
    if sh != tape.shape(theta) {
        return contract(format!("structural loss shapes differ: {sh:?} vs {:?}", tape.shape(theta)));
    }
    let k = if sh.len() > 1 { sh[0] } else { 1 };
    let d = tape.sub(theta_hat, theta)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::of(0.5 / k as f64)))
}

/// Behavioral loss of reconstructions `theta_hats` (each `[p]`) against the
/// original parameter vectors on the shared `queries`. The original logits
/// are computed off-tape, so no gradient reaches them.
pub fn behavioral_loss<T: Scalar>(
    tape: &mut Tape<T>,
    theta_hats: &[Var],
    thetas: &[&[T]],
    arch: &ArchitectureSpec,
    queries: &[T],
    variant: BehavioralVariant,
    temperature: f64,
) -> Result<Var> {
    if theta_hats.len() != thetas.len() || theta_hats.is_empty() {
        return contract(format!("{} reconstructions for {} originals", theta_hats.len(), thetas.len()));
    }
    let d = arch.input_len();
    if queries.is_empty() || queries.len() % d != 0 {
        return contract(format!("query buffer of {} values is not a positive multiple of {d}", queries.len()));
    }
    let n = queries.len() / d;
    let k = theta_hats.len();
    let classes = arch.num_classes();
    let [c, h, w] = arch.input;
    let xv = tape.constant(Tensor::new(&[n, c, h, w], queries.to_vec())?);
    let mut total: Option<Var> = None;
    for (j, (&th, theta)) in theta_hats.iter().zip(thetas).enumerate() {
        let target = logits(theta, arch, queries)?;
        let y = forward_classifier(tape, th, arch, xv)?;
        if tape.value(y).iter().any(|v| !v.is_finite()) {
            return Err(WslError::Numerical(format!("reconstruction {j} produced non-finite logits")));
        }
        let term = match variant {
            BehavioralVariant::MseLogits => {
                let tv = tape.constant(Tensor::new(&[n, classes], target)?);
                let diff = tape.sub(y, tv)?;
                let sq = tape.square(diff)?;
                tape.sum(sq)
            }
            BehavioralVariant::CrossEntropy => kl_term(tape, y, &target, n, classes, 1.0)?,
            BehavioralVariant::Distillation => {
                let kl = kl_term(tape, y, &target, n, classes, temperature)?;
                tape.scale(kl, T::of(temperature * temperature))
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one model");
    let norm = match variant {
        BehavioralVariant::MseLogits => 0.5 / (k * n) as f64,
        _ => 1.0 / (k * n) as f64,
    };
    Ok(tape.scale(total, T::of(norm)))
}

/// `Σ_i KL(softmax(f/T) ‖ softmax(f̂/T))` with the original as soft target.
fn kl_term<T: Scalar>(tape: &mut Tape<T>, y: Var, target: &[T], n: usize, classes: usize, temperature: f64) -> Result<Var> {
    let inv_t = 1.0 / temperature;
    let p = soft_targets(target, classes, inv_t);
    // Σ p log p is constant in θ̂ and makes the divergence vanish at θ̂ = θ.
    let neg_entropy: f64 = p.iter().map(|&v| if v > T::zero() { v.as_f64() * v.as_f64().ln() } else { 0.0 }).sum();
    let scaled = tape.scale(y, T::of(inv_t));
    let logq = tape.log_softmax(scaled)?;
    let pv = tape.constant(Tensor::new(&[n, classes], p)?);
    let prod = tape.mul(logq, pv)?;
    let cross = tape.sum(prod);
    let neg_cross = tape.scale(cross, -T::one());
    Ok(tape.add_scalar(neg_cross, T::of(neg_entropy)))
}

fn soft_targets<T: Scalar>(target: &[T], classes: usize, inv_t: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(target.len());
    for row in target.chunks(classes) {
        let m = row.iter().map(|v| v.as_f64() * inv_t).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() * inv_t - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| T::of(v / z)));
    }
    out
}

/// NTXent over `[2B, d]` unit projections ordered `[view1 of models 0..B,
/// view2 of models 0..B]`. Every row is an anchor, so both directions of each
/// positive pair are averaged.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, projections: Var, temperature: f64) -> Result<Var> {
    let sh = tape.shape(projections).to_vec();
    if sh.len() != 2 || sh[0] % 2 != 0 {
        return contract(format!("contrastive loss expects [2B, d] projections, got {sh:?}"));
    }
    let two_b = sh[0];
    let b = two_b / 2;
    if b < 2 {
        return contract("contrastive loss needs at least two models per batch");
    }
    let sim = tape.matmul_t(projections, projections)?;
    let sim = tape.scale(sim, T::of(1.0 / temperature));
    let mut mask = vec![T::zero(); two_b * two_b];
    for i in 0..two_b {
        mask[i * two_b + i] = T::of(-1e9);
    }
    let mv = tape.constant(Tensor::new(&[two_b, two_b], mask)?);
    let masked = tape.add(sim, mv)?;
    let logp = tape.log_softmax(masked)?;
    let idx: Vec<usize> = (0..two_b).map(|i| i * two_b + (i + b) % two_b).collect();
    let pos = tape.gather(logp, &idx)?;
    let m = tape.mean(pos);
    Ok(tape.scale(m, -T::one()))
}

/// `γ L_C + (1−γ)(β L_S + (1−β) L_B)`; absent terms must have zero weight.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    lc: Option<Var>,
    ls: Option<Var>,
    lb: Option<Var>,
    gamma: f64,
    beta: f64,
) -> Result<Var> {
    let weights = [(lc, gamma), (ls, (1.0 - gamma) * beta), (lb, (1.0 - gamma) * (1.0 - beta))];
    let mut total: Option<Var> = None;
    for (term, wgt) in weights {
        match term {
            Some(v) if wgt != 0.0 => {
                let s = tape.scale(v, T::of(wgt));
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            None if wgt != 0.0 => return contract(format!("loss term with weight {wgt} was not computed")),
            _ => {}
        }
    }
    total.ok_or_else(|| WslError::Contract("composite loss has no active term".into()))
}

/// Scalar form of the composite weighting.
pub fn composite_value(lc: f64, ls: f64, lb: f64, gamma: f64, beta: f64) -> f64 {
    let mut v = 0.0;
    if gamma != 0.0 {
        v += gamma * lc;
    }
    if gamma != 1.0 {
        if beta != 0.0 {
            v += (1.0 - gamma) * beta * ls;
        }
        if beta != 1.0 {
            v += (1.0 - gamma) * (1.0 - beta) * lb;
        }
    }
    v
}

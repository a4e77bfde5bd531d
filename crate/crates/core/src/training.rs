//! Autoencoder training over a zoo's training split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsl_tensor::{Adam, Scalar, Tape, Tensor, Var};

use crate::ae::{AEConfig, HyperAe};
use crate::error::{config, Result, WslError};
use crate::losses::{
    behavioral_loss, composite_loss, contrastive_loss, sample_queries_with, structural_loss, LossConfig, QueryRegistry,
};
use crate::tokenizer::{apply_permutation, detokenize_on_tape, sample_permutation_with, tokenize_with};
use crate::zoo::{SplitTag, Zoo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: Option<f64>,
    pub structural: Option<f64>,
    pub behavioral: Option<f64>,
    /// Mean `½‖θ̂−θ‖²` over validation checkpoints.
    pub val_structural: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub compression_ratio: f64,
    pub num_tokens: usize,
    pub train_samples: usize,
    /// Entry 0 is measured before the first update.
    pub epochs: Vec<EpochLog>,
}

/// Mean `½‖θ̂−θ‖²` of plain reconstructions.
pub fn structural_error<T: Scalar>(ae: &HyperAe<T>, thetas: &[&[f32]]) -> Result<Option<f64>> {
    if thetas.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for th in thetas {
        let t: Vec<T> = th.iter().map(|&v| T::of(v as f64)).collect();
        let r = ae.reconstruct(&t)?;
        total += 0.5 * r.iter().zip(&t).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
    }
    Ok(Some(total / thetas.len() as f64))
}

/// Structural weight for `epoch` (1-based): linear from 1 at the first epoch
/// to `beta` once `warmup` epochs have passed. Objectives without a
/// structural term are never warmed up.
pub fn effective_beta(beta: f64, epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 || epoch > warmup || beta == 0.0 {
        return beta;
    }
    let t = (epoch - 1) as f64 / warmup as f64;
    1.0 - (1.0 - beta) * t
}

/// Trains a fresh autoencoder on every checkpoint of the zoo's training split.
pub fn train_ae<T: Scalar>(
    zoo: &Zoo,
    registry: &QueryRegistry,
    loss_cfg: &LossConfig,
    ae_cfg: &AEConfig,
) -> Result<(HyperAe<T>, TrainingLog)> {
    loss_cfg.validate()?;
    let mut ae = HyperAe::<T>::new(ae_cfg.clone(), &zoo.arch)?;
    let train: Vec<&[f32]> = zoo.checkpoints_in(SplitTag::Train).iter().map(|c| c.theta.as_slice()).collect();
    let val: Vec<&[f32]> = zoo.checkpoints_in(SplitTag::Val).iter().map(|c| c.theta.as_slice()).collect();
    if train.is_empty() {
        return config("zoo training split is empty");
    }
    let contrastive = loss_cfg.uses_contrastive();
    if contrastive && (train.len() < 2 || ae_cfg.batch_size < 2) {
        return config("the contrastive term needs batches of at least two models");
    }
    let p = zoo.arch.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(ae_cfg.seed);

    // Pool entry 0 is the unpermuted model, which is also the reconstruction
    // target; the contrastive partner view is drawn from the other entries.
    let pools: Vec<Vec<Vec<T>>> = train
        .iter()
        .map(|th| {
            let mut pool = vec![th.to_vec()];
            for _ in 1..ae_cfg.permutation_pool {
                let plan = sample_permutation_with(&zoo.arch, &mut rng);
                pool.push(apply_permutation(th, &zoo.arch, &plan)?);
            }
            Ok(pool.into_iter().map(|v| v.into_iter().map(|x| T::of(x as f64)).collect()).collect())
        })
        .collect::<Result<_>>()?;

    let mut log = TrainingLog {
        compression_ratio: ae_cfg.compression_ratio(),
        num_tokens: ae.num_tokens(),
        train_samples: train.len(),
        epochs: Vec::with_capacity(ae_cfg.epochs + 1),
    };
    log::info!(
        "training autoencoder: {} samples, {} tokens, compression ratio {:.2}, {} parameters",
        train.len(),
        ae.num_tokens(),
        log.compression_ratio,
        ae.num_parameters()
    );
    log.epochs.push(EpochLog {
        epoch: 0,
        loss: f64::NAN,
        contrastive: None,
        structural: None,
        behavioral: None,
        val_structural: structural_error(&ae, &val)?,
    });

    let mut adam = Adam::<T>::new(ae_cfg.learning_rate, ae_cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let layout = ae.layout.clone();
    let tl = ae_cfg.token_len;
    let nt = layout.num_tokens();
    for epoch in 1..=ae_cfg.epochs {
        order.shuffle(&mut rng);
        let beta = effective_beta(loss_cfg.beta, epoch, ae_cfg.behavioral_warmup);
        let lcfg = LossConfig { beta, ..loss_cfg.clone() };
        let loss_cfg = &lcfg;
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(ae_cfg.batch_size).enumerate() {
            if contrastive && chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let pool_len = ae_cfg.permutation_pool;
            let mut view1: Vec<&[T]> = Vec::with_capacity(b);
            let mut view2: Vec<&[T]> = Vec::with_capacity(b);
            for &i in chunk {
                view1.push(&pools[i][0]);
                if contrastive {
                    let c = if pool_len > 1 { rng.random_range(1..pool_len) } else { 0 };
                    view2.push(&pools[i][c]);
                }
            }
            let views = if contrastive { 2 } else { 1 };
            let mut tokens = Vec::with_capacity(views * b * nt * tl);
            for th in view1.iter().chain(view2.iter()) {
                tokens.extend(tokenize_with(th, &layout)?.tokens);
            }
            let queries: Option<Vec<T>> = if loss_cfg.uses_behavioral() {
                let q = sample_queries_with(loss_cfg.query_source, loss_cfg.n_queries, &mut rng, registry)?;
                Some(q.into_iter().map(|v| T::of(v as f64)).collect())
            } else {
                None
            };

            let mut tape = Tape::new();
            let params = ae.bind(&mut tape);
            let x = tape.constant(Tensor::new(&[views * b * nt, tl], tokens)?);
            let z = ae.encode_on_tape(&mut tape, &params, x, views * b)?;
            let lc = if contrastive {
                let proj = ae.project_on_tape(&mut tape, &params, z, 2 * b)?;
                Some(contrastive_loss(&mut tape, proj, loss_cfg.ntxent_temperature)?)
            } else {
                None
            };
            let needs_recon = loss_cfg.uses_structural() || loss_cfg.uses_behavioral();
            let (mut ls, mut lb) = (None, None);
            if needs_recon {
                let z1 = if contrastive { tape.slice(z, 0, 0, b * nt)? } else { z };
                let recon = ae.decode_on_tape(&mut tape, &params, z1, b)?;
                let hats: Vec<Var> = (0..b).map(|j| detokenize_on_tape(&mut tape, recon, &layout, j)).collect::<Result<_>>()?;
                if loss_cfg.uses_structural() {
                    let stacked = tape.concat(&hats, 0)?;
                    let stacked = tape.reshape(stacked, &[b, p])?;
                    let orig: Vec<T> = view1.iter().flat_map(|v| v.iter().copied()).collect();
                    let ov = tape.constant(Tensor::new(&[b, p], orig)?);
                    ls = Some(structural_loss(&mut tape, stacked, ov)?);
                }
                if let Some(q) = &queries {
                    lb = Some(behavioral_loss(
                        &mut tape,
                        &hats,
                        &view1,
                        &zoo.arch,
                        q,
                        loss_cfg.behavioral_variant,
                        loss_cfg.distill_temperature,
                    )?);
                }
            }
            let loss = composite_loss(&mut tape, lc, ls, lb, loss_cfg.gamma, loss_cfg.beta)?;
            let parts = [Some(loss), lc, ls, lb].map(|v| v.map(|v| tape.value(v)[0].as_f64()));
            if parts.iter().flatten().any(|v| !v.is_finite()) {
                return Err(WslError::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}: total {:?}, contrastive {:?}, structural {:?}, behavioral {:?}",
                    parts[0], parts[1], parts[2], parts[3]
                )));
            }
            tape.backward(loss)?;
            for (t, &v) in ae.params.iter_mut().zip(&params) {
                t.zero_grad();
                match tape.grad(v) {
                    Some(g) => t.accumulate_grad(g)?,
                    None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
                }
            }
            let gnorm = ae.params.iter().filter_map(|t| t.grad()).flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
            log::debug!("epoch {epoch} batch {bi}: grad norm {gnorm:.4e}");
            if ae_cfg.grad_clip > 0.0 && gnorm > ae_cfg.grad_clip {
                let c = T::of(ae_cfg.grad_clip / gnorm);
                for t in &mut ae.params {
                    let g: Vec<T> = t.grad().expect("filled above").iter().map(|&v| v * c).collect();
                    t.zero_grad();
                    t.accumulate_grad(&g)?;
                }
            }
            adam.step(&mut ae.params)?;
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v.unwrap_or(0.0);
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sums[0] / n,
            contrastive: contrastive.then(|| sums[1] / n),
            structural: loss_cfg.uses_structural().then(|| sums[2] / n),
            behavioral: loss_cfg.uses_behavioral().then(|| sums[3] / n),
            val_structural: structural_error(&ae, &val)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} contrastive {:?} structural {:?} behavioral {:?} val {:?}",
            entry.loss,
            entry.contrastive,
            entry.structural,
            entry.behavioral,
            entry.val_structural
        );
        log.epochs.push(entry);
    }
    Ok((ae, log))
}

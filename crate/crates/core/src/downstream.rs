//! Evaluation of learned representations: linear probes, reconstruction
//! fidelity, and latent-space generation of new models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use wsl_tensor::Scalar;

use crate::ae::HyperAe;
use crate::arch::ArchitectureSpec;
use crate::classifier::{accuracy, agreement, logits};
use crate::data::Split;
use crate::error::{config, contract, Result, WslError};
use crate::zoo::{ModelCheckpoint, SplitTag, Zoo};

pub const RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    TestAccuracy,
    GeneralizationGap,
}

impl ProbeTarget {
    pub fn of(self, c: &ModelCheckpoint) -> f64 {
        match self {
            Self::TestAccuracy => c.test_accuracy,
            Self::GeneralizationGap => c.generalization_gap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub r2_train: f64,
    pub r2_test: f64,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub warnings: Vec<String>,
}

/// Ridge regression with an unpenalized intercept: minimizes
/// `‖y − Xw − b‖² + λ‖w‖²`.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return contract(format!("ridge needs matching nonempty inputs, got {n} rows and {} targets", y.len()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return contract("ridge feature rows differ in length");
    }
    let xm: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - xm[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let mut a = xc.transpose() * &xc;
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| a.lu().solve(&rhs))
        .ok_or_else(|| WslError::Numerical("ridge system is singular".into()))?;
    let intercept = ym - w.iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), intercept))
}

pub fn predict(x: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    x.iter().map(|r| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b).collect()
}

/// Coefficient of determination. A constant target yields 0 and `false`.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> (f64, bool) {
    let m = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    if ss_tot <= f64::EPSILON * y.len() as f64 {
        return (0.0, false);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    (1.0 - ss_res / ss_tot, true)
}

/// Fits a ridge probe on `(x_train, y_train)` and scores it on both splits.
pub fn probe_features(
    target: ProbeTarget,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_test: &[Vec<f64>],
    y_test: &[f64],
    lambda: f64,
) -> Result<ProbeResult> {
    let mut warnings = Vec::new();
    let d = x_train.first().map_or(0, Vec::len);
    for j in 0..d {
        let col: Vec<f64> = x_train.iter().map(|r| r[j]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        if col.iter().all(|v| (v - m).abs() < 1e-12) {
            warnings.push(format!("feature {j} has zero variance on the training split"));
        }
    }
    let (w, b) = fit_ridge(x_train, y_train, lambda)?;
    let (r2_train, ok_tr) = r_squared(y_train, &predict(x_train, &w, b));
    let (r2_test, ok_te) = r_squared(y_test, &predict(x_test, &w, b));
    if !ok_tr || !ok_te {
        warnings.push("probe target has zero variance; R² reported as 0".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ProbeResult { target, r2_train, r2_test, weights: w, intercept: b, warnings })
}

/// Token-mean latent feature of every checkpoint in `tag`.
pub fn split_features<'z, T: Scalar>(zoo: &'z Zoo, ae: &HyperAe<T>, tag: SplitTag) -> Result<(Vec<Vec<f64>>, Vec<&'z ModelCheckpoint>)> {
    let ckpts = zoo.checkpoints_in(tag);
    let feats = ckpts.iter().map(|c| center_of_gravity(ae, &c.theta)).collect::<Result<_>>()?;
    Ok((feats, ckpts))
}

pub fn center_of_gravity<T: Scalar>(ae: &HyperAe<T>, theta: &[f32]) -> Result<Vec<f64>> {
    let e = ae.config.embed_dim;
    let z = encode_f64(ae, theta)?;
    let t = z.len() / e;
    Ok((0..e).map(|j| (0..t).map(|i| z[i * e + j]).sum::<f64>() / t as f64).collect())
}

fn encode_f64<T: Scalar>(ae: &HyperAe<T>, theta: &[f32]) -> Result<Vec<f64>> {
    let th: Vec<T> = theta.iter().map(|&v| T::of(v as f64)).collect();
    let z = ae.encode_theta(&th)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(WslError::Numerical("encoder produced non-finite latent codes".into()));
    }
    Ok(z.iter().map(|v| v.as_f64()).collect())
}

/// Linear probe from train-split to test-split checkpoints.
pub fn probe<T: Scalar>(zoo: &Zoo, ae: &HyperAe<T>, target: ProbeTarget) -> Result<ProbeResult> {
    let (xtr, ctr) = split_features(zoo, ae, SplitTag::Train)?;
    let (xte, cte) = split_features(zoo, ae, SplitTag::Test)?;
    if xtr.is_empty() || xte.is_empty() {
        return config("probing needs nonempty train and test splits");
    }
    let ytr: Vec<f64> = ctr.iter().map(|c| target.of(c)).collect();
    let yte: Vec<f64> = cte.iter().map(|c| target.of(c)).collect();
    probe_features(target, &xtr, &ytr, &xte, &yte, RIDGE_LAMBDA)
}

// ---------------------------------------------------------------- reconstruction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, min: 0.0, max: 0.0, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: n,
        }
    }
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range are clamped into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    if bins == 0 || hi <= lo {
        return out;
    }
    for &v in values {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let i = if t.is_nan() { 0 } else { (t.max(0.0) as usize).min(bins - 1) };
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: usize,
    pub epoch: usize,
    pub l2: f64,
    pub agreement: f64,
    pub accuracy_original: f64,
    pub accuracy_reconstructed: f64,
    /// Agreement with a random perturbation of the same L² length.
    pub noise_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub models: Vec<ModelScore>,
    pub l2: Summary,
    pub agreement: Summary,
    pub accuracy_original: Summary,
    pub accuracy_reconstructed: Summary,
    pub noise_agreement: Summary,
    /// Best reconstructed accuracy minus best original accuracy.
    pub max_accuracy_delta: f64,
}

/// Scores `reconstruct` on every checkpoint of split `tag` against `eval`.
pub fn reconstruct_and_score(
    zoo: &Zoo,
    tag: SplitTag,
    reconstruct: impl Fn(&[f32]) -> Result<Vec<f32>>,
    eval: &Split,
) -> Result<ReconstructionReport> {
    let labels = eval.labels.as_ref().ok_or_else(|| WslError::Config("evaluation split has no labels".into()))?;
    let mut models = Vec::new();
    for c in zoo.checkpoints_in(tag) {
        let hat = reconstruct(&c.theta)?;
        if hat.len() != c.theta.len() {
            return contract(format!("reconstruction has {} parameters, expected {}", hat.len(), c.theta.len()));
        }
        if hat.iter().any(|v| !v.is_finite()) {
            return Err(WslError::Numerical(format!("reconstruction of model {} is not finite", c.model_id)));
        }
        let l2 = hat.iter().zip(&c.theta).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        models.push(ModelScore {
            model_id: c.model_id,
            epoch: c.epoch,
            l2,
            agreement: agreement(&c.theta, &hat, &zoo.arch, &eval.images)?,
            accuracy_original: accuracy(&c.theta, &zoo.arch, &eval.images, labels)?,
            accuracy_reconstructed: accuracy(&hat, &zoo.arch, &eval.images, labels)?,
            noise_agreement: agreement(&c.theta, &perturb(&c.theta, l2, (c.model_id * 1000 + c.epoch) as u64), &zoo.arch, &eval.images)?,
        });
    }
    if models.is_empty() {
        return config(format!("zoo {tag:?} split is empty"));
    }
    let col = |f: fn(&ModelScore) -> f64| models.iter().map(f).collect::<Vec<_>>();
    let acc_o = Summary::of(&col(|m| m.accuracy_original));
    let acc_r = Summary::of(&col(|m| m.accuracy_reconstructed));
    Ok(ReconstructionReport {
        l2: Summary::of(&col(|m| m.l2)),
        agreement: Summary::of(&col(|m| m.agreement)),
        noise_agreement: Summary::of(&col(|m| m.noise_agreement)),
        max_accuracy_delta: acc_r.max - acc_o.max,
        accuracy_original: acc_o,
        accuracy_reconstructed: acc_r,
        models,
    })
}

pub fn reconstruct_with<T: Scalar>(ae: &HyperAe<T>) -> impl Fn(&[f32]) -> Result<Vec<f32>> + '_ {
    move |theta| {
        let th: Vec<T> = theta.iter().map(|&v| T::of(v as f64)).collect();
        Ok(ae.reconstruct(&th)?.iter().map(|v| v.as_f64() as f32).collect())
    }
}

// ---------------------------------------------------------------- generation

/// Principal components of row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `q` orthonormal rows of length `D`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fits at most `q` components, capped by the rank bound `m − 1`.
    pub fn fit(data: &[Vec<f64>], q: usize) -> Result<Self> {
        let m = data.len();
        if m < 2 {
            return contract("PCA needs at least two samples");
        }
        let d = data[0].len();
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        let centered = DMatrix::from_fn(m, d, |i, j| data[i][j] - mean[j]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| WslError::Numerical("SVD did not return components".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let q = q.min(m - 1).min(d);
        let components = order[..q].iter().map(|&k| vt.row(k).iter().copied().collect()).collect();
        let explained_variance = order[..q].iter().map(|&k| svd.singular_values[k].powi(2) / (m - 1) as f64).collect();
        Ok(Self { mean, components, explained_variance })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum()).collect()
    }

    pub fn inverse(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &k) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, a)| *o += k * a);
        }
        out
    }
}

/// One-dimensional Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde1d {
    pub points: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde1d {
    /// Bandwidth by Scott's rule, `σ · m^(−1/5)` with the sample standard deviation.
    pub fn scott(points: Vec<f64>) -> Self {
        let m = points.len() as f64;
        let mean = points.iter().sum::<f64>() / m;
        let var = points.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        let bandwidth = (var.sqrt() * m.powf(-0.2)).max(1e-12);
        Self { points, bandwidth }
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * self.points.len() as f64);
        self.points.iter().map(|p| (-0.5 * ((x - p) / h).powi(2)).exp()).sum::<f64>() * norm
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let i = rng.random_range(0..self.points.len());
        let e: f64 = StandardNormal.sample(rng);
        self.points[i] + self.bandwidth * e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationModel {
    /// `(model_id, epoch)` per anchor.
    pub anchors: Vec<(usize, usize)>,
    pub accuracy_threshold: f64,
    pub pca: Pca,
    pub kdes: Vec<Kde1d>,
}

impl GenerationModel {
    pub fn q(&self) -> usize {
        self.pca.dim()
    }
}

/// Accuracy at the given percentile (0–100) by linear interpolation.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub const DEFAULT_ANCHOR_PERCENTILE: f64 = 70.0;
pub const DEFAULT_PCA_DIM: usize = 32;

/// Fits PCA and per-coordinate KDEs on flattened latent codes of train-split
/// checkpoints whose test accuracy reaches `threshold` (default: the 70th
/// percentile of the zoo).
pub fn fit_generator<T: Scalar>(zoo: &Zoo, ae: &HyperAe<T>, threshold: Option<f64>, q: usize) -> Result<GenerationModel> {
    let all: Vec<f64> = zoo.checkpoints.iter().map(|c| c.test_accuracy).collect();
    let threshold = threshold.unwrap_or_else(|| percentile(&all, DEFAULT_ANCHOR_PERCENTILE));
    let anchors: Vec<&ModelCheckpoint> =
        zoo.checkpoints_in(SplitTag::Train).into_iter().filter(|c| c.test_accuracy >= threshold).collect();
    if anchors.len() < 3 {
        return config(format!("only {} anchors reach accuracy threshold {threshold:.4}; at least 3 are needed", anchors.len()));
    }
    let latents = anchors.iter().map(|c| encode_f64(ae, &c.theta)).collect::<Result<Vec<_>>>()?;
    fit_generator_on(anchors.iter().map(|c| (c.model_id, c.epoch)).collect(), &latents, threshold, q)
}

pub fn fit_generator_on(anchors: Vec<(usize, usize)>, latents: &[Vec<f64>], threshold: f64, q: usize) -> Result<GenerationModel> {
    if latents.len() < 3 {
        return config(format!("only {} anchors reach accuracy threshold {threshold:.4}; at least 3 are needed", latents.len()));
    }
    let pca = Pca::fit(latents, q)?;
    let coords: Vec<Vec<f64>> = latents.iter().map(|z| pca.project(z)).collect();
    let kdes = (0..pca.dim()).map(|k| Kde1d::scott(coords.iter().map(|c| c[k]).collect())).collect();
    Ok(GenerationModel { anchors, accuracy_threshold: threshold, pca, kdes })
}

/// Draws latent vectors from the per-coordinate KDEs.
pub fn sample_latents(gen: &GenerationModel, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let coords: Vec<f64> = gen.kdes.iter().map(|k| k.sample(&mut rng)).collect();
            gen.pca.inverse(&coords)
        })
        .collect()
}

/// Samples `count` latent codes and decodes them into parameter vectors.
pub fn generate_models<T: Scalar>(gen: &GenerationModel, ae: &HyperAe<T>, count: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    sample_latents(gen, count, seed)
        .into_iter()
        .map(|z| {
            let zt: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
            let theta = ae.decode_theta(&zt)?;
            Ok(theta.iter().map(|v| v.as_f64() as f32).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub structural: Summary,
    pub behavioral: Summary,
    pub pairs: usize,
}

/// Mean pairwise parameter L² distance and mean pairwise output distance
/// (average over inputs of the L² norm of the logit difference).
pub fn diversity(models: &[Vec<f32>], arch: &ArchitectureSpec, eval: &[f32]) -> Result<Diversity> {
    if models.len() < 2 {
        return contract("diversity needs at least two models");
    }
    let k = arch.num_classes();
    let outs = models
        .iter()
        .map(|m| Ok(logits(m, arch, eval)?.into_iter().map(|v| v as f64).collect::<Vec<f64>>()))
        .collect::<Result<Vec<_>>>()?;
    let n = outs[0].len() / k;
    if n == 0 {
        return contract("diversity needs a nonempty evaluation set");
    }
    let (mut s, mut b) = (Vec::new(), Vec::new());
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            s.push(models[i].iter().zip(&models[j]).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt());
            let d: f64 = outs[i]
                .chunks(k)
                .zip(outs[j].chunks(k))
                .map(|(a, c)| a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .sum();
            b.push(d / n as f64);
        }
    }
    Ok(Diversity { pairs: s.len(), structural: Summary::of(&s), behavioral: Summary::of(&b) })
}

/// Perturbs `theta` by a random direction of the given L² length.
pub fn perturb(theta: &[f32], length: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let dir: Vec<f64> = theta.iter().map(|_| n.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    theta.iter().zip(&dir).map(|(&t, d)| t + (length * d / norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, InitScheme};
    use wsl_tensor::fd::CheckRng;

    /// Gaussian elimination with partial pivoting on the augmented normal
    /// equations of `[1, X]`, penalizing only the slope coefficients.
    fn normal_equations_oracle(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
        let d = x[0].len() + 1;
        let mut a = vec![vec![0.0; d + 1]; d];
        for (row, &t) in x.iter().zip(y) {
            let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += z[i] * z[j];
                }
                a[i][d] += z[i] * t;
            }
        }
        for (i, r) in a.iter_mut().enumerate().skip(1) {
            r[i] += lambda;
        }
        for c in 0..d {
            let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    let pivot = a[c].clone();
                    a[r].iter_mut().zip(&pivot).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let mut r = CheckRng::new(11);
        let x: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| r.uniform(-2.0, 2.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 - v[0] + 2.0 * v[2] + r.uniform(-0.1, 0.1)).collect();
        let (w, b) = fit_ridge(&x, &y, RIDGE_LAMBDA).unwrap();
        let oracle = normal_equations_oracle(&x, &y, RIDGE_LAMBDA);
        assert!((b - oracle[0]).abs() < 1e-8);
        for (a, o) in w.iter().zip(&oracle[1..]) {
            assert!((a - o).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_features_give_perfect_r2() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|v| v[0]).collect();
        let res = probe_features(ProbeTarget::TestAccuracy, &x[..8], &y[..8], &x[8..], &y[8..], RIDGE_LAMBDA).unwrap();
        assert!((res.r2_test - 1.0).abs() < 1e-4);
        assert!(res.r2_train <= 1.0);
    }

    #[test]
    fn constant_target_is_flagged() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y = vec![0.7; 6];
        let res = probe_features(ProbeTarget::GeneralizationGap, &x[..4], &y[..4], &x[4..], &y[4..], RIDGE_LAMBDA).unwrap();
        assert_eq!(res.r2_test, 0.0);
        assert!(!res.warnings.is_empty());
        let flat = vec![vec![1.0]; 6];
        let y2: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let res = probe_features(ProbeTarget::TestAccuracy, &flat[..4], &y2[..4], &flat[4..], &y2[4..], RIDGE_LAMBDA).unwrap();
        assert!(res.warnings.iter().any(|w| w.contains("zero variance")));
    }

    #[test]
    fn pca_is_orthonormal_ordered_and_lossless_at_full_rank() {
        let mut r = CheckRng::new(12);
        let data: Vec<Vec<f64>> = (0..7).map(|_| (0..20).map(|_| r.uniform(-1.0, 1.0)).collect()).collect();
        let pca = Pca::fit(&data, 32).unwrap();
        assert_eq!(pca.dim(), 6);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for v in &data {
            let back = pca.inverse(&pca.project(v));
            assert!(back.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn kde_density_matches_kernel_sum() {
        let pts = vec![-1.0, 0.2, 0.5, 2.0, 3.5];
        let kde = Kde1d::scott(pts.clone());
        let m = pts.len() as f64;
        let mean = pts.iter().sum::<f64>() / m;
        let sd = (pts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        let h = sd * m.powf(-0.2);
        assert!((kde.bandwidth - h).abs() < 1e-15);
        for x in [-2.0, 0.0, 0.3, 1.7, 5.0] {
            let mut brute = 0.0;
            for p in &pts {
                let u = (x - p) / h;
                brute += (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / h;
            }
            brute /= m;
            assert!((kde.density(x) - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn kde_sample_mean_tracks_anchor_mean() {
        let mut r = CheckRng::new(13);
        let latents: Vec<Vec<f64>> = (0..9).map(|_| (0..6).map(|_| r.uniform(-1.0, 1.0)).collect()).collect();
        let gen = fit_generator_on((0..9).map(|i| (i, 0)).collect(), &latents, 0.5, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 9.0f64;
        for kde in &gen.kdes {
            let draws: Vec<f64> = (0..1000).map(|_| kde.sample(&mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / 1000.0;
            let anchor_mean = kde.points.iter().sum::<f64>() / m;
            assert!((mean - anchor_mean).abs() < 3.0 * kde.bandwidth / m.sqrt());
        }
        assert!(sample_latents(&gen, 0, 1).is_empty());
    }

    #[test]
    fn too_few_anchors_name_the_threshold() {
        let latents = vec![vec![0.0; 3], vec![1.0; 3]];
        let err = fit_generator_on(vec![(0, 0), (1, 0)], &latents, 0.8125, 32).unwrap_err();
        assert!(err.to_string().contains("0.8125"));
    }

    #[test]
    fn diversity_matches_double_loop() {
        let arch = ArchitectureSpec::mlp([1, 2, 2], &[5], 3);
        let models: Vec<Vec<f32>> = (0..4).map(|s| build_model(&arch, InitScheme::Normal, s).unwrap()).collect();
        let mut r = CheckRng::new(14);
        let x: Vec<f32> = (0..10 * 4).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        let div = diversity(&models, &arch, &x).unwrap();
        let (mut s, mut b, mut n) = (0.0, 0.0, 0);
        for i in 0..4 {
            for j in 0..4 {
                if i < j {
                    s += models[i].iter().zip(&models[j]).map(|(a, c)| (*a as f64 - *c as f64).powi(2)).sum::<f64>().sqrt();
                    let (li, lj) = (logits(&models[i], &arch, &x).unwrap(), logits(&models[j], &arch, &x).unwrap());
                    let mut acc = 0.0;
                    for q in 0..10 {
                        acc += (0..3).map(|c| (li[q * 3 + c] as f64 - lj[q * 3 + c] as f64).powi(2)).sum::<f64>().sqrt();
                    }
                    b += acc / 10.0;
                    n += 1;
                }
            }
        }
        assert_eq!(div.pairs, n);
        assert!((div.structural.mean - s / n as f64).abs() < 1e-10);
        assert!((div.behavioral.mean - b / n as f64).abs() < 1e-10);
        let same = diversity(&[models[0].clone(), models[0].clone()], &arch, &x).unwrap();
        assert_eq!((same.structural.mean, same.behavioral.mean), (0.0, 0.0));
        let rev: Vec<Vec<f32>> = models.iter().rev().cloned().collect();
        let d2 = diversity(&rev, &arch, &x).unwrap();
        assert!((d2.structural.mean - div.structural.mean).abs() < 1e-12);
        assert!(diversity(&models[..1], &arch, &x).is_err());
    }

    #[test]
    fn histogram_and_percentile() {
        assert_eq!(histogram(&[0.0, 0.05, 0.5, 1.0, 1.2], 0.0, 1.0, 10), vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), 3.0);
        assert!((percentile(&[0.0, 10.0], 70.0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn perturbation_has_requested_length() {
        let theta = vec![0.5f32; 100];
        let p = perturb(&theta, 2.0, 3);
        let l = p.iter().zip(&theta).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        assert!((l - 2.0).abs() < 1e-5);
    }
}

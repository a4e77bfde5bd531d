//! Numerical study of how the behavioral loss gradient relates to
//! parameter-space differences through model Jacobians. Everything here runs
//! in f64.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wsl_tensor::{Tape, Tensor};

use crate::arch::ArchitectureSpec;
use crate::classifier::{forward_classifier, logits};
use crate::error::{contract, Result, WslError};
use crate::losses::{behavioral_loss, BehavioralVariant};

/// Largest parameter count for which dense Jacobians are formed.
pub const MAX_DENSE_PARAMS: usize = 5000;

/// Dense `rows × cols` matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `J v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `Jᵀ u`.
    pub fn apply_t(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate() {
            axpy(&mut out, ur, self.row(r));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub jacobian: Jacobian,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(u, v)| *u += a * v);
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dense(arch: &ArchitectureSpec) -> Result<usize> {
    let p = arch.param_count();
    if p > MAX_DENSE_PARAMS {
        return Err(WslError::Capability(format!(
            "dense Jacobians need p ≤ {MAX_DENSE_PARAMS}, this architecture has {p}; analyze a subsampled parameter subset instead"
        )));
    }
    Ok(p)
}

/// Jacobian of the logits at a single input `x` with respect to `theta`,
/// one reverse pass per output.
pub fn jacobian(theta: &[f64], arch: &ArchitectureSpec, x: &[f64]) -> Result<Jacobian> {
    let p = check_dense(arch)?;
    if theta.len() != p || x.len() != arch.input_len() {
        return contract(format!("jacobian needs {p} parameters and one input of {}", arch.input_len()));
    }
    let k = arch.num_classes();
    let [c, h, w] = arch.input;
    let mut tape = Tape::<f64>::new();
    let th = tape.variable(&[p], theta.to_vec())?;
    let xv = tape.constant(Tensor::new(&[1, c, h, w], x.to_vec())?);
    let y = forward_classifier(&mut tape, th, arch, xv)?;
    let mut data = Vec::with_capacity(k * p);
    for r in 0..k {
        let out = tape.slice(y, 1, r, 1)?;
        let out = tape.sum(out);
        tape.zero_grad();
        tape.backward(out)?;
        data.extend_from_slice(tape.grad(th).expect("theta is trainable"));
    }
    Ok(Jacobian { rows: k, cols: p, data })
}

/// One Jacobian per query in the flattened `queries` buffer.
pub fn jacobians(theta: &[f64], arch: &ArchitectureSpec, queries: &[f64]) -> Result<Vec<Jacobian>> {
    let d = arch.input_len();
    if queries.is_empty() || queries.len() % d != 0 {
        return contract(format!("query buffer of {} values is not a positive multiple of {d}", queries.len()));
    }
    queries.chunks(d).map(|x| jacobian(theta, arch, x)).collect()
}

/// Largest and smallest eigenvalue estimates of a symmetric operator by
/// power iteration, the latter through the shifted operator `λ_max I − A`.
pub fn eigen_extremes(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>, iters: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let power = |op: &dyn Fn(&[f64]) -> Vec<f64>| {
        let mut v = start.clone();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = op(&v);
            lambda = dot(&v, &w);
            let n = norm(&w);
            if n < 1e-300 {
                return 0.0;
            }
            v = w.into_iter().map(|x| x / n).collect();
        }
        lambda
    };
    // Dominant eigenvalue in magnitude first; it bounds the spectrum for the shift.
    let dominant = power(&apply);
    let shift = dominant.abs();
    let top = shift - power(&|v: &[f64]| {
        let a = apply(v);
        v.iter().zip(a).map(|(x, y)| shift * x - y).collect()
    });
    let max = dominant.max(top);
    let min = max - power(&|v: &[f64]| {
        let a = apply(v);
        v.iter().zip(a).map(|(x, y)| max * x - y).collect()
    });
    (max, min)
}

const POWER_ITERS: usize = 200;

pub fn jacobian_report(theta: &[f64], arch: &ArchitectureSpec, x: &[f64]) -> Result<JacobianReport> {
    let j = jacobian(theta, arch, x)?;
    // Singular values of J from the small Gram matrix J Jᵀ.
    let (max, min) = eigen_extremes(j.rows, |u| j.apply(&j.apply_t(u)), POWER_ITERS, 0);
    Ok(JacobianReport { sigma_max: max.max(0.0).sqrt(), sigma_min: min.max(0.0).sqrt(), jacobian: j })
}

/// `F = (1/n) Σ_i J_θ(x_i)ᵀ J_θ̂(x_i)`, dense `p × p` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub p: usize,
    pub n_queries: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
    pub symmetric_norm: f64,
    pub antisymmetric_norm: f64,
    /// Extreme eigenvalue estimates of the symmetric part.
    pub max_eigenvalue: f64,
    pub min_eigenvalue: f64,
}

impl AlignmentMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    /// `Fᵀ v`.
    pub fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (i, &vi) in v.iter().enumerate() {
            axpy(&mut out, vi, &self.data[i * self.p..(i + 1) * self.p]);
        }
        out
    }

    pub fn relative_asymmetry(&self) -> f64 {
        let total = (self.symmetric_norm.powi(2) + self.antisymmetric_norm.powi(2)).sqrt();
        if total == 0.0 {
            0.0
        } else {
            self.antisymmetric_norm / total
        }
    }
}

pub fn alignment_from_jacobians(j_theta: &[Jacobian], j_hat: &[Jacobian]) -> Result<AlignmentMatrix> {
    if j_theta.is_empty() || j_theta.len() != j_hat.len() {
        return contract(format!("{} original and {} reconstructed Jacobians", j_theta.len(), j_hat.len()));
    }
    let p = j_theta[0].cols;
    let n = j_theta.len();
    let mut data = vec![0.0; p * p];
    for (a, b) in j_theta.iter().zip(j_hat) {
        for r in 0..a.rows {
            let (ar, br) = (a.row(r), b.row(r));
            for (i, &ai) in ar.iter().enumerate() {
                if ai != 0.0 {
                    axpy(&mut data[i * p..(i + 1) * p], ai, br);
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v /= n as f64);
    let (mut sym, mut anti) = (0.0, 0.0);
    for i in 0..p {
        for j in 0..p {
            let (x, y) = (data[i * p + j], data[j * p + i]);
            sym += (0.5 * (x + y)).powi(2);
            anti += (0.5 * (x - y)).powi(2);
        }
    }
    let sym_apply = |v: &[f64]| {
        let mut out = vec![0.0; p];
        for i in 0..p {
            let row = &data[i * p..(i + 1) * p];
            out[i] += 0.5 * dot(row, v);
            axpy(&mut out, 0.5 * v[i], row);
        }
        out
    };
    let (max_eigenvalue, min_eigenvalue) = eigen_extremes(p, sym_apply, POWER_ITERS, 1);
    Ok(AlignmentMatrix {
        p,
        n_queries: n,
        symmetric_norm: sym.sqrt(),
        antisymmetric_norm: anti.sqrt(),
        max_eigenvalue,
        min_eigenvalue,
        data,
    })
}

pub fn alignment_matrix(theta: &[f64], theta_hat: &[f64], arch: &ArchitectureSpec, queries: &[f64]) -> Result<AlignmentMatrix> {
    let ja = jacobians(theta, arch, queries)?;
    let jb = jacobians(theta_hat, arch, queries)?;
    alignment_from_jacobians(&ja, &jb)
}

/// `‖f_{θ+εd}(x) − f_θ(x) − ε J_θ(x) d‖` over all inputs in `x`, with `d`
/// the unit vector along `direction`.
pub fn taylor_residual(theta: &[f64], direction: &[f64], arch: &ArchitectureSpec, x: &[f64], eps: f64) -> Result<f64> {
    let js = jacobians(theta, arch, x)?;
    taylor_residual_with(theta, direction, arch, x, eps, &js)
}

fn taylor_residual_with(theta: &[f64], direction: &[f64], arch: &ArchitectureSpec, x: &[f64], eps: f64, js: &[Jacobian]) -> Result<f64> {
    let n = norm(direction);
    if direction.len() != theta.len() || n == 0.0 {
        return contract("Taylor direction must be nonzero and match the parameter count");
    }
    let d: Vec<f64> = direction.iter().map(|v| v / n).collect();
    let moved: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t + eps * v).collect();
    let f0 = logits(theta, arch, x)?;
    let f1 = logits(&moved, arch, x)?;
    let lin: Vec<f64> = js.iter().flat_map(|j| j.apply(&d)).collect();
    let r: f64 = f1.iter().zip(&f0).zip(&lin).map(|((a, b), l)| (a - b - eps * l).powi(2)).sum();
    Ok(r.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorOrder {
    pub directions: usize,
    pub eps: f64,
    /// Mean of `residual(ε) / residual(ε/2)` over directions.
    pub mean_ratio: f64,
    pub ratios: Vec<f64>,
}

/// Residual ratio under ε-halving along random unit directions. Directions
/// with a residual below round-off are skipped.
pub fn taylor_order(theta: &[f64], arch: &ArchitectureSpec, x: &[f64], eps: f64, directions: usize, seed: u64) -> Result<TaylorOrder> {
    let js = jacobians(theta, arch, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(directions);
    for _ in 0..directions {
        let d: Vec<f64> = theta.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = taylor_residual_with(theta, &d, arch, x, eps, &js)?;
        let b = taylor_residual_with(theta, &d, arch, x, eps / 2.0, &js)?;
        if b > 1e-13 {
            ratios.push(a / b);
        }
    }
    let mean_ratio = if ratios.is_empty() { f64::NAN } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    Ok(TaylorOrder { directions, eps, mean_ratio, ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub exact_grad: Vec<f64>,
    /// `Fᵀ Δθ`.
    pub approx_grad: Vec<f64>,
    pub delta_norm: f64,
    pub cosine: f64,
    pub rel_err: f64,
    /// Largest elementwise gap between `Fᵀ Δθ` and the double-sum form
    /// `(1/n) Σ_i (J_θ(x_i) Δθ)ᵀ J_θ̂(x_i)`.
    pub double_sum_max_err: f64,
    /// Both gradients vanish because `θ̂ = θ`.
    pub degenerate: bool,
}

/// Exact gradient of the single-model logit-matching loss with respect to
/// `θ̂` against its first-order approximation through the alignment matrix.
pub fn behavioral_grad_check(theta: &[f64], theta_hat: &[f64], arch: &ArchitectureSpec, queries: &[f64]) -> Result<GradCheckReport> {
    let p = check_dense(arch)?;
    if theta.len() != p || theta_hat.len() != p {
        return contract(format!("grad check needs two parameter vectors of length {p}"));
    }
    let mut tape = Tape::<f64>::new();
    let hat = tape.variable(&[p], theta_hat.to_vec())?;
    let loss = behavioral_loss(&mut tape, &[hat], &[theta], arch, queries, BehavioralVariant::MseLogits, 1.0)?;
    tape.backward(loss)?;
    let exact_grad = tape.grad(hat).expect("theta_hat is trainable").to_vec();

    let ja = jacobians(theta, arch, queries)?;
    let jb = jacobians(theta_hat, arch, queries)?;
    let f = alignment_from_jacobians(&ja, &jb)?;
    let delta: Vec<f64> = theta_hat.iter().zip(theta).map(|(a, b)| a - b).collect();
    let approx_grad = f.apply_t(&delta);

    let mut double_sum = vec![0.0; p];
    for (a, b) in ja.iter().zip(&jb) {
        axpy(&mut double_sum, 1.0 / ja.len() as f64, &b.apply_t(&a.apply(&delta)));
    }
    let double_sum_max_err = double_sum.iter().zip(&approx_grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let delta_norm = norm(&delta);
    let (ne, na) = (norm(&exact_grad), norm(&approx_grad));
    let degenerate = delta_norm == 0.0;
    let (cosine, rel_err) = if degenerate || ne == 0.0 || na == 0.0 {
        (if ne == na { 1.0 } else { 0.0 }, if ne == 0.0 { na } else { 1.0 })
    } else {
        let diff: Vec<f64> = exact_grad.iter().zip(&approx_grad).map(|(a, b)| a - b).collect();
        (dot(&exact_grad, &approx_grad) / (ne * na), norm(&diff) / ne)
    };
    Ok(GradCheckReport { exact_grad, approx_grad, delta_norm, cosine, rel_err, double_sum_max_err, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub delta_norm: f64,
    pub cosine: f64,
    pub rel_err: f64,
    pub double_sum_max_err: f64,
}

/// Grad checks at `θ̂ = θ + ε‖θ‖ d` for unit `d` along `direction`.
pub fn epsilon_sweep(theta: &[f64], direction: &[f64], arch: &ArchitectureSpec, queries: &[f64], eps: &[f64]) -> Result<Vec<SweepPoint>> {
    let dn = norm(direction);
    if dn == 0.0 || direction.len() != theta.len() {
        return contract("sweep direction must be nonzero and match the parameter count");
    }
    let scale = norm(theta);
    eps.iter()
        .map(|&e| {
            let hat: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + e * scale * d / dn).collect();
            let r = behavioral_grad_check(theta, &hat, arch, queries)?;
            Ok(SweepPoint { eps: e, delta_norm: r.delta_norm, cosine: r.cosine, rel_err: r.rel_err, double_sum_max_err: r.double_sum_max_err })
        })
        .collect()
}

pub fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub const SWEEP_EPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Per-model analysis written to the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub model_id: usize,
    pub epoch: usize,
    pub n_queries: usize,
    pub taylor: TaylorOrder,
    pub sweep: Vec<SweepPoint>,
    pub cosine_increases: bool,
    pub rel_err_decreases: bool,
    /// Diagnostics of `F` at `θ̂ = θ`, which must be positive semidefinite.
    pub self_alignment: AlignmentMatrix,
    pub jacobian_sigma_max: f64,
    pub jacobian_sigma_min: f64,
}

pub fn analyze_model(
    model_id: usize,
    epoch: usize,
    theta: &[f64],
    arch: &ArchitectureSpec,
    queries: &[f64],
    seed: u64,
) -> Result<ModelAnalysis> {
    let taylor = taylor_order(theta, arch, queries, 1e-2, 20, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EE9);
    let dir: Vec<f64> = theta.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
    let sweep = epsilon_sweep(theta, &dir, arch, queries, &SWEEP_EPS)?;
    let cos: Vec<f64> = sweep.iter().map(|s| s.cosine).collect();
    let rel: Vec<f64> = sweep.iter().map(|s| s.rel_err).collect();
    let self_alignment = alignment_matrix(theta, theta, arch, queries)?;
    let jr = jacobian_report(theta, arch, &queries[..arch.input_len()])?;
    Ok(ModelAnalysis {
        model_id,
        epoch,
        n_queries: queries.len() / arch.input_len(),
        taylor,
        cosine_increases: strictly_increasing(&cos),
        rel_err_decreases: strictly_decreasing(&rel),
        sweep,
        self_alignment,
        jacobian_sigma_max: jr.sigma_max,
        jacobian_sigma_min: jr.sigma_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, InitScheme};
    use crate::losses::structural_loss;
    use wsl_tensor::fd::{central_gradient, max_relative_error, CheckRng};

    fn linear() -> ArchitectureSpec {
        ArchitectureSpec::mlp([1, 2, 2], &[], 3)
    }

    fn small_cnn() -> ArchitectureSpec {
        use crate::arch::Layer;
        ArchitectureSpec {
            input: [1, 6, 6],
            layers: vec![
                Layer::Conv { c_in: 1, c_out: 2, k: 3 },
                Layer::Relu,
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Flatten,
                Layer::Linear { d_in: 8, d_out: 5 },
                Layer::Relu,
                Layer::Linear { d_in: 5, d_out: 3 },
            ],
        }
    }

    fn f64_model(arch: &ArchitectureSpec, seed: u64) -> Vec<f64> {
        build_model(arch, InitScheme::KaimingNormal, seed).unwrap().iter().map(|&v| v as f64).collect()
    }

    fn inputs(arch: &ArchitectureSpec, n: usize, seed: u64) -> Vec<f64> {
        let mut r = CheckRng::new(seed);
        (0..n * arch.input_len()).map(|_| r.uniform(0.0, 1.0)).collect()
    }

    #[test]
    fn linear_jacobian_is_closed_form() {
        let arch = linear();
        let theta = f64_model(&arch, 0);
        let x = inputs(&arch, 1, 1);
        let j = jacobian(&theta, &arch, &x).unwrap();
        assert_eq!((j.rows, j.cols), (3, 15));
        for r in 0..3 {
            for c in 0..15 {
                let (row, slot) = (c / 5, c % 5);
                let want = if row != r { 0.0 } else if slot < 4 { x[slot] } else { 1.0 };
                assert_eq!(j.row(r)[c], want);
            }
        }
        assert_eq!(j, jacobian(&theta, &arch, &x).unwrap());
    }

    #[test]
    fn jacobian_rows_match_finite_differences() {
        let arch = small_cnn();
        let theta = f64_model(&arch, 2);
        let x = inputs(&arch, 1, 3);
        let j = jacobian(&theta, &arch, &x).unwrap();
        for r in 0..3 {
            let fd = central_gradient(|t| logits(t, &arch, &x).unwrap()[r], &theta, 1e-6);
            assert!(max_relative_error(j.row(r), &fd, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn oversized_architectures_are_refused() {
        let arch = ArchitectureSpec::paper_cnn();
        let err = jacobian(&vec![0.0; arch.param_count()], &arch, &vec![0.0; arch.input_len()]).unwrap_err();
        assert!(matches!(err, WslError::Capability(_)));
        assert!(err.to_string().contains("subsampled"));
    }

    #[test]
    fn single_output_self_alignment_is_outer_product() {
        let arch = ArchitectureSpec::mlp([1, 1, 3], &[4], 1);
        let theta = f64_model(&arch, 4);
        let x = inputs(&arch, 1, 5);
        let f = alignment_matrix(&theta, &theta, &arch, &x).unwrap();
        let g = jacobian(&theta, &arch, &x).unwrap();
        for i in 0..f.p {
            for k in 0..f.p {
                assert!((f.get(i, k) - g.data[i] * g.data[k]).abs() < 1e-14);
            }
        }
        let sq = dot(&g.data, &g.data);
        assert!((f.max_eigenvalue - sq).abs() < 1e-8 * sq);
        assert!(f.min_eigenvalue > -1e-8);
    }

    #[test]
    fn self_alignment_is_symmetric_psd() {
        let arch = small_cnn();
        let theta = f64_model(&arch, 6);
        let q = inputs(&arch, 4, 7);
        let f = alignment_matrix(&theta, &theta, &arch, &q).unwrap();
        assert!(f.relative_asymmetry() < 1e-6);
        assert!(f.min_eigenvalue > -1e-8);
        assert!(f.max_eigenvalue > 0.0);
    }

    #[test]
    fn alignment_matches_recomputation() {
        let arch = small_cnn();
        let theta = f64_model(&arch, 8);
        let hat = f64_model(&arch, 9);
        let q = inputs(&arch, 3, 10);
        let ja: Vec<Jacobian> = q.chunks(arch.input_len()).map(|x| jacobian(&theta, &arch, x).unwrap()).collect();
        let jb: Vec<Jacobian> = q.chunks(arch.input_len()).map(|x| jacobian(&hat, &arch, x).unwrap()).collect();
        let f = alignment_matrix(&theta, &hat, &arch, &q).unwrap();
        let p = f.p;
        for i in 0..p {
            for k in 0..p {
                let mut v = 0.0;
                for (a, b) in ja.iter().zip(&jb) {
                    for r in 0..a.rows {
                        v += a.data[r * p + i] * b.data[r * p + k];
                    }
                }
                assert!((f.get(i, k) - v / 3.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn taylor_residual_cases() {
        let arch = linear();
        let theta = f64_model(&arch, 11);
        let x = inputs(&arch, 3, 12);
        let d = f64_model(&arch, 13);
        for eps in [0.0, 1e-3, 1.0, 10.0] {
            assert!(taylor_residual(&theta, &d, &arch, &x, eps).unwrap() < 1e-12);
        }
        let cnn = small_cnn();
        let t = f64_model(&cnn, 14);
        let xc = inputs(&cnn, 2, 15);
        assert_eq!(taylor_residual(&t, &f64_model(&cnn, 16), &cnn, &xc, 0.0).unwrap(), 0.0);
        let order = taylor_order(&t, &cnn, &xc, 1e-2, 20, 17).unwrap();
        assert!((3.5..=4.5).contains(&order.mean_ratio), "ratio {}", order.mean_ratio);
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let arch = linear();
        let theta = f64_model(&arch, 18);
        let q = inputs(&arch, 5, 19);
        for s in [1e-3, 1.0, 5.0] {
            let hat: Vec<f64> = theta.iter().zip(f64_model(&arch, 20)).map(|(a, b)| a + s * b).collect();
            let r = behavioral_grad_check(&theta, &hat, &arch, &q).unwrap();
            assert!(r.cosine > 1.0 - 1e-12);
            assert!(r.rel_err < 1e-12);
            assert!(r.double_sum_max_err < 1e-10);
        }
        let r = behavioral_grad_check(&theta, &theta, &arch, &q).unwrap();
        assert!(r.degenerate);
        assert!(r.exact_grad.iter().chain(&r.approx_grad).all(|&v| v == 0.0));
    }

    #[test]
    fn approximation_improves_as_reconstruction_approaches() {
        let arch = small_cnn();
        let theta = f64_model(&arch, 21);
        let q = inputs(&arch, 6, 22);
        let dir = f64_model(&arch, 23);
        let sweep = epsilon_sweep(&theta, &dir, &arch, &q, &SWEEP_EPS).unwrap();
        let cos: Vec<f64> = sweep.iter().map(|s| s.cosine).collect();
        let rel: Vec<f64> = sweep.iter().map(|s| s.rel_err).collect();
        assert!(strictly_increasing(&cos), "{cos:?}");
        assert!(strictly_decreasing(&rel), "{rel:?}");
        assert!(sweep.iter().all(|s| s.double_sum_max_err < 1e-10));
    }

    #[test]
    fn structural_gradient_is_delta_over_k() {
        let mut r = CheckRng::new(24);
        let (k, p) = (3, 7);
        let hat: Vec<f64> = (0..k * p).map(|_| r.uniform(-1.0, 1.0)).collect();
        let orig: Vec<f64> = (0..k * p).map(|_| r.uniform(-1.0, 1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let h = tape.variable(&[k, p], hat.clone()).unwrap();
        let o = tape.constant(Tensor::new(&[k, p], orig.clone()).unwrap());
        let l = structural_loss(&mut tape, h, o).unwrap();
        tape.backward(l).unwrap();
        for ((g, a), b) in tape.grad(h).unwrap().iter().zip(&hat).zip(&orig) {
            assert!((g - (a - b) / k as f64).abs() < 1e-15);
        }
    }
}

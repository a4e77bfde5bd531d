//! Zoo classifiers as pure functions of a flat parameter vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use wsl_tensor::{Scalar, Tape, Tensor, Var};

use crate::arch::{ArchitectureSpec, Layer};
use crate::error::{contract, Result, WslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Uniform,
    Normal,
    KaimingUniform,
    KaimingNormal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] =
        [InitScheme::Uniform, InitScheme::Normal, InitScheme::KaimingUniform, InitScheme::KaimingNormal];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Uniform => "uniform",
            InitScheme::Normal => "normal",
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::KaimingNormal => "kaiming_normal",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = WslError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| WslError::Config(format!("unknown init scheme {s:?}")))
    }
}

/// Half-width of the plain uniform scheme.
pub const UNIFORM_BOUND: f64 = 0.1;
/// Standard deviation of the plain normal scheme.
pub const NORMAL_STD: f64 = 0.1;

/// Draws an initial parameter vector. Biases start at zero; Kaiming variants
/// scale by fan-in with the ReLU gain.
pub fn build_model(arch: &ArchitectureSpec, scheme: InitScheme, seed: u64) -> Result<Vec<f32>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0f32; arch.param_count()];
    for pl in arch.param_layers() {
        let fan_in = pl.fan_in as f64;
        for r in 0..pl.rows {
            let row = &mut theta[pl.offset + r * pl.row_len()..pl.offset + r * pl.row_len() + pl.fan_in];
            match scheme {
                InitScheme::Uniform => fill(row, Uniform::new_inclusive(-UNIFORM_BOUND, UNIFORM_BOUND).unwrap(), &mut rng),
                InitScheme::Normal => fill(row, Normal::new(0.0, NORMAL_STD).unwrap(), &mut rng),
                InitScheme::KaimingUniform => {
                    let b = (6.0 / fan_in).sqrt();
                    fill(row, Uniform::new_inclusive(-b, b).unwrap(), &mut rng)
                }
                InitScheme::KaimingNormal => fill(row, Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap(), &mut rng),
            }
        }
    }
    Ok(theta)
}

fn fill<D: Distribution<f64>>(row: &mut [f32], d: D, rng: &mut impl Rng) {
    row.iter_mut().for_each(|v| *v = d.sample(rng) as f32);
}

/// Records the classifier forward pass. `theta` is the flat parameter vector
/// (any node, so gradients can flow into a reconstruction) and `x` is
/// `[N, C, H, W]`. Returns logits `[N, classes]`.
pub fn forward_classifier<T: Scalar>(tape: &mut Tape<T>, theta: Var, arch: &ArchitectureSpec, x: Var) -> Result<Var> {
    let p = arch.param_count();
    if tape.shape(theta) != [p] {
        return Err(WslError::Tensor(wsl_tensor::TensorError::Shape {
            op: "forward_classifier",
            detail: format!("theta has shape {:?}, architecture needs [{p}]", tape.shape(theta)),
        }));
    }
    let xs = tape.shape(x).to_vec();
    let [c, h, w] = arch.input;
    if xs.len() != 4 || xs[1..] != [c, h, w] {
        return Err(WslError::Tensor(wsl_tensor::TensorError::Shape {
            op: "forward_classifier",
            detail: format!("input {xs:?} does not match architecture input {:?}", arch.input),
        }));
    }
    let n = xs[0];
    let mut params = arch.param_layers().into_iter();
    let mut h_var = x;
    for layer in &arch.layers {
        h_var = match *layer {
            Layer::Conv { c_in, c_out, k } => {
                let pl = params.next().expect("param layer per conv");
                let (wv, bv) = split_layer(tape, theta, pl.offset, pl.rows, pl.fan_in)?;
                let wv = tape.reshape(wv, &[c_out, c_in, k, k])?;
                tape.conv2d(h_var, wv, Some(bv), 1, 0)?
            }
            Layer::Linear { .. } => {
                let pl = params.next().expect("param layer per linear");
                let (wv, bv) = split_layer(tape, theta, pl.offset, pl.rows, pl.fan_in)?;
                let y = tape.matmul_t(h_var, wv)?;
                tape.add(y, bv)?
            }
            Layer::MaxPool { k, stride } => tape.maxpool2d(h_var, k, stride)?,
            Layer::Relu => tape.relu(h_var),
            Layer::Flatten => {
                let d = tape.shape(h_var)[1..].iter().product::<usize>();
                tape.reshape(h_var, &[n, d])?
            }
        };
    }
    Ok(h_var)
}

fn split_layer<T: Scalar>(tape: &mut Tape<T>, theta: Var, offset: usize, rows: usize, fan_in: usize) -> Result<(Var, Var)> {
    let region = tape.slice(theta, 0, offset, rows * (fan_in + 1))?;
    let mat = tape.reshape(region, &[rows, fan_in + 1])?;
    let w = tape.slice(mat, 1, 0, fan_in)?;
    let b = tape.slice(mat, 1, fan_in, 1)?;
    let b = tape.reshape(b, &[rows])?;
    Ok((w, b))
}

const EVAL_CHUNK: usize = 512;

/// Logits for `n` flattened inputs, computed without gradients.
pub fn logits<T: Scalar>(theta: &[T], arch: &ArchitectureSpec, inputs: &[T]) -> Result<Vec<T>> {
    let d = arch.input_len();
    if inputs.len() % d != 0 {
        return contract(format!("input buffer of {} is not a multiple of {d}", inputs.len()));
    }
    let n = inputs.len() / d;
    let [c, h, w] = arch.input;
    let mut out = Vec::with_capacity(n * arch.num_classes());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let m = EVAL_CHUNK.min(n - start);
        let mut tape = Tape::new();
        let th = tape.constant(Tensor::from_vec(theta.to_vec()));
        let xv = tape.constant(Tensor::new(&[m, c, h, w], inputs[start * d..(start + m) * d].to_vec())?);
        let y = forward_classifier(&mut tape, th, arch, xv)?;
        out.extend_from_slice(tape.value(y));
    }
    Ok(out)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions<T: Scalar>(theta: &[T], arch: &ArchitectureSpec, inputs: &[T]) -> Result<Vec<usize>> {
    let k = arch.num_classes();
    Ok(logits(theta, arch, inputs)?.chunks(k).map(argmax).collect())
}

pub fn accuracy(theta: &[f32], arch: &ArchitectureSpec, inputs: &[f32], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return contract("accuracy over an empty set");
    }
    let preds = predictions(theta, arch, inputs)?;
    if preds.len() != labels.len() {
        return contract(format!("{} inputs but {} labels", preds.len(), labels.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of inputs on which both models predict the same class.
pub fn agreement(theta_a: &[f32], theta_b: &[f32], arch: &ArchitectureSpec, inputs: &[f32]) -> Result<f64> {
    if inputs.is_empty() {
        return contract("agreement over an empty input set");
    }
    let pa = predictions(theta_a, arch, inputs)?;
    let pb = predictions(theta_b, arch, inputs)?;
    Ok(pa.iter().zip(&pb).filter(|(a, b)| a == b).count() as f64 / pa.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use wsl_tensor::fd::{central_gradient, max_relative_error, CheckRng};

    #[test]
    fn uniform_init_respects_bounds() {
        let arch = ArchitectureSpec::desk_default();
        let theta = build_model(&arch, InitScheme::Uniform, 3).unwrap();
        assert_eq!(theta.len(), arch.param_count());
        assert!(theta.iter().all(|v| v.abs() <= UNIFORM_BOUND as f32));
        assert!(theta.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn unknown_scheme_is_config_error() {
        assert!(matches!("xavier".parse::<InitScheme>(), Err(WslError::Config(_))));
        assert_eq!("kaiming_normal".parse::<InitScheme>().unwrap(), InitScheme::KaimingNormal);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let arch = ArchitectureSpec::desk_default();
        let theta = vec![0f32; arch.param_count()];
        let mut r = CheckRng::new(1);
        let x: Vec<f32> = (0..3 * 256).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        let y = logits(&theta, &arch, &x).unwrap();
        assert_eq!(y.len(), 9);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let arch = ArchitectureSpec::desk_default();
        let theta = build_model(&arch, InitScheme::KaimingNormal, 0).unwrap();
        let mut r = CheckRng::new(2);
        let x: Vec<f32> = (0..4 * 256).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        assert_eq!(logits(&theta, &arch, &x).unwrap(), logits(&theta, &arch, &x).unwrap());
    }

    #[test]
    fn input_shape_mismatch_is_dimension_error() {
        let arch = ArchitectureSpec::desk_default();
        let mut tape = Tape::<f32>::new();
        let th = tape.constant(Tensor::zeros(&[arch.param_count()]));
        let x = tape.constant(Tensor::zeros(&[2, 1, 8, 8]));
        let err = forward_classifier(&mut tape, th, &arch, x).unwrap_err();
        assert!(matches!(err, WslError::Tensor(_)), "{err}");
    }

    #[test]
    fn logit_sum_gradient_matches_finite_differences() {
        let arch = ArchitectureSpec {
            input: [1, 6, 6],
            layers: vec![
                Layer::Conv { c_in: 1, c_out: 2, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { d_in: 8, d_out: 3 },
            ],
        };
        let mut r = CheckRng::new(4);
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| r.uniform(-0.8, 0.8)).collect();
        let x: Vec<f64> = (0..3 * 36).map(|_| r.uniform(0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let th = tape.variable(&[theta.len()], theta.clone()).unwrap();
        let xv = tape.constant(Tensor::new(&[3, 1, 6, 6], x.clone()).unwrap());
        let y = forward_classifier(&mut tape, th, &arch, xv).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let analytic = tape.grad(th).unwrap().to_vec();
        let numeric = central_gradient(|t| logits(t, &arch, &x).unwrap().iter().sum(), &theta, 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-3) < 1e-4);
    }

    #[test]
    fn agreement_is_symmetric_and_reflexive() {
        let arch = ArchitectureSpec::desk_default();
        let a = build_model(&arch, InitScheme::KaimingUniform, 1).unwrap();
        let b = build_model(&arch, InitScheme::KaimingUniform, 2).unwrap();
        let mut r = CheckRng::new(3);
        let x: Vec<f32> = (0..64 * 256).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        assert_eq!(agreement(&a, &a, &arch, &x).unwrap(), 1.0);
        assert_eq!(agreement(&a, &b, &arch, &x).unwrap(), agreement(&b, &a, &arch, &x).unwrap());
        assert!(agreement(&a, &b, &arch, &[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}

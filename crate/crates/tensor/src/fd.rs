//! Central finite differences, used as an independent oracle for autodiff.

/// Numerical gradient of `f` at `x` with step `h`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over components of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

use crate::{Result, Tape, Tensor, Var};

/// Compares tape gradients of `build` against central differences.
///
/// `build` maps the recorded inputs to an output of any shape; the output is
/// contracted with the fixed `weights` (cycled) to form a scalar loss. Returns
/// the maximum relative error over all input components.
pub fn gradcheck(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    weights: &[f64],
    h: f64,
) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).iter().enumerate().map(|(i, &v)| v * weights[i % weights.len()]).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| weights[i % weights.len()]).collect();
    let wv = tape.constant(Tensor::new(tape.shape(out), w)?);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, (var, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = central_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(t.shape(), x.to_vec()).expect("same shape");
                eval(&probe).unwrap_or(f64::NAN)
            },
            t.data(),
            h,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-3));
    }
    Ok(worst)
}

/// Small deterministic generator for randomized check inputs.
#[derive(Debug, Clone)]
pub struct CheckRng(u64);

impl CheckRng {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.uniform(lo, hi)).collect()).expect("consistent")
    }

    /// Values bounded away from zero, for kinked ops.
    pub fn tensor_off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.uniform(0.05, 1.0);
                if self.next_u64() & 1 == 0 { m } else { -m }
            })
            .collect();
        Tensor::new(shape, data).expect("consistent")
    }
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomized gradient-check case for a named op.
pub struct OpCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

/// Randomized instance of every differentiable tape op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = CheckRng::new(seed);
    let mut cases = Vec::new();
    let (a, b) = (r.range(1, 4), r.range(1, 5));
    let mut case = |op: &'static str, inputs: Vec<Tensor<f64>>, build: Builder| cases.push(OpCase { op, inputs, build });

    case("add", vec![r.tensor(&[a, b], -1.0, 1.0), r.tensor(&[b], -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1])));
    case("sub", vec![r.tensor(&[a, b], -1.0, 1.0), r.tensor(&[a, b], -1.0, 1.0)], Box::new(|t, v| t.sub(v[0], v[1])));
    case("mul", vec![r.tensor(&[a, b], -1.0, 1.0), r.tensor(&[b], -1.0, 1.0)], Box::new(|t, v| t.mul(v[0], v[1])));
    case("div", vec![r.tensor(&[a, b], -1.0, 1.0), r.tensor(&[a, b], 0.5, 2.0)], Box::new(|t, v| t.div(v[0], v[1])));
    let c = r.uniform(-2.0, 2.0);
    case("scale", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(move |t, v| Ok(t.scale(v[0], c))));
    case("add_scalar", vec![r.tensor(&[b], -1.0, 1.0)], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))));

    let (m, k, n) = (r.range(1, 4), r.range(1, 5), r.range(1, 4));
    case("matmul", vec![r.tensor(&[2, m, k], -1.0, 1.0), r.tensor(&[k, n], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1])));
    case("matmul_batched", vec![r.tensor(&[2, m, k], -1.0, 1.0), r.tensor(&[2, k, n], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1])));
    case("matmul_t", vec![r.tensor(&[2, m, k], -1.0, 1.0), r.tensor(&[2, n, k], -1.0, 1.0)], Box::new(|t, v| t.matmul_t(v[0], v[1])));

    let (ci, co, hw) = (r.range(1, 3), r.range(1, 3), r.range(4, 6));
    let stride = r.range(1, 2);
    let pad = r.range(0, 1);
    case(
        "conv2d",
        vec![r.tensor(&[2, ci, hw, hw], -1.0, 1.0), r.tensor(&[co, ci, 3, 3], -1.0, 1.0), r.tensor(&[co], -1.0, 1.0)],
        Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
    );
    case("maxpool2d", vec![r.tensor(&[2, ci, hw, hw], -1.0, 1.0)], Box::new(|t, v| t.maxpool2d(v[0], 2, 2)));
    case("relu", vec![r.tensor_off_zero(&[a, b])], Box::new(|t, v| Ok(t.relu(v[0]))));
    case("exp", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(|t, v| Ok(t.exp(v[0]))));
    case("log", vec![r.tensor(&[a, b], 0.5, 2.0)], Box::new(|t, v| Ok(t.log(v[0]))));
    case("sqrt", vec![r.tensor(&[a, b], 0.5, 2.0)], Box::new(|t, v| Ok(t.sqrt(v[0]))));
    case("softmax", vec![r.tensor(&[a, b + 1], -2.0, 2.0)], Box::new(|t, v| t.softmax(v[0])));
    case("log_softmax", vec![r.tensor(&[a, b + 1], -2.0, 2.0)], Box::new(|t, v| t.log_softmax(v[0])));
    case("reshape", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(move |t, v| t.reshape(v[0], &[b, a])));
    case("transpose", vec![r.tensor(&[a, b, 2], -1.0, 1.0)], Box::new(|t, v| t.transpose(v[0], 0, 1)));
    case("permute", vec![r.tensor(&[a, b, 2, 3], -1.0, 1.0)], Box::new(|t, v| t.permute(v[0], &[0, 2, 1, 3])));
    let start = r.range(0, b - 1);
    case("slice", vec![r.tensor(&[a, b, 2], -1.0, 1.0)], Box::new(move |t, v| t.slice(v[0], 1, start, b - start)));
    case(
        "concat",
        vec![r.tensor(&[a, b], -1.0, 1.0), r.tensor(&[a, 2], -1.0, 1.0)],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    );
    case("sum", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(|t, v| Ok(t.sum(v[0]))));
    case("mean", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(|t, v| Ok(t.mean(v[0]))));
    case("sum_axis", vec![r.tensor(&[a, b, 2], -1.0, 1.0)], Box::new(|t, v| t.sum_axis(v[0], 1)));
    case("mean_axis", vec![r.tensor(&[a, b, 2], -1.0, 1.0)], Box::new(|t, v| t.mean_axis(v[0], 0)));
    let d = b + 2;
    case(
        "layernorm",
        vec![r.tensor(&[a, d], -2.0, 2.0), r.tensor(&[d], 0.5, 1.5), r.tensor(&[d], -0.5, 0.5)],
        Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
    );
    let rows = r.range(2, 5);
    let idx: Vec<usize> = (0..4).map(|_| r.range(0, rows - 1)).collect();
    case("embedding", vec![r.tensor(&[rows, b], -1.0, 1.0)], Box::new(move |t, v| t.embedding(v[0], &idx)));
    let gidx: Vec<usize> = (0..5).map(|_| r.range(0, a * b - 1)).collect();
    case("gather", vec![r.tensor(&[a, b], -1.0, 1.0)], Box::new(move |t, v| t.gather(v[0], &gidx)));
    case("l2_normalize", vec![r.tensor_off_zero(&[a, b + 1])], Box::new(|t, v| t.l2_normalize(v[0])));
    cases
}

/// Contraction weights used with [`op_cases`].
pub fn contraction_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut r = CheckRng::new(seed.wrapping_mul(31).wrapping_add(7));
    (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
}

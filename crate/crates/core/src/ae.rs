//! Transformer autoencoder over weight-token sequences.
//!
//! The encoder maps each token to a latent code of width `embed_dim`; the
//! decoder mirrors it and maps codes back to tokens. A small MLP head on the
//! token-mean of the codes feeds the contrastive loss.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wsl_tensor::{Scalar, Tape, Tensor, Var};

use crate::arch::ArchitectureSpec;
use crate::container;
use crate::error::{config, contract, Result, WslError};
use crate::tokenizer::{detokenize_with, tokenize_with, TokenLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AEConfig {
    pub token_len: usize,
    pub embed_dim: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Precomputed behavior-preserving permutations per training sample.
    #[serde(default = "default_permutation_pool")]
    pub permutation_pool: usize,
    /// Epochs over which the structural weight β ramps from 1 down to its
    /// configured value; 0 applies the configured weights from the start.
    #[serde(default)]
    pub behavioral_warmup: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
}

fn default_d_ff() -> usize {
    128
}
fn default_proj_dim() -> usize {
    32
}
fn default_permutation_pool() -> usize {
    8
}

impl AEConfig {
    pub fn desk() -> Self {
        Self {
            token_len: 32,
            embed_dim: 8,
            d_model: 64,
            num_heads: 4,
            num_encoder_layers: 3,
            num_decoder_layers: 3,
            d_ff: default_d_ff(),
            proj_dim: default_proj_dim(),
            learning_rate: 1e-3,
            weight_decay: 3e-9,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            permutation_pool: default_permutation_pool(),
            behavioral_warmup: 40,
            grad_clip: 20.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            token_len: 289,
            embed_dim: 64,
            d_model: 256,
            num_heads: 8,
            num_encoder_layers: 8,
            num_decoder_layers: 8,
            d_ff: 1024,
            proj_dim: default_proj_dim(),
            learning_rate: 1e-4,
            weight_decay: 3e-9,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            permutation_pool: default_permutation_pool(),
            behavioral_warmup: 0,
            grad_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_len", self.token_len),
            ("embed_dim", self.embed_dim),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("d_ff", self.d_ff),
            ("proj_dim", self.proj_dim),
            ("batch_size", self.batch_size),
            ("permutation_pool", self.permutation_pool),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config(format!("{name} must be at least 1"));
        }
        if self.d_model % self.num_heads != 0 {
            return config(format!("d_model {} is not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.embed_dim >= self.token_len {
            return config(format!(
                "embed_dim {} must be smaller than token_len {} for a compressing autoencoder",
                self.embed_dim, self.token_len
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 || !(self.grad_clip >= 0.0) {
            return config("learning_rate must be positive, weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    pub fn compression_ratio(&self) -> f64 {
        self.token_len as f64 / self.embed_dim as f64
    }
}

/// Per-token latent codes of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    /// Row-major `[num_tokens, embed_dim]`.
    pub z: Vec<f32>,
    pub num_tokens: usize,
    pub embed_dim: usize,
    pub model_id: usize,
    pub epoch: usize,
}

impl LatentCode {
    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }

    /// Mean over tokens.
    pub fn center_of_gravity(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        for row in self.z.chunks(self.embed_dim) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v as f64);
        }
        out.iter_mut().for_each(|o| *o /= self.num_tokens as f64);
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1: NormIdx,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    ln2: NormIdx,
    ff1: LinearIdx,
    ff2: LinearIdx,
}

#[derive(Debug, Clone)]
struct StackIdx {
    input: LinearIdx,
    layer_emb: usize,
    slot_emb: usize,
    blocks: Vec<BlockIdx>,
    ln: NormIdx,
    output: LinearIdx,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    enc: StackIdx,
    dec: StackIdx,
    proj1: LinearIdx,
    proj2: LinearIdx,
}

/// Output projections start small so early reconstructions stay near zero
/// instead of producing very large weights.
const OUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    /// `FanIn` shrunk by a constant factor.
    Scaled(usize, f64),
    Normal(f64),
    Zero,
    One,
}

#[derive(Default)]
struct Registry {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> LinearIdx {
        LinearIdx {
            w: self.add(format!("{name}.w"), vec![d_out, d_in], Init::FanIn(d_in)),
            b: self.add(format!("{name}.b"), vec![d_out], Init::Zero),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.add(format!("{name}.g"), vec![d], Init::One),
            b: self.add(format!("{name}.b"), vec![d], Init::Zero),
        }
    }

    fn stack(&mut self, name: &str, cfg: &AEConfig, d_in: usize, d_out: usize, depth: usize, layers: usize, slots: usize) -> StackIdx {
        let d = cfg.d_model;
        let input = self.linear(&format!("{name}.in"), d, d_in);
        let layer_emb = self.add(format!("{name}.layer_emb"), vec![layers, d], Init::Normal(0.02));
        let slot_emb = self.add(format!("{name}.slot_emb"), vec![slots, d], Init::Normal(0.02));
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                BlockIdx {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    q: self.linear(&format!("{p}.q"), d, d),
                    k: self.linear(&format!("{p}.k"), d, d),
                    v: self.linear(&format!("{p}.v"), d, d),
                    o: self.linear(&format!("{p}.o"), d, d),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    ff1: self.linear(&format!("{p}.ff1"), cfg.d_ff, d),
                    ff2: self.linear(&format!("{p}.ff2"), d, cfg.d_ff),
                }
            })
            .collect();
        let ln = self.norm(&format!("{name}.ln"), d);
        let output = LinearIdx {
            w: self.add(format!("{name}.out.w"), vec![d_out, d], Init::Scaled(d, OUT_INIT_SCALE)),
            b: self.add(format!("{name}.out.b"), vec![d_out], Init::Zero),
        };
        StackIdx { input, layer_emb, slot_emb, blocks, ln, output }
    }
}

fn param_index(cfg: &AEConfig, layers: usize, slots: usize) -> (ParamIndex, Vec<(String, Vec<usize>, Init)>) {
    let mut r = Registry::default();
    let enc = r.stack("enc", cfg, cfg.token_len, cfg.embed_dim, cfg.num_encoder_layers, layers, slots);
    let dec = r.stack("dec", cfg, cfg.embed_dim, cfg.token_len, cfg.num_decoder_layers, layers, slots);
    let proj1 = r.linear("proj.1", cfg.d_model, cfg.embed_dim);
    let proj2 = r.linear("proj.2", cfg.proj_dim, cfg.d_model);
    (ParamIndex { enc, dec, proj1, proj2 }, r.specs)
}

/// Autoencoder parameters plus the token layout they were built for.
#[derive(Debug, Clone)]
pub struct HyperAe<T: Scalar> {
    pub config: AEConfig,
    pub arch: ArchitectureSpec,
    pub layout: TokenLayout,
    pub params: Vec<Tensor<T>>,
    pub names: Vec<String>,
    index: ParamIndex,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> HyperAe<T> {
    pub fn new(config: AEConfig, arch: &ArchitectureSpec) -> Result<Self> {
        config.validate()?;
        let layout = TokenLayout::new(arch, config.token_len)?;
        let (index, specs) = param_index(&config, layout.num_layers, layout.max_slots);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xAE_5EED);
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::FanIn(f) => {
                    let a = 1.0 / (f as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
                }
                Init::Scaled(f, s) => {
                    let a = s / (f as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::of(d.sample(&mut rng))).collect()
                }
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
            };
            params.push(Tensor::new(&shape, data)?.with_grad());
            names.push(name);
        }
        Ok(Self { config, arch: arch.clone(), layout, params, names, index })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.num_tokens()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    fn check_rows(&self, tape: &Tape<T>, x: Var, width: usize, batch: usize, what: &str) -> Result<()> {
        let want = [batch * self.num_tokens(), width];
        if tape.shape(x) != want {
            return contract(format!("{what} has shape {:?}, expected {want:?}", tape.shape(x)));
        }
        Ok(())
    }

    /// `[batch * num_tokens, token_len]` → `[batch * num_tokens, embed_dim]`.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, p: &[Var], tokens: Var, batch: usize) -> Result<Var> {
        self.check_rows(tape, tokens, self.config.token_len, batch, "token batch")?;
        self.run_stack(tape, p, &self.index.enc, tokens, batch)
    }

    /// `[batch * num_tokens, embed_dim]` → `[batch * num_tokens, token_len]`.
    pub fn decode_on_tape(&self, tape: &mut Tape<T>, p: &[Var], z: Var, batch: usize) -> Result<Var> {
        self.check_rows(tape, z, self.config.embed_dim, batch, "latent batch")?;
        self.run_stack(tape, p, &self.index.dec, z, batch)
    }

    /// Unit-norm projections `[batch, proj_dim]` of token-mean codes.
    pub fn project_on_tape(&self, tape: &mut Tape<T>, p: &[Var], z: Var, batch: usize) -> Result<Var> {
        self.check_rows(tape, z, self.config.embed_dim, batch, "latent batch")?;
        let z3 = tape.reshape(z, &[batch, self.num_tokens(), self.config.embed_dim])?;
        let pooled = tape.mean_axis(z3, 1)?;
        let h = linear(tape, p, self.index.proj1, pooled)?;
        let h = tape.relu(h);
        let out = linear(tape, p, self.index.proj2, h)?;
        Ok(tape.l2_normalize(out)?)
    }

    fn run_stack(&self, tape: &mut Tape<T>, p: &[Var], s: &StackIdx, x: Var, batch: usize) -> Result<Var> {
        let t = self.num_tokens();
        let layer_idx: Vec<usize> = (0..batch).flat_map(|_| self.layout.positions.iter().map(|q| q.0)).collect();
        let slot_idx: Vec<usize> = (0..batch).flat_map(|_| self.layout.positions.iter().map(|q| q.1)).collect();
        let mut h = linear(tape, p, s.input, x)?;
        let le = tape.embedding(p[s.layer_emb], &layer_idx)?;
        let se = tape.embedding(p[s.slot_emb], &slot_idx)?;
        h = tape.add(h, le)?;
        h = tape.add(h, se)?;
        for blk in &s.blocks {
            h = self.block(tape, p, blk, h, batch, t)?;
        }
        let h = tape.layernorm(h, p[s.ln.g], p[s.ln.b], LN_EPS)?;
        linear(tape, p, s.output, h)
    }

    fn block(&self, tape: &mut Tape<T>, p: &[Var], blk: &BlockIdx, x: Var, batch: usize, t: usize) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let h = tape.layernorm(x, p[blk.ln1.g], p[blk.ln1.b], LN_EPS)?;
        let split = |tape: &mut Tape<T>, idx: LinearIdx| -> Result<Var> {
            let y = linear(tape, p, idx, h)?;
            let y = tape.reshape(y, &[batch, t, heads, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[batch * heads, t, dh])?)
        };
        let q = split(tape, blk.q)?;
        let k = split(tape, blk.k)?;
        let v = split(tape, blk.v)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let att = tape.softmax(scores)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * t, d])?;
        let o = linear(tape, p, blk.o, ctx)?;
        let x = tape.add(x, o)?;
        let h2 = tape.layernorm(x, p[blk.ln2.g], p[blk.ln2.b], LN_EPS)?;
        let f = linear(tape, p, blk.ff1, h2)?;
        let f = tape.relu(f);
        let f = linear(tape, p, blk.ff2, f)?;
        Ok(tape.add(x, f)?)
    }

    /// Latent codes for `batch` token matrices laid out back to back.
    pub fn encode_batch(&self, tokens: &[T], batch: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(&[batch * self.num_tokens(), self.config.token_len], tokens.to_vec())?);
        let z = self.encode_on_tape(&mut tape, &p, x, batch)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn decode_batch(&self, z: &[T], batch: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::new(&[batch * self.num_tokens(), self.config.embed_dim], z.to_vec())?);
        let y = self.decode_on_tape(&mut tape, &p, zv, batch)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn project_batch(&self, z: &[T], batch: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::new(&[batch * self.num_tokens(), self.config.embed_dim], z.to_vec())?);
        let y = self.project_on_tape(&mut tape, &p, zv, batch)?;
        Ok(tape.value(y).to_vec())
    }

    fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Latent codes `[num_tokens, embed_dim]` of one parameter vector.
    pub fn encode_theta(&self, theta: &[T]) -> Result<Vec<T>> {
        let seq = tokenize_with(theta, &self.layout)?;
        self.encode_batch(&seq.tokens, 1)
    }

    /// Parameter vector decoded from one model's latent codes.
    pub fn decode_theta(&self, z: &[T]) -> Result<Vec<T>> {
        let tokens = self.decode_batch(z, 1)?;
        detokenize_with(&tokens, &self.layout)
    }

    /// `detokenize(decode(encode(tokenize(θ))))`.
    pub fn reconstruct(&self, theta: &[T]) -> Result<Vec<T>> {
        let z = self.encode_theta(theta)?;
        self.decode_theta(&z)
    }

    pub fn cast<U: Scalar>(&self) -> HyperAe<U> {
        HyperAe {
            config: self.config.clone(),
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|t| t.cast::<U>().with_grad()).collect(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &[Var], idx: LinearIdx, x: Var) -> Result<Var> {
    let y = tape.matmul_t(x, p[idx.w])?;
    Ok(tape.add(y, p[idx.b])?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AeMeta {
    kind: String,
    config: AEConfig,
    arch: ArchitectureSpec,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save_ae<T: Scalar>(path: &Path, ae: &HyperAe<T>) -> Result<()> {
    let meta = AeMeta {
        kind: "HAE".into(),
        config: ae.config.clone(),
        arch: ae.arch.clone(),
        params: ae.names.iter().cloned().zip(ae.params.iter().map(|t| t.shape().to_vec())).collect(),
    };
    let payload: Vec<f32> = ae.params.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64() as f32)).collect();
    container::write(path, &meta, &payload)
}

pub fn load_ae<T: Scalar>(path: &Path) -> Result<HyperAe<T>> {
    let (meta, payload): (AeMeta, Vec<f32>) = container::read(path)?;
    if meta.kind != "HAE" {
        return Err(WslError::Format(format!("{} holds a `{}` artifact, not an autoencoder", path.display(), meta.kind)));
    }
    let mut ae = HyperAe::<T>::new(meta.config, &meta.arch)?;
    let expected: Vec<(String, Vec<usize>)> = ae.names.iter().cloned().zip(ae.params.iter().map(|t| t.shape().to_vec())).collect();
    if expected != meta.params || payload.len() != ae.num_parameters() {
        return Err(WslError::Format(format!("{}: parameter table does not match its configuration", path.display())));
    }
    let mut off = 0;
    for t in &mut ae.params {
        let n = t.numel();
        t.data_mut().iter_mut().zip(&payload[off..off + n]).for_each(|(d, &s)| *d = T::of(s as f64));
        off += n;
    }
    Ok(ae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Layer;
    use crate::classifier::{build_model, InitScheme};
    use crate::tokenizer::{apply_permutation, sample_permutation};
    use wsl_tensor::fd::{central_gradient, max_relative_error, CheckRng};

    fn tiny_cfg() -> AEConfig {
        AEConfig { token_len: 8, embed_dim: 3, d_model: 8, num_heads: 2, num_encoder_layers: 1, num_decoder_layers: 1, d_ff: 8, proj_dim: 4, ..AEConfig::desk() }
    }

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec { input: [1, 2, 2], layers: vec![Layer::Flatten, Layer::Linear { d_in: 4, d_out: 3 }, Layer::Relu, Layer::Linear { d_in: 3, d_out: 2 }] }
    }

    #[test]
    fn config_validation() {
        assert!(AEConfig::desk().validate().is_ok());
        assert!(AEConfig::paper().validate().is_ok());
        assert_eq!(AEConfig::paper().embed_dim, 64);
        assert!((AEConfig::paper().compression_ratio() - 4.52).abs() < 0.01);
        let mut c = AEConfig::desk();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = AEConfig::desk();
        c.embed_dim = 32;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&AEConfig::desk()).unwrap().replace("\"seed\"", "\"sed\"");
        assert!(serde_json::from_str::<AEConfig>(&json).is_err());
    }

    #[test]
    fn shapes_of_codes_projections_and_reconstructions() {
        let arch = ArchitectureSpec::desk_default();
        let ae = HyperAe::<f32>::new(AEConfig::desk(), &arch).unwrap();
        let theta = build_model(&arch, InitScheme::Uniform, 0).unwrap();
        let z = ae.encode_theta(&theta).unwrap();
        assert_eq!(z.len(), 58 * 8);
        let proj = ae.project_batch(&z, 1).unwrap();
        assert_eq!(proj.len(), 32);
        assert!((proj.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-6);
        let back = ae.reconstruct(&theta).unwrap();
        assert_eq!(back.len(), theta.len());
        assert_eq!(ae.decode_batch(&z, 1).unwrap(), ae.decode_batch(&z, 1).unwrap());
        assert!(ae.encode_batch(&z, 1).is_err());
    }

    #[test]
    fn twelve_tokens_give_twelve_codes() {
        let arch = ArchitectureSpec { input: [1, 1, 11], layers: vec![Layer::Flatten, Layer::Linear { d_in: 11, d_out: 8 }] };
        let cfg = AEConfig { token_len: 8, embed_dim: 4, ..AEConfig::desk() };
        let ae = HyperAe::<f64>::new(cfg, &arch).unwrap();
        assert_eq!(ae.num_tokens(), 12);
        let z = ae.encode_theta(&vec![0.1; 96]).unwrap();
        assert_eq!(z.len(), 12 * 4);
    }

    #[test]
    fn permuted_view_gets_different_codes() {
        let arch = ArchitectureSpec::desk_default();
        let ae = HyperAe::<f32>::new(AEConfig::desk(), &arch).unwrap();
        let theta = build_model(&arch, InitScheme::KaimingNormal, 1).unwrap();
        let view = apply_permutation(&theta, &arch, &sample_permutation(&arch, 2)).unwrap();
        assert_ne!(ae.encode_theta(&theta).unwrap(), ae.encode_theta(&view).unwrap());
    }

    #[test]
    fn projection_ignores_token_order() {
        let ae = HyperAe::<f64>::new(tiny_cfg(), &tiny_arch()).unwrap();
        let t = ae.num_tokens();
        let mut r = CheckRng::new(4);
        let z: Vec<f64> = (0..t * 3).map(|_| r.uniform(-1.0, 1.0)).collect();
        let mut rev = Vec::new();
        for row in z.chunks(3).rev() {
            rev.extend_from_slice(row);
        }
        let a = ae.project_batch(&z, 1).unwrap();
        let b = ae.project_batch(&rev, 1).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn decoder_gradient_wrt_codes_matches_finite_differences() {
        let ae = HyperAe::<f64>::new(tiny_cfg(), &tiny_arch()).unwrap();
        let t = ae.num_tokens();
        let mut r = CheckRng::new(7);
        let z: Vec<f64> = (0..2 * t * 3).map(|_| r.uniform(-1.0, 1.0)).collect();
        let target: Vec<f64> = (0..2 * t * 8).map(|_| r.uniform(-1.0, 1.0)).collect();
        let loss = |tape: &mut Tape<f64>, zv: Var| -> Var {
            let p = ae.bind_frozen(tape);
            let y = ae.decode_on_tape(tape, &p, zv, 2).unwrap();
            let tv = tape.constant(Tensor::new(&[2 * t, 8], target.clone()).unwrap());
            let d = tape.sub(y, tv).unwrap();
            let s = tape.square(d).unwrap();
            tape.mean(s)
        };
        let mut tape = Tape::new();
        let zv = tape.variable(&[2 * t, 3], z.clone()).unwrap();
        let l = loss(&mut tape, zv);
        tape.backward(l).unwrap();
        let g = tape.grad(zv).unwrap().to_vec();
        let numeric = central_gradient(
            |x| {
                let mut tape = Tape::new();
                let zv = tape.constant(Tensor::new(&[2 * t, 3], x.to_vec()).unwrap());
                let l = loss(&mut tape, zv);
                tape.value(l)[0]
            },
            &z,
            1e-6,
        );
        assert!(max_relative_error(&g, &numeric, 1e-3) < 1e-4);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let ae = HyperAe::<f64>::new(tiny_cfg(), &tiny_arch()).unwrap();
        let t = ae.num_tokens();
        let mut r = CheckRng::new(9);
        let tokens: Vec<f64> = (0..2 * t * 8).map(|_| r.uniform(-1.0, 1.0)).collect();
        // full autoencoder pass plus projection, differentiated w.r.t. a few parameter tensors
        let run = |params: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let p: Vec<Var> = params.iter().map(|x| tape.leaf(x)).collect();
            let x = tape.constant(Tensor::new(&[2 * t, 8], tokens.clone()).unwrap());
            let z = ae.encode_on_tape(&mut tape, &p, x, 2).unwrap();
            let y = ae.decode_on_tape(&mut tape, &p, z, 2).unwrap();
            let pr = ae.project_on_tape(&mut tape, &p, z, 2).unwrap();
            let d = tape.sub(y, x).unwrap();
            let s = tape.square(d).unwrap();
            let l1 = tape.mean(s);
            let ps = tape.sum(pr);
            let l = tape.add(l1, ps).unwrap();
            let v = tape.value(l)[0];
            tape.backward(l).unwrap();
            (v, p.iter().map(|&pv| tape.grad(pv).map(|g| g.to_vec()).unwrap_or_default()).collect())
        };
        let (_, grads) = run(&ae.params);
        for (i, name) in ae.names.iter().enumerate() {
            if !(name.contains("block0.q") || name.contains("ff1.w") || name.contains("slot_emb") || name.contains("ln.g") || name.contains("proj.1.w") || name.ends_with("in.w")) {
                continue;
            }
            let base = ae.params[i].data().to_vec();
            let numeric = central_gradient(
                |x| {
                    let mut params = ae.params.clone();
                    params[i].data_mut().copy_from_slice(x);
                    run(&params).0
                },
                &base,
                1e-6,
            );
            let err = max_relative_error(&grads[i], &numeric, 1e-3);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn save_and_load_roundtrip() {
        let arch = ArchitectureSpec::desk_default();
        let ae = HyperAe::<f32>::new(AEConfig::desk(), &arch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.wzoo");
        save_ae(&path, &ae).unwrap();
        let back: HyperAe<f32> = load_ae(&path).unwrap();
        for (a, b) in ae.params.iter().zip(&back.params) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.config, ae.config);
    }
}

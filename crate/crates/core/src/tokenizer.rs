//! Weight tokenization and behavior-preserving unit permutations.
//!
//! Each parameterized layer's region of the flat vector (rows of fan-in
//! weights plus bias) is cut into `token_len` slices; tokens never span a
//! layer boundary and the last slice of each layer is zero-padded.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsl_tensor::{Scalar, Tape, Var};

use crate::arch::ArchitectureSpec;
use crate::error::{config, contract, Result};

/// Position labels and index maps shared by every model of one architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub token_len: usize,
    /// `(layer_index, slot_index)` per token.
    pub positions: Vec<(usize, usize)>,
    /// Number of non-padding scalars per token.
    pub valid: Vec<usize>,
    /// For parameter `i`, the flat index into the `[num_tokens, token_len]` matrix.
    pub gather: Vec<usize>,
    pub num_layers: usize,
    pub max_slots: usize,
}

impl TokenLayout {
    pub fn new(arch: &ArchitectureSpec, token_len: usize) -> Result<Self> {
        if token_len == 0 {
            return config("token_len must be at least 1");
        }
        arch.validate()?;
        let layers = arch.param_layers();
        let mut positions = Vec::new();
        let mut valid = Vec::new();
        let mut gather = Vec::with_capacity(arch.param_count());
        let mut max_slots = 0;
        for (li, pl) in layers.iter().enumerate() {
            let n = pl.len();
            let slots = n.div_ceil(token_len);
            max_slots = max_slots.max(slots);
            for s in 0..slots {
                let tok = positions.len();
                let count = token_len.min(n - s * token_len);
                positions.push((li, s));
                valid.push(count);
                gather.extend((0..count).map(|j| tok * token_len + j));
            }
        }
        Ok(Self { token_len, positions, valid, gather, num_layers: layers.len(), max_slots })
    }

    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn num_params(&self) -> usize {
        self.gather.len()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.0).collect()
    }

    pub fn slot_indices(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.1).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T = f32> {
    /// Row-major `[num_tokens, token_len]`.
    pub tokens: Vec<T>,
    pub token_len: usize,
    pub positions: Vec<(usize, usize)>,
    pub pad_mask: Vec<usize>,
}

impl<T> TokenSequence<T> {
    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }
}

pub fn tokenize<T: Scalar>(theta: &[T], arch: &ArchitectureSpec, token_len: usize) -> Result<TokenSequence<T>> {
    let layout = TokenLayout::new(arch, token_len)?;
    tokenize_with(theta, &layout)
}

pub fn tokenize_with<T: Scalar>(theta: &[T], layout: &TokenLayout) -> Result<TokenSequence<T>> {
    if theta.len() != layout.num_params() {
        return contract(format!("theta has {} parameters, layout expects {}", theta.len(), layout.num_params()));
    }
    let mut tokens = vec![T::zero(); layout.num_tokens() * layout.token_len];
    for (&dst, &v) in layout.gather.iter().zip(theta) {
        tokens[dst] = v;
    }
    Ok(TokenSequence {
        tokens,
        token_len: layout.token_len,
        positions: layout.positions.clone(),
        pad_mask: layout.valid.clone(),
    })
}

pub fn detokenize<T: Scalar>(seq: &TokenSequence<T>, arch: &ArchitectureSpec) -> Result<Vec<T>> {
    let layout = TokenLayout::new(arch, seq.token_len)?;
    detokenize_with(&seq.tokens, &layout)
}

/// Reads the valid region of a `[num_tokens, token_len]` matrix back into θ.
pub fn detokenize_with<T: Scalar>(tokens: &[T], layout: &TokenLayout) -> Result<Vec<T>> {
    if tokens.len() != layout.num_tokens() * layout.token_len {
        return contract(format!(
            "token matrix holds {} values, layout expects {} tokens of {}",
            tokens.len(),
            layout.num_tokens(),
            layout.token_len
        ));
    }
    Ok(layout.gather.iter().map(|&i| tokens[i]).collect())
}

/// Differentiable detokenization of model `index` inside a batched token
/// matrix `[batch * num_tokens, token_len]`. Padding receives zero gradient.
pub fn detokenize_on_tape<T: Scalar>(tape: &mut Tape<T>, tokens: Var, layout: &TokenLayout, index: usize) -> Result<Var> {
    let per_model = layout.num_tokens() * layout.token_len;
    let total: usize = tape.shape(tokens).iter().product();
    if total < (index + 1) * per_model || total % per_model != 0 {
        return contract(format!("token batch of {total} values cannot hold model {index} ({per_model} values each)"));
    }
    let offset = index * per_model;
    let idx: Vec<usize> = layout.gather.iter().map(|&i| i + offset).collect();
    Ok(tape.gather(tokens, &idx)?)
}

// ---------------------------------------------------------------- permutations

/// One unit permutation per hidden interface. Interface `i` reorders the
/// output units of parameterized layer `i` and the matching input blocks of
/// layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub perms: Vec<Vec<usize>>,
}

impl PermutationPlan {
    pub fn identity(arch: &ArchitectureSpec) -> Self {
        let layers = arch.param_layers();
        let perms = layers.iter().take(layers.len().saturating_sub(1)).map(|pl| (0..pl.rows).collect()).collect();
        Self { perms }
    }

    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(|p| p.iter().enumerate().all(|(i, &v)| i == v))
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (i, &v) in p.iter().enumerate() {
                    inv[v] = i;
                }
                inv
            })
            .collect();
        Self { perms }
    }
}

/// Draws a uniformly random permutation for each hidden interface.
pub fn sample_permutation(arch: &ArchitectureSpec, seed: u64) -> PermutationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_permutation_with(arch, &mut rng)
}

pub fn sample_permutation_with(arch: &ArchitectureSpec, rng: &mut impl Rng) -> PermutationPlan {
    let mut plan = PermutationPlan::identity(arch);
    if plan.perms.is_empty() {
        log::warn!("architecture has no hidden interface; returning the identity plan");
    }
    for p in &mut plan.perms {
        for i in (1..p.len()).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
    }
    plan
}

/// Applies `plan`: row `r` of layer `i` becomes old row `perm[r]`, and input
/// block `r` of layer `i + 1` becomes old block `perm[r]`.
pub fn apply_permutation<T: Scalar>(theta: &[T], arch: &ArchitectureSpec, plan: &PermutationPlan) -> Result<Vec<T>> {
    let layers = arch.param_layers();
    if theta.len() != arch.param_count() {
        return contract(format!("theta has {} parameters, architecture needs {}", theta.len(), arch.param_count()));
    }
    if plan.perms.len() != layers.len().saturating_sub(1) {
        return contract(format!("plan has {} interfaces, architecture has {}", plan.perms.len(), layers.len().saturating_sub(1)));
    }
    let mut out = theta.to_vec();
    for (i, perm) in plan.perms.iter().enumerate() {
        let cur = layers[i];
        let next = layers[i + 1];
        if perm.len() != cur.rows || next.fan_in % cur.rows != 0 {
            return contract(format!("interface {i}: permutation of {} does not fit {} units", perm.len(), cur.rows));
        }
        let src = out.clone();
        let rl = cur.row_len();
        for (r, &from) in perm.iter().enumerate() {
            out[cur.offset + r * rl..cur.offset + (r + 1) * rl]
                .copy_from_slice(&src[cur.offset + from * rl..cur.offset + (from + 1) * rl]);
        }
        let block = next.fan_in / cur.rows;
        let nl = next.row_len();
        for row in 0..next.rows {
            let base = next.offset + row * nl;
            for (r, &from) in perm.iter().enumerate() {
                out[base + r * block..base + (r + 1) * block]
                    .copy_from_slice(&src[base + from * block..base + (from + 1) * block]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Layer;
    use crate::classifier::{build_model, logits, InitScheme};
    use proptest::prelude::*;
    use wsl_tensor::fd::{central_gradient, max_relative_error, CheckRng};
    use wsl_tensor::Tensor;

    fn single_linear() -> ArchitectureSpec {
        ArchitectureSpec { input: [1, 1, 3], layers: vec![Layer::Flatten, Layer::Linear { d_in: 3, d_out: 2 }, Layer::Relu] }
    }

    #[test]
    fn eight_params_in_tokens_of_three() {
        let arch = single_linear();
        assert_eq!(arch.param_count(), 8);
        let theta: Vec<f32> = (1..=8).map(|v| v as f32).collect();
        let seq = tokenize(&theta, &arch, 3).unwrap();
        assert_eq!(seq.num_tokens(), 3);
        assert_eq!(seq.pad_mask, vec![3, 3, 2]);
        assert_eq!(&seq.tokens[6..], &[7.0, 8.0, 0.0]);
        assert_eq!(seq.positions, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn ten_params_in_tokens_of_four() {
        let arch = ArchitectureSpec { input: [1, 1, 4], layers: vec![Layer::Flatten, Layer::Linear { d_in: 4, d_out: 2 }] };
        assert_eq!(arch.param_count(), 10);
        let seq = tokenize(&vec![1.0f32; 10], &arch, 4).unwrap();
        assert_eq!(seq.num_tokens(), 3);
        assert_eq!(seq.pad_mask[2], 2);
        assert_eq!(&seq.tokens[10..], &[0.0, 0.0]);
    }

    #[test]
    fn tokens_do_not_span_layers() {
        let arch = ArchitectureSpec::desk_default();
        let layout = TokenLayout::new(&arch, 32).unwrap();
        // 80, 876, 784, 51 parameters per layer
        assert_eq!(layout.num_tokens(), 3 + 28 + 25 + 2);
        assert_eq!(layout.num_layers, 4);
        assert_eq!(layout.max_slots, 28);
    }

    #[test]
    fn paper_token_length_compression() {
        let ratio = 289.0 / 64.0;
        assert!((ratio - 4.52f64).abs() < 0.01);
        let layout = TokenLayout::new(&ArchitectureSpec::paper_cnn(), 289).unwrap();
        assert!(layout.num_tokens() > 0);
    }

    #[test]
    fn zero_token_len_is_rejected() {
        assert!(TokenLayout::new(&ArchitectureSpec::desk_default(), 0).is_err());
    }

    #[test]
    fn token_count_mismatch_is_contract_error() {
        let arch = ArchitectureSpec::desk_default();
        let layout = TokenLayout::new(&arch, 32).unwrap();
        assert!(detokenize_with(&[0.0f32; 10], &layout).is_err());
    }

    #[test]
    fn detokenize_gradient_scatters_and_ignores_padding() {
        let arch = ArchitectureSpec { input: [1, 1, 4], layers: vec![Layer::Flatten, Layer::Linear { d_in: 4, d_out: 2 }] };
        let layout = TokenLayout::new(&arch, 4).unwrap();
        let mut r = CheckRng::new(0);
        let tokens: Vec<f64> = (0..12).map(|_| r.uniform(-1.0, 1.0)).collect();
        let weights: Vec<f64> = (0..10).map(|_| r.uniform(-1.0, 1.0)).collect();
        // g(θ) = Σ w_i θ_i²
        let g = |tok: &[f64]| -> f64 {
            detokenize_with(tok, &layout).unwrap().iter().zip(&weights).map(|(t, w)| w * t * t).sum()
        };
        let mut tape = Tape::new();
        let tv = tape.variable(&[3, 4], tokens.clone()).unwrap();
        let th = detokenize_on_tape(&mut tape, tv, &layout, 0).unwrap();
        let sq = tape.square(th).unwrap();
        let wv = tape.constant(Tensor::from_vec(weights.clone()));
        let prod = tape.mul(sq, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(tv).unwrap().to_vec();
        let numeric = central_gradient(g, &tokens, 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-3) < 1e-4);
        assert_eq!(&analytic[10..], &[0.0, 0.0]);
    }

    #[test]
    fn identity_plan_changes_nothing() {
        let arch = ArchitectureSpec::desk_default();
        let theta = build_model(&arch, InitScheme::Normal, 0).unwrap();
        let plan = PermutationPlan::identity(&arch);
        assert!(plan.is_identity());
        assert_eq!(apply_permutation(&theta, &arch, &plan).unwrap(), theta);
    }

    #[test]
    fn permutation_preserves_logits() {
        let arch = ArchitectureSpec::desk_default();
        let theta = build_model(&arch, InitScheme::KaimingUniform, 5).unwrap();
        let mut r = CheckRng::new(8);
        let x: Vec<f32> = (0..256 * 256).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        let base = logits(&theta, &arch, &x).unwrap();
        for seed in 0..5 {
            let plan = sample_permutation(&arch, seed);
            assert!(!plan.is_identity());
            let permuted = apply_permutation(&theta, &arch, &plan).unwrap();
            assert_ne!(permuted, theta);
            let y = logits(&permuted, &arch, &x).unwrap();
            let dev = base.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(dev < 1e-5, "seed {seed}: {dev}");
        }
    }

    #[test]
    fn architecture_without_hidden_interface_gets_identity() {
        let arch = ArchitectureSpec { input: [1, 1, 4], layers: vec![Layer::Flatten, Layer::Linear { d_in: 4, d_out: 2 }] };
        let plan = sample_permutation(&arch, 3);
        assert!(plan.perms.is_empty());
        assert!(plan.is_identity());
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip_is_bit_exact(seed in 0u64..10_000, token_len in 1usize..40) {
            let arch = ArchitectureSpec::desk_default();
            let mut r = CheckRng::new(seed);
            let theta: Vec<f32> = (0..arch.param_count()).map(|_| r.uniform(-3.0, 3.0) as f32).collect();
            let seq = tokenize(&theta, &arch, token_len).unwrap();
            for (t, &v) in seq.tokens.chunks(token_len).zip(&seq.pad_mask) {
                prop_assert!(t[v..].iter().all(|x| *x == 0.0));
            }
            let back = detokenize(&seq, &arch).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn plan_then_inverse_restores_theta(seed in 0u64..10_000) {
            let arch = ArchitectureSpec::paper_cnn();
            let mut r = CheckRng::new(seed);
            let theta: Vec<f32> = (0..arch.param_count()).map(|_| r.uniform(-1.0, 1.0) as f32).collect();
            let plan = sample_permutation(&arch, seed);
            let there = apply_permutation(&theta, &arch, &plan).unwrap();
            prop_assert_eq!(apply_permutation(&there, &arch, &plan.inverse()).unwrap(), theta);
        }
    }
}

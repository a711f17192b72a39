//! Neural building blocks expressed as tape ops over registry parameters.
//!
//! Parameter naming: a layer rooted at `prefix` owns `{prefix}.w` / `{prefix}.b`
//! (linear), `{prefix}.g` / `{prefix}.b` (layer norm), and attention/MLP
//! sub-prefixes as created by the `init_*` functions below.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Init std for embeddings, positional tables and class tokens.
pub const INIT_STD: f64 = 0.02;

/// Init std of a `[d_in, d_out]` weight matrix: unit gain on unit-variance inputs.
pub fn fan_in_std(d_in: usize) -> f64 {
    1.0 / (d_in as f64).sqrt()
}

static DEGENERATE_COSINE: AtomicU64 = AtomicU64::new(0);

/// Number of [`cosine_sim`] calls that hit a zero-norm input so far.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINE.load(Ordering::Relaxed)
}

/// Cosine similarity of two vectors. A zero-norm input yields 0 and bumps
/// [`degenerate_cosine_count`].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", format!("{} vs {}", a.len(), b.len())));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        DEGENERATE_COSINE.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    store.init_normal(&format!("{prefix}.w"), &[d_in, d_out], fan_in_std(d_in), rng);
    store.init_const(&format!("{prefix}.b"), &[d_out], 0.0);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0);
    store.init_const(&format!("{prefix}.b"), &[d], 0.0);
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
}

/// Pre-norm transformer block: attention and a 4x QuickGELU MLP, both residual.
pub fn init_block(store: &mut ParamStore, prefix: &str, d: usize, mlp_ratio: usize, rng: &mut impl Rng) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.fc1"), d, d * mlp_ratio, rng);
    init_linear(store, &format!("{prefix}.fc2"), d * mlp_ratio, d, rng);
}

/// `prefix.suffix` without the formatting machinery; names are built on
/// every forward pass.
pub(crate) fn join(prefix: &str, suffix: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + 1 + suffix.len());
    s.push_str(prefix);
    s.push('.');
    s.push_str(suffix);
    s
}

pub fn linear(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&join(prefix, "w"))?;
    let b = tape.param(&join(prefix, "b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn layer_norm(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&join(prefix, "g"))?;
    let b = tape.param(&join(prefix, "b"))?;
    tape.layer_norm(x, g, b)
}

pub fn quick_gelu(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    tape.quick_gelu(x)
}

/// Multi-head attention of `query` rows over `context` rows.
///
/// `key_valid[j] == false` hides context row `j` from every query.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    query: Var,
    context: Var,
    prefix: &str,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let (_, d) = tape.value(query).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model dimension {d}")));
    }
    let head_dim = d / heads;
    let q = linear(tape, query, &join(prefix, "q"))?;
    let k = linear(tape, context, &join(prefix, "k"))?;
    let v = linear(tape, context, &join(prefix, "v"))?;
    // softmax(q kᵀ / sqrt(dh)) is a softmax at temperature sqrt(dh)
    let tau = (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let attn = tape.softmax_rows_masked(scores, tau, key_valid)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, merged, &join(prefix, "o"))
}

/// Pre-norm transformer block over `x` with optional key padding mask.
pub fn transformer_block(
    tape: &mut Tape<'_>,
    x: Var,
    prefix: &str,
    heads: usize,
    dropout: f64,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let h = layer_norm(tape, x, &join(prefix, "ln1"))?;
    let a = multi_head_attention(tape, h, h, &join(prefix, "attn"), heads, key_valid)?;
    let a = tape.dropout(a, dropout)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, &join(prefix, "ln2"))?;
    let h = linear(tape, h, &join(prefix, "fc1"))?;
    let h = tape.quick_gelu(h)?;
    let h = linear(tape, h, &join(prefix, "fc2"))?;
    let h = tape.dropout(h, dropout)?;
    tape.add(x, h)
}

/// Constant matrix helper used by tests and encoders.
pub fn constant_rows(tape: &mut Tape<'_>, rows: &[Vec<f64>]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_rows(rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        let x = [0.3, -1.2, 4.0];
        assert!((cosine_sim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_cosine_is_zero_and_counted() {
        let before = degenerate_cosine_count();
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(degenerate_cosine_count() > before);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_attention(&mut store, "a", 6, &mut rng);
        let mut tape = Tape::with_params(&store, Trainable::All);
        let x = tape.constant(Tensor::zeros(vec![2, 6]));
        let err = multi_head_attention(&mut tape, x, x, "a", 4, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn uniform_attention_averages_values() {
        // Q = K = 0 gives uniform weights, so each output row is the mean of V.
        let d = 3;
        let mut store = ParamStore::new();
        for part in ["q", "k"] {
            store.insert(format!("a.{part}.w"), Tensor::zeros(vec![d, d]));
            store.insert(format!("a.{part}.b"), Tensor::zeros(vec![d]));
        }
        for part in ["v", "o"] {
            store.insert(format!("a.{part}.w"), Tensor::identity(d));
            store.insert(format!("a.{part}.b"), Tensor::zeros(vec![d]));
        }
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let x = tape.constant(Tensor::identity(d));
        let out = multi_head_attention(&mut tape, x, x, "a", 1, None).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_keys_are_ignored() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_attention(&mut store, "a", d, &mut rng);
        let rows = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.0, 0.5, 1.0], vec![9.0, 9.0, -9.0, 2.0]];
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let x = constant_rows(&mut tape, &rows).unwrap();
        let masked = multi_head_attention(&mut tape, x, x, "a", 2, Some(&[true, true, false])).unwrap();
        let x2 = constant_rows(&mut tape, &rows[..2]).unwrap();
        let trimmed = multi_head_attention(&mut tape, x2, x2, "a", 2, None).unwrap();
        let (a, b) = (tape.value(masked).data(), tape.value(trimmed).data());
        for (u, v) in a[..8].iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

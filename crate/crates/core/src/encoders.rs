//! Patch-transformer image encoder and token-transformer text encoder.
//!
//! The image encoder has a single parameter set under `image.`; encoding an
//! RGB and a thermal image pulls the same registry entries onto the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{fan_in_std, init_block, init_layer_norm, layer_norm, transformer_block, INIT_STD};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::text::PAD;

pub const IMAGE: &str = "image";
pub const TEXT: &str = "text";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig { height: 32, width: 16, channels: 3, patch: 8, dim: 64, layers: 2, heads: 4, mlp_ratio: 4, dropout: 0.1 }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch size {} must divide the image extents {}x{}",
                self.patch, self.height, self.width
            )));
        }
        check_common(self.dim, self.heads, self.dropout, self.mlp_ratio)
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    /// Filled in from the training vocabulary when zero.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { vocab_size: 0, max_len: 77, dim: 64, layers: 2, heads: 4, mlp_ratio: 4, dropout: 0.1 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= PAD as usize + 4 {
            return Err(Error::Config(format!("vocabulary of {} entries is too small", self.vocab_size)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        check_common(self.dim, self.heads, self.dropout, self.mlp_ratio)
    }
}

fn check_common(dim: usize, heads: usize, dropout: f64, mlp_ratio: usize) -> Result<()> {
    if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide model dimension {dim}")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
    }
    if mlp_ratio == 0 {
        return Err(Error::Config("mlp_ratio must be positive".into()));
    }
    Ok(())
}

pub fn init_image_encoder(store: &mut ParamStore, cfg: &ImageEncoderConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    crate::numerics::nn::init_linear(store, "image.patch", cfg.patch_dim(), d, rng);
    store.init_normal("image.cls", &[1, d], INIT_STD, rng);
    store.init_normal("image.pos", &[cfg.num_tokens(), d], INIT_STD, rng);
    for l in 0..cfg.layers {
        init_block(store, &format!("image.blocks.{l}"), d, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "image.ln_post", d);
    store.init_normal("image.proj", &[d, d], fan_in_std(d), rng);
}

pub fn init_text_encoder(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    store.init_normal("text.tok", &[cfg.vocab_size, d], INIT_STD, rng);
    store.init_normal("text.pos", &[cfg.max_len, d], INIT_STD, rng);
    for l in 0..cfg.layers {
        init_block(store, &format!("text.blocks.{l}"), d, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "text.ln_post", d);
    store.init_normal("text.proj", &[d, d], fan_in_std(d), rng);
}

const STANDARDIZE_FLOOR: f64 = 1e-6;

/// Shifts and scales the whole image to zero mean and unit variance, so a
/// uniformly dimmed image encodes like its well-lit version. Flat images map
/// to zeros.
pub fn standardize(img: &Tensor) -> Tensor {
    let x = img.data();
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STANDARDIZE_FLOOR);
    img.map(|v| (v - mean) / std)
}

/// Splits a `[C, H, W]` image into row-major patches, each flattened channel-major.
pub fn patchify(img: &Tensor, cfg: &ImageEncoderConfig) -> Result<Tensor> {
    let want = [cfg.channels, cfg.height, cfg.width];
    if img.shape() != want {
        return Err(Error::Config(format!("image shape {:?} does not match encoder {:?}", img.shape(), want)));
    }
    let (p, h, w) = (cfg.patch, cfg.height, cfg.width);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * cfg.patch_dim());
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..cfg.channels {
                for r in 0..p {
                    let base = c * h * w + (pr * p + r) * w + pc * p;
                    out.extend_from_slice(&img.data()[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cfg.patch_dim()], out)
}

/// Token outputs `[n_patches + 1, d]` (row 0 is the class token) and the
/// projected global feature `[1, d]`.
pub fn encode_image(tape: &mut Tape<'_>, img: &Tensor, cfg: &ImageEncoderConfig) -> Result<(Var, Var)> {
    let patches = tape.constant(patchify(&standardize(img), cfg)?);
    let x = crate::numerics::nn::linear(tape, patches, "image.patch")?;
    let cls = tape.param("image.cls")?;
    let x = tape.concat_rows(&[cls, x])?;
    let pos = tape.param("image.pos")?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.layers {
        x = transformer_block(tape, x, &format!("image.blocks.{l}"), cfg.heads, cfg.dropout, None)?;
    }
    let tokens = layer_norm(tape, x, "image.ln_post")?;
    let global = project_first(tape, tokens, "image.proj")?;
    Ok((tokens, global))
}

/// Row 0 of `tokens` times the projection `name`.
pub fn project_first(tape: &mut Tape<'_>, tokens: Var, name: &str) -> Result<Var> {
    let first = tape.slice_rows(tokens, 0, 1)?;
    let proj = tape.param(name)?;
    tape.matmul(first, proj)
}

/// Number of leading non-PAD ids.
pub fn content_len(tokens: &[u32]) -> usize {
    tokens.iter().position(|&t| t == PAD).unwrap_or(tokens.len())
}

/// Token outputs for the non-PAD prefix `[len, d]` and the projected class
/// token `[1, d]`.
///
/// PAD keys are masked from attention, so PAD rows never influence non-PAD
/// rows; the PAD rows themselves are not computed. [`encode_text_padded`]
/// produces the full-length form.
pub fn encode_text(tape: &mut Tape<'_>, tokens: &[u32], cfg: &TextEncoderConfig) -> Result<(Var, Var)> {
    let n = content_len(tokens);
    encode_text_rows(tape, tokens, n, None, cfg)
}

/// Full `max_len` encoding with PAD keys masked.
pub fn encode_text_padded(tape: &mut Tape<'_>, tokens: &[u32], cfg: &TextEncoderConfig) -> Result<(Var, Var)> {
    let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
    encode_text_rows(tape, tokens, tokens.len(), Some(&valid), cfg)
}

fn encode_text_rows(
    tape: &mut Tape<'_>,
    tokens: &[u32],
    rows: usize,
    key_valid: Option<&[bool]>,
    cfg: &TextEncoderConfig,
) -> Result<(Var, Var)> {
    if tokens.len() != cfg.max_len {
        return Err(Error::Config(format!("token sequence of length {} but max_len is {}", tokens.len(), cfg.max_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of size {}", cfg.vocab_size)));
    }
    if rows == 0 {
        return Err(Error::Data("token sequence has no content".into()));
    }
    let ids: Vec<usize> = tokens[..rows].iter().map(|&t| t as usize).collect();
    let table = tape.param("text.tok")?;
    let x = tape.gather_rows(table, &ids)?;
    let pos = tape.param("text.pos")?;
    let pos = tape.slice_rows(pos, 0, rows)?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.layers {
        x = transformer_block(tape, x, &format!("text.blocks.{l}"), cfg.heads, cfg.dropout, key_valid)?;
    }
    let tokens_out = layer_norm(tape, x, "text.ln_post")?;
    let global = project_first(tape, tokens_out, "text.proj")?;
    Ok((tokens_out, global))
}

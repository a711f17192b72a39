//! The full alignment model: parameter layout, per-batch objective and
//! inference features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_image, encode_text, init_image_encoder, init_text_encoder, project_first, ImageEncoderConfig, TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_atf, init_cat, AtfConfig, FusionKind};
use crate::losses::{
    ar_loss, bia_loss, init_interaction, init_recover_head, interact, masked_ce, masked_cosine, reconstruction_loss,
    recover_head, sdm_loss, total_loss, uib_loss, Branch, InteractionConfig, LossBreakdown, LossConfig, LossKind,
};
use crate::numerics::{ParamStore, Tape, Tensor, Trainable, Var};
use crate::text::{branch_source, MaskedVariant, TokenizedCaption};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub interaction: InteractionConfig,
    pub atf: AtfConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.dim != self.text.dim {
            return Err(Error::Config(format!(
                "image dim {} and text dim {} must agree",
                self.image.dim, self.text.dim
            )));
        }
        let d = self.text.dim;
        if self.interaction.heads == 0 || !d.is_multiple_of(self.interaction.heads) {
            return Err(Error::Config(format!("{} interaction heads do not divide {d}", self.interaction.heads)));
        }
        if !(0.0..1.0).contains(&self.interaction.dropout) || !(0.0..1.0).contains(&self.atf.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.text.dim
    }

    /// Small configuration used by gradient checks.
    pub fn tiny(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            image: ImageEncoderConfig { height: 4, width: 4, channels: 3, patch: 2, dim: 4, layers: 1, heads: 2, mlp_ratio: 1, dropout: 0.0 },
            text: TextEncoderConfig { vocab_size, max_len, dim: 4, layers: 1, heads: 2, mlp_ratio: 1, dropout: 0.0 },
            interaction: InteractionConfig { heads: 2, layers: 1, mlp_ratio: 1, dropout: 0.0, per_branch: false },
            atf: AtfConfig { dropout: 0.0, ..AtfConfig::default() },
        }
    }
}

/// Parameters of every component, including both fusion variants, so that
/// one registry layout serves all fusion kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim();
        init_image_encoder(&mut params, &config.image, &mut rng);
        init_text_encoder(&mut params, &config.text, &mut rng);
        init_interaction(&mut params, d, &config.interaction, &mut rng);
        init_recover_head(&mut params, d, config.text.vocab_size, &mut rng);
        init_cat(&mut params, d, &mut rng);
        init_atf(&mut params, d, &config.atf, &mut rng);
        Ok(Model { config, params })
    }
}

/// One training example: an image pair, one caption of the same identity,
/// its color-erased form and the three masked variants (L1, L2, L3).
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub identity_id: usize,
    pub rgb: &'a Tensor,
    pub thermal: &'a Tensor,
    pub caption: &'a TokenizedCaption,
    pub erased: &'a TokenizedCaption,
    pub variants: [MaskedVariant; 3],
}

/// Gradient-free targets of one example, computed in evaluation mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenTargets {
    /// Token outputs of the complete source text of branch 1.
    pub e1: Option<Tensor>,
    /// Token outputs of the complete source text of branch 3.
    pub e3: Option<Tensor>,
    /// Global feature of the branch-3 variant.
    pub l3_global: Option<Tensor>,
}

pub fn frozen_targets(store: &ParamStore, cfg: &ModelConfig, losses: &LossConfig, ex: &Example<'_>) -> Result<FrozenTargets> {
    let mut tape = Tape::with_params(store, Trainable::Nothing);
    let mut out = FrozenTargets::default();
    if losses.enabled(LossKind::Crs) {
        let src = branch_source(ex.variants[0].kind, ex.caption, ex.erased);
        let (tok, _) = encode_text(&mut tape, &src.tokens, &cfg.text)?;
        out.e1 = Some(tape.value(tok).clone());
    }
    if losses.enabled(LossKind::Cus) {
        let src = branch_source(ex.variants[2].kind, ex.caption, ex.erased);
        let (tok, _) = encode_text(&mut tape, &src.tokens, &cfg.text)?;
        out.e3 = Some(tape.value(tok).clone());
    }
    if losses.enabled(LossKind::Uib) {
        let (_, g) = encode_text(&mut tape, &ex.variants[2].tokens, &cfg.text)?;
        out.l3_global = Some(tape.value(g).clone());
    }
    Ok(out)
}

/// Token and global features of one example. Entries are `None` when no
/// enabled loss consumes them.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmbeddingBundle {
    pub v: Option<Var>,
    pub t: Option<Var>,
    pub f: Option<Var>,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l3: Option<Var>,
    pub v_global: Option<Var>,
    pub t_global: Option<Var>,
    pub f_global: Option<Var>,
    pub l1_global: Option<Var>,
    pub l2_global: Option<Var>,
}

pub fn embed_example(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    fusion: FusionKind,
    losses: &LossConfig,
    ex: &Example<'_>,
) -> Result<EmbeddingBundle> {
    let on = |k: LossKind| losses.enabled(k);
    let need_f = on(LossKind::Sdm) || on(LossKind::Ar);
    let need_v = need_f || on(LossKind::Bia) || on(LossKind::Crs);
    let need_t = need_f || on(LossKind::Uib) || on(LossKind::Cus);
    let mut b = EmbeddingBundle::default();
    if need_v {
        let (v, vc) = encode_image(tape, ex.rgb, &cfg.image)?;
        b.v = Some(v);
        b.v_global = Some(vc);
    }
    if need_t {
        let (t, tc) = encode_image(tape, ex.thermal, &cfg.image)?;
        b.t = Some(t);
        b.t_global = Some(tc);
    }
    if need_f {
        let f = fuse(tape, fusion, b.v.unwrap(), b.t.unwrap(), &cfg.atf)?;
        b.f = Some(f);
        b.f_global = Some(project_first(tape, f, "image.proj")?);
    }
    if on(LossKind::Bia) || on(LossKind::Crs) {
        let (l, lc) = encode_text(tape, &ex.variants[0].tokens, &cfg.text)?;
        b.l1 = Some(l);
        b.l1_global = Some(lc);
    }
    if need_f {
        let (l, lc) = encode_text(tape, &ex.variants[1].tokens, &cfg.text)?;
        b.l2 = Some(l);
        b.l2_global = Some(lc);
    }
    if on(LossKind::Cus) {
        let (l, _) = encode_text(tape, &ex.variants[2].tokens, &cfg.text)?;
        b.l3 = Some(l);
    }
    Ok(b)
}

fn stack(tape: &mut Tape<'_>, rows: Vec<Var>) -> Result<Var> {
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// Total objective of a batch with every enabled loss term.
pub fn batch_objective(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    fusion: FusionKind,
    losses: &LossConfig,
    batch: &[Example<'_>],
    targets: &[FrozenTargets],
) -> Result<(Var, LossBreakdown)> {
    let (terms, empty) = batch_loss_terms(tape, cfg, fusion, losses, batch, targets)?;
    let (total, mut breakdown) = total_loss(tape, &terms, losses)?;
    breakdown.empty_masks = empty;
    Ok((total, breakdown))
}

/// Unweighted enabled loss terms of a batch, plus the count of samples
/// with an empty mask per token-level term.
#[allow(clippy::type_complexity)]
pub fn batch_loss_terms(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    fusion: FusionKind,
    losses: &LossConfig,
    batch: &[Example<'_>],
    targets: &[FrozenTargets],
) -> Result<(Vec<(LossKind, Var)>, Vec<(LossKind, usize)>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if targets.len() != batch.len() {
        return Err(Error::shape("batch_objective", format!("{} targets for {} examples", targets.len(), batch.len())));
    }
    losses.validate()?;
    let ids: Vec<usize> = batch.iter().map(|e| e.identity_id).collect();
    let bundles = batch
        .iter()
        .map(|ex| embed_example(tape, cfg, fusion, losses, ex))
        .collect::<Result<Vec<_>>>()?;
    let on = |k: LossKind| losses.enabled(k);
    let negatives = losses.exclude_same_identity.then_some(ids.as_slice());
    let mut terms = Vec::new();
    let mut empty = Vec::new();

    if on(LossKind::Sdm) {
        let f = stack(tape, bundles.iter().map(|b| b.f_global.unwrap()).collect())?;
        let l = stack(tape, bundles.iter().map(|b| b.l2_global.unwrap()).collect())?;
        terms.push((LossKind::Sdm, sdm_loss(tape, f, l, &ids, losses.tau1, losses.eps)?));
    }
    if on(LossKind::Ar) {
        let mut per = Vec::with_capacity(batch.len());
        for (b, ex) in bundles.iter().zip(batch) {
            let var = &ex.variants[1];
            if var.positions.is_empty() {
                per.push(None);
                continue;
            }
            let r = interact(tape, b.l2.unwrap(), b.f.unwrap(), &cfg.interaction, Branch::Ar)?;
            let logits = recover_head(tape, r)?;
            per.push(masked_ce(tape, logits, &var.positions, &var.targets)?);
        }
        let (l, missing) = ar_loss(tape, &per)?;
        terms.push((LossKind::Ar, l));
        empty.push((LossKind::Ar, missing));
    }
    if on(LossKind::Bia) {
        let v = stack(tape, bundles.iter().map(|b| b.v_global.unwrap()).collect())?;
        let l = stack(tape, bundles.iter().map(|b| b.l1_global.unwrap()).collect())?;
        terms.push((LossKind::Bia, bia_loss(tape, v, l, losses.tau2, negatives)?));
    }
    if on(LossKind::Crs) {
        let mut per = Vec::with_capacity(batch.len());
        for ((b, ex), tg) in bundles.iter().zip(batch).zip(targets) {
            let e = tg.e1.as_ref().ok_or_else(|| Error::Contract("missing branch-1 reconstruction target".into()))?;
            per.push(reconstruct(tape, cfg, b.l1.unwrap(), b.v.unwrap(), e, &ex.variants[0], Branch::Crs)?);
        }
        let (l, missing) = reconstruction_loss(tape, &per)?;
        terms.push((LossKind::Crs, l));
        empty.push((LossKind::Crs, missing));
    }
    if on(LossKind::Uib) {
        let t = stack(tape, bundles.iter().map(|b| b.t_global.unwrap()).collect())?;
        let mut rows = Vec::with_capacity(batch.len());
        for tg in targets {
            let g = tg.l3_global.as_ref().ok_or_else(|| Error::Contract("missing binding target".into()))?;
            rows.push(tape.constant(g.clone()));
        }
        let l3 = stack(tape, rows)?;
        terms.push((LossKind::Uib, uib_loss(tape, t, l3, losses.tau2, negatives)?));
    }
    if on(LossKind::Cus) {
        let mut per = Vec::with_capacity(batch.len());
        for ((b, ex), tg) in bundles.iter().zip(batch).zip(targets) {
            let e = tg.e3.as_ref().ok_or_else(|| Error::Contract("missing branch-3 reconstruction target".into()))?;
            per.push(reconstruct(tape, cfg, b.l3.unwrap(), b.t.unwrap(), e, &ex.variants[2], Branch::Cus)?);
        }
        let (l, missing) = reconstruction_loss(tape, &per)?;
        terms.push((LossKind::Cus, l));
        empty.push((LossKind::Cus, missing));
    }
    Ok((terms, empty))
}

fn reconstruct(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    query: Var,
    visual: Var,
    target: &Tensor,
    variant: &MaskedVariant,
    branch: Branch,
) -> Result<Option<Var>> {
    if variant.positions.is_empty() {
        return Ok(None);
    }
    let r = interact(tape, query, visual, &cfg.interaction, branch)?;
    let e = tape.constant(target.clone());
    masked_cosine(tape, r, e, &variant.positions)
}

/// Evaluation-mode fused global feature of an image pair.
pub fn gallery_feature(store: &ParamStore, cfg: &ModelConfig, fusion: FusionKind, rgb: &Tensor, thermal: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(store, Trainable::Nothing);
    let (v, _) = encode_image(&mut tape, rgb, &cfg.image)?;
    let (t, _) = encode_image(&mut tape, thermal, &cfg.image)?;
    let f = fuse(&mut tape, fusion, v, t, &cfg.atf)?;
    let g = project_first(&mut tape, f, "image.proj")?;
    tape.check_finite()?;
    Ok(tape.value(g).data().to_vec())
}

/// Evaluation-mode global feature of a single image (RGB or thermal).
pub fn image_feature(store: &ParamStore, cfg: &ModelConfig, img: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(store, Trainable::Nothing);
    let (_, g) = encode_image(&mut tape, img, &cfg.image)?;
    Ok(tape.value(g).data().to_vec())
}

/// Evaluation-mode global feature of a token sequence.
pub fn text_feature(store: &ParamStore, cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(store, Trainable::Nothing);
    let (_, g) = encode_text(&mut tape, tokens, &cfg.text)?;
    tape.check_finite()?;
    Ok(tape.value(g).data().to_vec())
}

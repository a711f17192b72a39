//! Alignment objectives, the cross-modal interaction module and the
//! recover head.
//!
//! Every loss is built on a tape from already-encoded features so the same
//! code serves training, gradient checks and analytic tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{init_attention, init_block, init_layer_norm, init_linear, join, layer_norm, linear, multi_head_attention, transformer_block};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const SDM_TAU: f64 = 0.07;
pub const INFONCE_TAU: f64 = 0.02;
pub const SDM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sdm,
    Ar,
    Bia,
    Crs,
    Uib,
    Cus,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [LossKind::Sdm, LossKind::Ar, LossKind::Bia, LossKind::Crs, LossKind::Uib, LossKind::Cus];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sdm => "sdm",
            LossKind::Ar => "ar",
            LossKind::Bia => "bia",
            LossKind::Crs => "crs",
            LossKind::Uib => "uib",
            LossKind::Cus => "cus",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSwitch {
    pub enabled: bool,
    pub weight: f64,
}

impl Default for LossSwitch {
    fn default() -> Self {
        LossSwitch { enabled: true, weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub eps: f64,
    /// Leave same-identity pairs out of the BIA and UIB normalizers.
    pub exclude_same_identity: bool,
    pub sdm: LossSwitch,
    pub ar: LossSwitch,
    pub bia: LossSwitch,
    pub crs: LossSwitch,
    pub uib: LossSwitch,
    pub cus: LossSwitch,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau1: SDM_TAU,
            tau2: INFONCE_TAU,
            eps: SDM_EPS,
            exclude_same_identity: true,
            sdm: LossSwitch::default(),
            ar: LossSwitch::default(),
            bia: LossSwitch::default(),
            crs: LossSwitch::default(),
            uib: LossSwitch::default(),
            cus: LossSwitch::default(),
        }
    }
}

impl LossConfig {
    pub fn switch(&self, kind: LossKind) -> &LossSwitch {
        match kind {
            LossKind::Sdm => &self.sdm,
            LossKind::Ar => &self.ar,
            LossKind::Bia => &self.bia,
            LossKind::Crs => &self.crs,
            LossKind::Uib => &self.uib,
            LossKind::Cus => &self.cus,
        }
    }

    pub fn switch_mut(&mut self, kind: LossKind) -> &mut LossSwitch {
        match kind {
            LossKind::Sdm => &mut self.sdm,
            LossKind::Ar => &mut self.ar,
            LossKind::Bia => &mut self.bia,
            LossKind::Crs => &mut self.crs,
            LossKind::Uib => &mut self.uib,
            LossKind::Cus => &mut self.cus,
        }
    }

    pub fn enabled(&self, kind: LossKind) -> bool {
        self.switch(kind).enabled
    }

    /// Enables exactly the listed losses.
    pub fn only(kinds: &[LossKind]) -> Self {
        let mut cfg = LossConfig::default();
        for k in LossKind::ALL {
            cfg.switch_mut(k).enabled = kinds.contains(&k);
        }
        cfg
    }

    pub fn enabled_kinds(&self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|&k| self.enabled(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.enabled_kinds().is_empty() {
            return Err(Error::Config("every loss is disabled".into()));
        }
        for k in LossKind::ALL {
            if !self.switch(k).weight.is_finite() {
                return Err(Error::Config(format!("weight of {} is not finite", k.name())));
            }
        }
        Ok(())
    }
}

// ----- ground truth -------------------------------------------------------

/// `q[i][j] = 1[id_i == id_j] / #{k : id_k == id_i}`.
pub fn match_targets(ids: &[usize]) -> Tensor {
    let n = ids.len();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        let count = ids.iter().filter(|&&x| x == ids[i]).count() as f64;
        for j in 0..n {
            if ids[i] == ids[j] {
                q[i * n + j] = 1.0 / count;
            }
        }
    }
    Tensor::new(vec![n, n], q).expect("square")
}

// ----- global objectives --------------------------------------------------

fn batch_rows(tape: &Tape<'_>, a: Var, b: Var, op: &'static str) -> Result<usize> {
    let (na, da) = tape.value(a).dims2()?;
    let (nb, db) = tape.value(b).dims2()?;
    if na != nb || da != db || na == 0 {
        return Err(Error::shape(op, format!("[{na},{da}] vs [{nb},{db}]")));
    }
    Ok(na)
}

/// `(1/N) Σ_ij p_ij (log p_ij − log(q_ij + ε))` with `p = softmax(sim / τ)`.
fn kl_rows(tape: &mut Tape<'_>, sim: Var, q: &Tensor, tau: f64, eps: f64) -> Result<Var> {
    let n = q.shape()[0];
    let p = tape.softmax_rows(sim, tau)?;
    let log_p = tape.log_softmax_rows(sim, tau)?;
    let log_q = q.map(|v| -(v + eps).ln());
    let ratio = tape.add_const(log_p, &log_q)?;
    let terms = tape.mul(p, ratio)?;
    let s = tape.sum(terms)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Similarity distribution matching between fused and text globals.
pub fn sdm_loss(tape: &mut Tape<'_>, fused: Var, text: Var, ids: &[usize], tau: f64, eps: f64) -> Result<Var> {
    let n = batch_rows(tape, fused, text, "sdm_loss")?;
    if ids.len() != n {
        return Err(Error::shape("sdm_loss", format!("{} ids for {n} rows", ids.len())));
    }
    let q = match_targets(ids);
    let f2t = tape.cosine_matrix(fused, text)?;
    let t2f = tape.cosine_matrix(text, fused)?;
    let a = kl_rows(tape, f2t, &q, tau, eps)?;
    let b = kl_rows(tape, t2f, &q, tau, eps)?;
    tape.add(a, b)
}

/// Logit offset that removes an entry from a softmax row.
const EXCLUDED: f64 = -1e4;

/// `−(1/N) Σ_i log softmax(sim(a_i, b_·) / τ)_i`.
///
/// With `ids`, off-diagonal entries of the same identity are left out of
/// each row's normalizer instead of acting as negatives.
pub fn info_nce(tape: &mut Tape<'_>, a: Var, b: Var, tau: f64, ids: Option<&[usize]>) -> Result<Var> {
    let n = batch_rows(tape, a, b, "info_nce")?;
    let mut sim = tape.cosine_matrix(a, b)?;
    if let Some(ids) = ids {
        if ids.len() != n {
            return Err(Error::shape("info_nce", format!("{} ids for {n} rows", ids.len())));
        }
        let offset: Vec<f64> = (0..n * n)
            .map(|k| if k / n != k % n && ids[k / n] == ids[k % n] { EXCLUDED } else { 0.0 })
            .collect();
        sim = tape.add_const(sim, &Tensor::new(vec![n, n], offset)?)?;
    }
    let ls = tape.log_softmax_rows(sim, tau)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let d = tape.pick(ls, &diag)?;
    let s = tape.sum(d)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Bidirectional instance alignment between RGB and color-retaining text.
pub fn bia_loss(tape: &mut Tape<'_>, rgb: Var, text: Var, tau: f64, ids: Option<&[usize]>) -> Result<Var> {
    let a = info_nce(tape, rgb, text, tau, ids)?;
    let b = info_nce(tape, text, rgb, tau, ids)?;
    tape.add(a, b)
}

/// Unidirectional binding of thermal globals to frozen color-erased text.
pub fn uib_loss(tape: &mut Tape<'_>, thermal: Var, frozen_text: Var, tau: f64, ids: Option<&[usize]>) -> Result<Var> {
    if tape.needs_grad(frozen_text) {
        return Err(Error::Contract("binding target must be detached from the graph".into()));
    }
    info_nce(tape, thermal, frozen_text, tau, ids)
}

// ----- token objectives ---------------------------------------------------

/// Cross-entropy of the true tokens at the masked rows of `logits`, averaged
/// over those rows. `None` when nothing is masked.
pub fn masked_ce(tape: &mut Tape<'_>, logits: Var, positions: &[usize], targets: &[u32]) -> Result<Option<Var>> {
    if positions.len() != targets.len() {
        return Err(Error::shape("masked_ce", format!("{} positions vs {} targets", positions.len(), targets.len())));
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let rows = tape.gather_rows(logits, positions)?;
    let ls = tape.log_softmax_rows(rows, 1.0)?;
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
    let picked = tape.pick(ls, &coords)?;
    let s = tape.sum(picked)?;
    Ok(Some(tape.scale(s, -1.0 / positions.len() as f64)?))
}

/// Mean cosine between `recon` and the detached `target` at `positions`.
pub fn masked_cosine(tape: &mut Tape<'_>, recon: Var, target: Var, positions: &[usize]) -> Result<Option<Var>> {
    if tape.needs_grad(target) {
        return Err(Error::Contract("reconstruction target must be detached from the graph".into()));
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let r = tape.gather_rows(recon, positions)?;
    let e = tape.gather_rows(target, positions)?;
    let rn = tape.normalize_rows(r)?;
    let en = tape.normalize_rows(e)?;
    let prod = tape.mul(rn, en)?;
    let s = tape.sum(prod)?;
    Ok(Some(tape.scale(s, 1.0 / positions.len() as f64)?))
}

/// Batch mean of per-sample terms, where absent terms count as zero.
/// Returns the mean and the number of absent terms.
pub fn batch_mean(tape: &mut Tape<'_>, terms: &[Option<Var>]) -> Result<(Var, usize)> {
    if terms.is_empty() {
        return Err(Error::shape("batch_mean", "empty batch"));
    }
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    let missing = terms.len() - present.len();
    if present.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), missing));
    }
    let stacked = tape.concat_rows(&present)?;
    let s = tape.sum(stacked)?;
    Ok((tape.scale(s, 1.0 / terms.len() as f64)?, missing))
}

/// Arbitrary-word reconstruction: batch mean of per-sample masked CE.
pub fn ar_loss(tape: &mut Tape<'_>, per_sample: &[Option<Var>]) -> Result<(Var, usize)> {
    batch_mean(tape, per_sample)
}

/// `1 − batch mean of per-sample mean cosines` (CRS and CUS).
pub fn reconstruction_loss(tape: &mut Tape<'_>, per_sample_cos: &[Option<Var>]) -> Result<(Var, usize)> {
    let (m, missing) = batch_mean(tape, per_sample_cos)?;
    let neg = tape.scale(m, -1.0)?;
    Ok((tape.add_const(neg, &Tensor::scalar(1.0))?, missing))
}

// ----- interaction module and recover head ---------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Separate parameters for the AR, CRS and CUS branches.
    pub per_branch: bool,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig { heads: 4, layers: 2, mlp_ratio: 4, dropout: 0.1, per_branch: false }
    }
}

/// Which reconstruction branch uses the module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Ar,
    Crs,
    Cus,
}

pub fn interaction_prefix(cfg: &InteractionConfig, branch: Branch) -> &'static str {
    if !cfg.per_branch {
        return "interaction";
    }
    match branch {
        Branch::Ar => "interaction.ar",
        Branch::Crs => "interaction.crs",
        Branch::Cus => "interaction.cus",
    }
}

pub fn init_interaction(store: &mut ParamStore, d: usize, cfg: &InteractionConfig, rng: &mut impl Rng) {
    let prefixes: Vec<&str> = if cfg.per_branch {
        vec!["interaction.ar", "interaction.crs", "interaction.cus"]
    } else {
        vec!["interaction"]
    };
    for p in prefixes {
        init_layer_norm(store, &format!("{p}.ln_q"), d);
        init_layer_norm(store, &format!("{p}.ln_kv"), d);
        init_attention(store, &format!("{p}.cross"), d, rng);
        for l in 0..cfg.layers {
            init_block(store, &format!("{p}.blocks.{l}"), d, cfg.mlp_ratio, rng);
        }
        init_layer_norm(store, &format!("{p}.ln_post"), d);
    }
}

pub fn init_recover_head(store: &mut ParamStore, d: usize, vocab: usize, rng: &mut impl Rng) {
    init_linear(store, "recover", d, vocab, rng);
}

/// Text tokens attend to visual tokens, then pass through self-attention
/// blocks. Output has one row per text token.
pub fn interact(tape: &mut Tape<'_>, text: Var, visual: Var, cfg: &InteractionConfig, branch: Branch) -> Result<Var> {
    let p = interaction_prefix(cfg, branch);
    let q = layer_norm(tape, text, &join(p, "ln_q"))?;
    let kv = layer_norm(tape, visual, &join(p, "ln_kv"))?;
    let a = multi_head_attention(tape, q, kv, &join(p, "cross"), cfg.heads, None)?;
    let a = tape.dropout(a, cfg.dropout)?;
    let mut x = tape.add(text, a)?;
    for l in 0..cfg.layers {
        x = transformer_block(tape, x, &format!("{p}.blocks.{l}"), cfg.heads, cfg.dropout, None)?;
    }
    layer_norm(tape, x, &join(p, "ln_post"))
}

pub fn recover_head(tape: &mut Tape<'_>, recon: Var) -> Result<Var> {
    linear(tape, recon, "recover")
}

// ----- combination --------------------------------------------------------

/// Per-loss values of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<(LossKind, f64)>,
    pub total: f64,
    /// Samples whose masked set was empty, per token loss.
    pub empty_masks: Vec<(LossKind, usize)>,
}

impl LossBreakdown {
    pub fn get(&self, kind: LossKind) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

/// Weighted sum of the enabled terms present in `terms`.
pub fn total_loss(tape: &mut Tape<'_>, terms: &[(LossKind, Var)], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let mut parts = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for &(kind, v) in terms {
        if !cfg.enabled(kind) {
            continue;
        }
        breakdown.terms.push((kind, tape.scalar(v)));
        let w = cfg.switch(kind).weight;
        parts.push(if w == 1.0 { v } else { tape.scale(v, w)? });
    }
    if parts.is_empty() {
        return Err(Error::Config("no enabled loss contributes to the objective".into()));
    }
    let total = if parts.len() == 1 {
        parts[0]
    } else {
        let stacked = tape.concat_rows(&parts)?;
        tape.sum(stacked)?
    };
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

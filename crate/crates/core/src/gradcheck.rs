//! Finite-difference check of every loss term and the ATF module on a
//! two-sample synthetic batch with the tiny model configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::fusion::{fuse_atf, FusionKind, ATF_PREFIX};
use crate::losses::{total_loss, LossConfig, LossKind};
use crate::model::{batch_loss_terms, batch_objective, frozen_targets, Example, Model, ModelConfig};
use crate::numerics::{grad_check_params, grad_check_params_multi, ParamCheck, ParamStore, Tape, Tensor, Trainable};
use crate::synthdata::{derive_seed, PALETTE};
use crate::text::{make_variants_with, Lexicon, Lexicons, TokenizedCaption, Tokenizer, Vocabulary, DEFAULT_MASK_KINDS};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Step of the fourth-order central difference.
pub const GRADCHECK_STEP: f64 = 3e-4;
/// Spread of the perturbation added to the initial parameters so that
/// zero-initialized branches carry gradient and activations leave the
/// near-linear regime.
const PARAM_JITTER: f64 = 0.3;
const MAX_LEN: usize = 10;
const COLORS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub target: String,
    pub check: ParamCheck,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.check.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= GRADCHECK_TOLERANCE
    }
}

struct Sample {
    rgb: Tensor,
    thermal: Tensor,
    caption: TokenizedCaption,
    erased: TokenizedCaption,
}

fn tokenizer() -> Result<Tokenizer> {
    let colors: Vec<&str> = PALETTE[..COLORS].iter().map(|(c, _)| *c).collect();
    let nouns = ["person", "shirt", "pants", "hat"];
    let vocab = Vocabulary::build(colors.iter().copied().chain(nouns).chain(["slim", "broad", "in"]));
    Tokenizer::new(vocab, Lexicons { colors: Lexicon::new(&colors), nouns: Lexicon::new(nouns) }, MAX_LEN)
}

fn sample(tok: &Tokenizer, rng: &mut ChaCha8Rng, k: usize) -> Result<Sample> {
    let mut image = || Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.random::<f64>()).collect());
    let (rgb, thermal) = (image()?, image()?);
    let c1 = PALETTE[rng.random_range(0..COLORS)].0;
    let c2 = PALETTE[rng.random_range(0..COLORS)].0;
    let fig = if rng.random::<bool>() { "slim" } else { "broad" };
    let text = format!("{fig} person in {c1} shirt {c2} pants hat");
    let caption = tok.tokenize(&text, k, k)?;
    let erased = tok.erase_colors(&caption)?;
    Ok(Sample { rgb, thermal, caption, erased })
}

fn jittered_model(vocab: usize, seed: u64) -> Result<Model> {
    let mut model = Model::init(ModelConfig::tiny(vocab, MAX_LEN), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let normal = Normal::new(0.0, PARAM_JITTER).expect("valid std");
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter() {
        let data = t.data().iter().map(|&x| x + normal.sample(&mut rng)).collect();
        store.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    model.params = store;
    Ok(model)
}

/// Checks each loss term alone, their weighted total, and the ATF output,
/// over every trainable coordinate.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let tok = tokenizer()?;
    let model = jittered_model(tok.vocab.len(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    // two samples of one identity plus distinct identities would make q
    // degenerate in one way or the other; use one of each
    let samples = [sample(&tok, &mut rng, 0)?, sample(&tok, &mut rng, 1)?];
    let ids = [0usize, rng.random_range(0..2)];
    let batch: Vec<Example<'_>> = samples
        .iter()
        .zip(ids)
        .enumerate()
        .map(|(k, (s, id))| {
            Ok(Example {
                identity_id: id,
                rgb: &s.rgb,
                thermal: &s.thermal,
                caption: &s.caption,
                erased: &s.erased,
                variants: make_variants_with(&s.caption, &s.erased, DEFAULT_MASK_KINDS, 0.3, derive_seed(seed, &[3, k as u64]))?,
            })
        })
        .collect::<Result<_>>()?;

    // every term and a weighted total from one forward pass per probe
    let mut all = LossConfig::default();
    for (i, kind) in LossKind::ALL.into_iter().enumerate() {
        all.switch_mut(kind).weight = 0.5 + 0.25 * i as f64;
    }
    let targets = batch
        .iter()
        .map(|ex| frozen_targets(&model.params, &model.config, &all, ex))
        .collect::<Result<Vec<_>>>()?;
    let terms = |tape: &mut Tape<'_>| {
        let (terms, _) = batch_loss_terms(tape, &model.config, FusionKind::Add, &all, &batch, &targets)?;
        let (total, _) = total_loss(tape, &terms, &all)?;
        Ok(terms.into_iter().map(|(_, v)| v).chain([total]).collect())
    };
    let stage1 = Trainable::Except(vec![ATF_PREFIX.to_string()]);
    let checks = grad_check_params_multi(&model.params, &stage1, terms, GRADCHECK_STEP)?;
    let names = LossKind::ALL.iter().map(|k| k.name().to_string()).chain(["total".to_string()]);
    let mut lines: Vec<CheckLine> = names.zip(checks).map(|(target, check)| CheckLine { target, check }).collect();

    // ATF alone: a fixed random functional of the fused tokens
    let d = model.config.dim();
    let n = model.config.image.num_tokens();
    let mut image = |scale: f64| {
        Tensor::new(vec![n, d], (0..n * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
    };
    let (v, t, probe) = (image(1.0)?, image(1.0)?, image(1.0)?);
    let atf = |tape: &mut Tape<'_>| {
        let (vv, tt) = (tape.leaf(v.clone()), tape.leaf(t.clone()));
        let fused = fuse_atf(tape, vv, tt, &model.config.atf)?;
        let weighted = tape.mul_const(fused, &probe)?;
        tape.sum(weighted)
    };
    let only = Trainable::Only(vec![ATF_PREFIX.to_string()]);
    lines.push(CheckLine { target: "atf".into(), check: grad_check_params(&model.params, &only, atf, GRADCHECK_STEP)? });
    let stage2 = LossConfig::only(&[LossKind::Sdm, LossKind::Ar]);
    let targets = vec![Default::default(); batch.len()];
    let s2 = |tape: &mut Tape<'_>| {
        batch_objective(tape, &model.config, FusionKind::Atf, &stage2, &batch, &targets).map(|(v, _)| v)
    };
    lines.push(CheckLine { target: "atf-stage2".into(), check: grad_check_params(&model.params, &only, s2, GRADCHECK_STEP)? });
    Ok(GradcheckReport { seed, lines })
}

//! Two-stage training.
//!
//! Stage 1 trains encoders, interaction module and recover head with
//! additive (or concatenating) fusion; ATF parameters are excluded. Stage 2
//! freezes everything except ATF and optimizes the terms that consume the
//! fused features (SDM and AR).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{epoch_batches, Corpus, Draw};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, ATF_PREFIX};
use crate::losses::{LossBreakdown, LossConfig, LossKind};
use crate::model::{batch_objective, frozen_targets, Example, Model, ModelConfig};
use crate::numerics::{CosineSchedule, OptimizerState, Tape, Trainable};
use crate::synthdata::{derive_seed, Split};
use crate::text::make_variants_with;

const SAMPLER_STREAM: u64 = 0x5a;
const MASK_STREAM: u64 = 0x6d;
const DROPOUT_STREAM: u64 = 0x64;

/// Mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub terms: Vec<(LossKind, f64)>,
}

impl EpochLog {
    pub fn get(&self, kind: LossKind) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Model configuration with the text dimensions taken from `corpus`.
pub fn model_config_for(cfg: &RunConfig, corpus: &Corpus) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.text.vocab_size = corpus.vocab_size();
    m.text.max_len = corpus.tokenizer.max_len;
    m
}

/// Number of batches `epoch_batches` yields per epoch.
pub fn batches_per_epoch(corpus: &Corpus, batch_size: usize) -> usize {
    let n = corpus.pairs_by_identity(Split::Train).len();
    let per = (batch_size / 2).max(1);
    let chunks = n.div_ceil(per);
    if per >= 2 && chunks > 1 && n % per == 1 {
        chunks - 1
    } else {
        chunks
    }
}

/// Materializes the examples of one batch with masks drawn from `seed`.
pub fn build_examples<'c>(corpus: &'c Corpus, draws: &[Draw], cfg: &RunConfig, seed: u64) -> Result<Vec<Example<'c>>> {
    draws
        .iter()
        .enumerate()
        .map(|(k, &(p, c))| {
            let pair = &corpus.dataset.pairs[p];
            let cap = &corpus.captions[c];
            let variants = make_variants_with(
                &cap.caption,
                &cap.erased,
                cfg.train.mask_kinds,
                cfg.train.mask_ratio,
                derive_seed(seed, &[k as u64]),
            )?;
            Ok(Example {
                identity_id: pair.identity_id,
                rgb: &pair.rgb,
                thermal: &pair.thermal,
                caption: &cap.caption,
                erased: &cap.erased,
                variants,
            })
        })
        .collect()
}

/// Loss of one batch in evaluation mode (no dropout, no gradients).
pub fn eval_batch_loss(
    model: &Model,
    fusion: FusionKind,
    losses: &LossConfig,
    batch: &[Example<'_>],
) -> Result<LossBreakdown> {
    let targets = batch
        .iter()
        .map(|ex| frozen_targets(&model.params, &model.config, losses, ex))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::with_params(&model.params, Trainable::Nothing);
    let (_, breakdown) = batch_objective(&mut tape, &model.config, fusion, losses, batch, &targets)?;
    Ok(breakdown)
}

struct StagePlan<'a> {
    stage: u8,
    epochs: usize,
    fusion: FusionKind,
    losses: LossConfig,
    trainable: Trainable,
    cfg: &'a RunConfig,
}

fn describe_batch(corpus: &Corpus, draws: &[Draw]) -> String {
    draws
        .iter()
        .map(|&(p, c)| {
            let pair = &corpus.dataset.pairs[p];
            format!("pair {} (identity {}): \"{}\"", pair.pair_id, pair.identity_id, corpus.captions[c].caption.words.join(" "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn run_stage(
    plan: &StagePlan<'_>,
    corpus: &Corpus,
    model: &mut Model,
    optimizer: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let cfg = plan.cfg;
    let mut log = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let batches = epoch_batches(corpus, cfg.train.batch_size, rng)?;
        let mut sums: Vec<(LossKind, f64)> = plan.losses.enabled_kinds().into_iter().map(|k| (k, 0.0)).collect();
        let mut total = 0.0;
        for draws in &batches {
            let step = optimizer.step;
            let stage = u64::from(plan.stage);
            let batch = build_examples(corpus, draws, cfg, derive_seed(cfg.seed, &[MASK_STREAM, stage, step]))?;
            let targets = batch
                .iter()
                .map(|ex| frozen_targets(&model.params, &model.config, &plan.losses, ex))
                .collect::<Result<Vec<_>>>()?;
            let grads = {
                let mut tape = Tape::with_params(&model.params, plan.trainable.clone())
                    .training(derive_seed(cfg.seed, &[DROPOUT_STREAM, stage, step]));
                let (loss, breakdown) =
                    batch_objective(&mut tape, &model.config, plan.fusion, &plan.losses, &batch, &targets)?;
                if !breakdown.total.is_finite() || tape.check_finite().is_err() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at stage {} epoch {} step {}; terms {:?}; batch: {}",
                        plan.stage,
                        epoch,
                        step,
                        breakdown.terms,
                        describe_batch(corpus, draws)
                    )));
                }
                for (acc, (_, v)) in sums.iter_mut().zip(&breakdown.terms) {
                    acc.1 += v;
                }
                total += breakdown.total;
                tape.backward(loss)?.params(&tape)
            };
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for '{name}' at stage {} step {step}; batch: {}",
                    plan.stage,
                    describe_batch(corpus, draws)
                )));
            }
            optimizer.adam_step(&mut model.params, &grads)?;
        }
        let n = batches.len() as f64;
        let entry = EpochLog {
            stage: plan.stage,
            epoch,
            steps: batches.len(),
            total: total / n,
            terms: sums.into_iter().map(|(k, s)| (k, s / n)).collect(),
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(log)
}

fn schedule(lr: f64, ratio: f64, steps: usize) -> CosineSchedule {
    CosineSchedule { lr_max: lr, lr_min: lr * ratio, total_steps: steps as u64 }
}

pub fn train_stage1(corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_stage1_with(corpus, cfg, &mut |_| {})
}

pub fn train_stage1_with(corpus: &Corpus, cfg: &RunConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::init(model_config_for(cfg, corpus), cfg.seed)?;
    let steps = cfg.train.stage1_epochs * batches_per_epoch(corpus, cfg.train.batch_size);
    let mut optimizer = OptimizerState::new(schedule(cfg.train.stage1_lr, cfg.train.lr_min_ratio, steps));
    optimizer.hyper = cfg.train.adam;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SAMPLER_STREAM]));
    let plan = StagePlan {
        stage: 1,
        epochs: cfg.train.stage1_epochs,
        fusion: cfg.train.stage1_fusion,
        losses: cfg.loss.clone(),
        trainable: Trainable::Except(
            std::iter::once(ATF_PREFIX.to_string()).chain(cfg.train.stage1_frozen.iter().cloned()).collect(),
        ),
        cfg,
    };
    let log = run_stage(&plan, corpus, &mut model, &mut optimizer, &mut rng, progress)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            stage: 1,
            fusion: cfg.train.stage1_fusion,
            tokenizer: corpus.tokenizer.clone(),
            model,
            optimizer,
            rng,
        },
        log,
    })
}

/// Trains ATF on top of a stage-1 checkpoint using the training options of `cfg`.
pub fn train_stage2(ckpt: Checkpoint, corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_stage2_with(ckpt, corpus, cfg, &mut |_| {})
}

pub fn train_stage2_with(
    ckpt: Checkpoint,
    corpus: &Corpus,
    cfg: &RunConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ckpt.stage != 1 {
        return Err(Error::Config(format!("stage 2 starts from a stage-1 checkpoint, got stage {}", ckpt.stage)));
    }
    if ckpt.tokenizer.vocab != corpus.tokenizer.vocab {
        return Err(Error::Data("corpus vocabulary differs from the checkpoint".into()));
    }
    let losses = cfg.stage2_losses();
    if losses.enabled_kinds().is_empty() {
        return Err(Error::Config("stage 2 needs SDM or AR enabled".into()));
    }
    let Checkpoint { mut model, mut rng, .. } = ckpt;
    let steps = cfg.train.stage2_epochs * batches_per_epoch(corpus, cfg.train.batch_size);
    let mut optimizer = OptimizerState::new(schedule(cfg.train.stage2_lr, cfg.train.lr_min_ratio, steps));
    optimizer.hyper = cfg.train.adam;
    let plan = StagePlan {
        stage: 2,
        epochs: cfg.train.stage2_epochs,
        fusion: FusionKind::Atf,
        losses,
        trainable: Trainable::Only(vec![ATF_PREFIX.to_string()]),
        cfg,
    };
    let log = run_stage(&plan, corpus, &mut model, &mut optimizer, &mut rng, progress)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            stage: 2,
            fusion: FusionKind::Atf,
            tokenizer: corpus.tokenizer.clone(),
            model,
            optimizer,
            rng,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec};

    fn small() -> (Corpus, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.data = CorpusSpec { identities: 8, seed: 2, ..CorpusSpec::default() };
        cfg.model.image.dim = 16;
        cfg.model.image.layers = 1;
        cfg.model.text.dim = 16;
        cfg.model.text.layers = 1;
        cfg.model.interaction.layers = 1;
        cfg.train.batch_size = 4;
        cfg.train.stage1_epochs = 1;
        cfg.train.stage2_epochs = 1;
        let corpus = Corpus::prepare(generate_corpus(&cfg.data).unwrap(), cfg.model.text.max_len).unwrap();
        (corpus, cfg)
    }

    #[test]
    fn batch_count_matches_sampler() {
        let (corpus, cfg) = small();
        for b in [2, 4, 6, 8, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            assert_eq!(epoch_batches(&corpus, b, &mut rng).unwrap().len(), batches_per_epoch(&corpus, b), "batch {b}");
        }
        let _ = cfg;
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (corpus, mut cfg) = small();
        cfg.train.stage1_lr = 0.0;
        cfg.train.stage2_lr = 0.0;
        let init = Model::init(model_config_for(&cfg, &corpus), cfg.seed).unwrap();
        let s1 = train_stage1(&corpus, &cfg).unwrap();
        assert_eq!(s1.checkpoint.model.params, init.params);
        let s2 = train_stage2(s1.checkpoint, &corpus, &cfg).unwrap();
        assert_eq!(s2.checkpoint.model.params, init.params);
    }

    #[test]
    fn stage_two_moves_only_fusion() {
        let (corpus, cfg) = small();
        let s1 = train_stage1(&corpus, &cfg).unwrap();
        let before = s1.checkpoint.model.params.clone();
        let s2 = train_stage2(s1.checkpoint, &corpus, &cfg).unwrap();
        let mut moved = 0;
        for (name, t) in s2.checkpoint.model.params.iter() {
            let same = before.get(name).unwrap() == t;
            if name.starts_with(ATF_PREFIX) {
                moved += usize::from(!same);
            } else {
                assert!(same, "{name} changed in stage 2");
            }
        }
        assert!(moved > 0);
        assert!(s2.checkpoint.model.params.iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn frozen_prefixes_stay_put_in_stage_one() {
        let (corpus, mut cfg) = small();
        cfg.train.stage1_frozen = vec!["text.".into()];
        let init = Model::init(model_config_for(&cfg, &corpus), cfg.seed).unwrap();
        let s1 = train_stage1(&corpus, &cfg).unwrap();
        let params = &s1.checkpoint.model.params;
        let same = |n: &String| init.params.get(n).unwrap() == params.get(n).unwrap();
        assert!(params.names().filter(|n| n.starts_with("text.")).all(same));
        assert!(!params.names().filter(|n| n.starts_with("image.")).all(same));
    }

    #[test]
    fn stage_two_needs_stage_one() {
        let (corpus, cfg) = small();
        let s1 = train_stage1(&corpus, &cfg).unwrap();
        let s2 = train_stage2(s1.checkpoint, &corpus, &cfg).unwrap();
        assert!(train_stage2(s2.checkpoint, &corpus, &cfg).is_err());
    }
}

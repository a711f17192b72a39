//! `DCKP` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCKP" | u32 version | u32 header length | header (TOML)
//! repeated: u32 name length | name | u32 rank | u32 dims.. | f64 payload
//! ```
//!
//! Records hold the parameters under their registry names, Adam moments
//! under `adam.m/<name>` and `adam.v/<name>`, the step under `adam.step`
//! and the sampler RNG under `rng`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::io::{atomic_write, Reader};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamHyper, CosineSchedule, OptimizerState, ParamStore, Tensor};
use crate::text::{Lexicon, Lexicons, Tokenizer, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";
const STEP: &str = "adam.step";
const RNG: &str = "rng";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// 1 after stage 1, 2 after stage 2.
    pub stage: u8,
    /// Fusion used at inference.
    pub fusion: FusionKind,
    pub tokenizer: Tokenizer,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: u8,
    fusion: FusionKind,
    max_len: usize,
    vocab: Vec<String>,
    colors: Vec<String>,
    nouns: Vec<String>,
    schedule: CosineSchedule,
    adam: AdamHyper,
    model: ModelConfig,
    config: RunConfig,
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
}

/// ChaCha state as u32 words: seed (8), stream (2), word position (4).
fn rng_words(rng: &ChaCha8Rng) -> Tensor {
    let mut w: Vec<f64> = rng.get_seed().chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let stream = rng.get_stream();
    w.extend([stream as u32, (stream >> 32) as u32].map(f64::from));
    let pos = rng.get_word_pos();
    w.extend((0..4).map(|i| ((pos >> (32 * i)) as u32) as f64));
    Tensor::vector(w)
}

fn rng_from_words(t: &Tensor) -> Result<ChaCha8Rng> {
    let w = t.data();
    if w.len() != 14 || w.iter().any(|&x| x.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&x)) {
        return Err(Error::Format("malformed rng record".into()));
    }
    let w: Vec<u32> = w.iter().map(|&x| x as u32).collect();
    let mut seed = [0u8; 32];
    for (i, word) in w[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from(w[8]) | (u64::from(w[9]) << 32));
    rng.set_word_pos(w[10..].iter().enumerate().fold(0u128, |acc, (i, &x)| acc | (u128::from(x) << (32 * i))));
    Ok(rng)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            fusion: self.fusion,
            max_len: self.tokenizer.max_len,
            vocab: self.tokenizer.vocab.corpus_words().to_vec(),
            colors: self.tokenizer.lexicons.colors.iter().map(str::to_string).collect(),
            nouns: self.tokenizer.lexicons.nouns.iter().map(str::to_string).collect(),
            schedule: self.optimizer.schedule,
            adam: self.optimizer.hyper,
            model: self.model.config.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.model.params.iter() {
            push_record(&mut out, name, t);
        }
        for (name, t) in &self.optimizer.first_moment {
            push_record(&mut out, &format!("{FIRST_MOMENT}{name}"), t);
        }
        for (name, t) in &self.optimizer.second_moment {
            push_record(&mut out, &format!("{SECOND_MOMENT}{name}"), t);
        }
        push_record(&mut out, STEP, &Tensor::scalar(self.optimizer.step as f64));
        push_record(&mut out, RNG, &rng_words(&self.rng));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (missing DCKP magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Format(e.message().to_string()))?;

        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut step = None;
        let mut rng = None;
        while !r.is_done() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix(FIRST_MOMENT) {
                first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(SECOND_MOMENT) {
                second.insert(p.to_string(), t);
            } else if name == STEP {
                step = Some(t.item() as u64);
            } else if name == RNG {
                rng = Some(rng_from_words(&t)?);
            } else {
                params.insert(name, t);
            }
        }
        let lexicons = Lexicons { colors: Lexicon::new(&header.colors), nouns: Lexicon::new(&header.nouns) };
        let tokenizer = Tokenizer::new(Vocabulary::from_words(header.vocab), lexicons, header.max_len)?;
        if tokenizer.vocab.len() != header.model.text.vocab_size {
            return Err(Error::Format("vocabulary does not match the text encoder".into()));
        }
        let optimizer = OptimizerState {
            hyper: header.adam,
            schedule: header.schedule,
            step: step.ok_or_else(|| Error::Format("checkpoint lacks adam.step".into()))?,
            first_moment: first,
            second_moment: second,
        };
        Ok(Checkpoint {
            config: header.config,
            stage: header.stage,
            fusion: header.fusion,
            tokenizer,
            model: Model { config: header.model, params },
            optimizer,
            rng: rng.ok_or_else(|| Error::Format("checkpoint lacks rng state".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let lex = Lexicons { colors: Lexicon::new(["red"]), nouns: Lexicon::new(["man"]) };
        let tokenizer = Tokenizer::new(Vocabulary::build(["a red man"]), lex, 12).unwrap();
        let model = Model::init(ModelConfig::tiny(tokenizer.vocab.len(), 12), 3).unwrap();
        let mut optimizer = OptimizerState::new(CosineSchedule { lr_max: 1e-3, lr_min: 1e-5, total_steps: 10 });
        optimizer.step = 4;
        optimizer.first_moment.insert("text.tok".into(), Tensor::full(vec![2], 0.1));
        optimizer.second_moment.insert("text.tok".into(), Tensor::full(vec![2], 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(u64::MAX - 3);
        rng.next_u32();
        Checkpoint {
            config: RunConfig::default(),
            stage: 1,
            fusion: FusionKind::Add,
            tokenizer,
            model,
            optimizer,
            rng,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DCKP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.tokenizer.vocab, ck.tokenizer.vocab);
        let (mut a, mut b) = (back.rng.clone(), ck.rng.clone());
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }
}

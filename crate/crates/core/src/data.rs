//! Tokenized view of a corpus and the identity-aware batch sampler.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{Challenge, Dataset, Split};
use crate::text::{TokenizedCaption, Tokenizer, Vocabulary};

/// A caption with its color-erased form.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCaption {
    pub pair_index: usize,
    pub caption: TokenizedCaption,
    pub erased: TokenizedCaption,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub dataset: Dataset,
    pub tokenizer: Tokenizer,
    pub captions: Vec<PreparedCaption>,
    /// Caption indices per pair index.
    pub pair_captions: Vec<Vec<usize>>,
}

impl Corpus {
    /// Builds the vocabulary from training captions and tokenizes everything.
    pub fn prepare(dataset: Dataset, max_len: usize) -> Result<Self> {
        let vocab = Vocabulary::build(dataset.captions(Split::Train));
        let tokenizer = Tokenizer::new(vocab, dataset.lexicons.clone(), max_len)?;
        Self::with_tokenizer(dataset, tokenizer)
    }

    pub fn with_tokenizer(dataset: Dataset, tokenizer: Tokenizer) -> Result<Self> {
        let mut captions = Vec::new();
        let mut pair_captions = Vec::with_capacity(dataset.pairs.len());
        for (pi, pair) in dataset.pairs.iter().enumerate() {
            let mut idx = Vec::new();
            for text in &pair.captions {
                let caption = tokenizer.tokenize(text, captions.len(), pair.identity_id)?;
                let erased = tokenizer.erase_colors(&caption)?;
                idx.push(captions.len());
                captions.push(PreparedCaption { pair_index: pi, caption, erased });
            }
            if idx.is_empty() {
                return Err(Error::Data(format!("pair {} has no caption", pair.pair_id)));
            }
            pair_captions.push(idx);
        }
        Ok(Corpus { dataset, tokenizer, captions, pair_captions })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab.len()
    }

    /// Pair indices per identity within `split`.
    pub fn pairs_by_identity(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.dataset.pairs.iter().enumerate() {
            if p.split == split {
                m.entry(p.identity_id).or_default().push(i);
            }
        }
        m
    }

    /// `(caption index, challenge)` of every caption in `split`.
    pub fn queries(&self, split: Split) -> Vec<(usize, Challenge)> {
        self.captions
            .iter()
            .enumerate()
            .filter(|(_, c)| self.dataset.pairs[c.pair_index].split == split)
            .map(|(i, c)| (i, self.dataset.pairs[c.pair_index].challenge))
            .collect()
    }
}

/// `(pair index, caption index)` of one example.
pub type Draw = (usize, usize);

/// One epoch of batches: identities are shuffled and taken `batch_size / 2`
/// at a time; each contributes two examples from distinct pairs when it has
/// them, each with a random caption of its pair.
pub fn epoch_batches(corpus: &Corpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Draw>>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!("batch size must be even and at least 2, got {batch_size}")));
    }
    let by_id = corpus.pairs_by_identity(Split::Train);
    if by_id.len() < 2 {
        return Err(Error::Data("training split needs at least two identities".into()));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let per = batch_size / 2;
    let mut chunks: Vec<Vec<usize>> = ids.chunks(per).map(<[usize]>::to_vec).collect();
    if per >= 2 && chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    let mut batches = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut batch = Vec::with_capacity(2 * chunk.len());
        for id in chunk {
            let mut pairs = by_id[&id].clone();
            pairs.shuffle(rng);
            let picks: Vec<usize> = if pairs.len() >= 2 { pairs[..2].to_vec() } else { vec![pairs[0], pairs[0]] };
            for p in picks {
                let cap = *corpus.pair_captions[p].choose(rng).expect("pairs have captions");
                batch.push((p, cap));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec};
    use rand::SeedableRng;

    #[test]
    fn batches_pair_up_identities() {
        let ds = generate_corpus(&CorpusSpec { identities: 30, seed: 5, ..CorpusSpec::default() }).unwrap();
        let corpus = Corpus::prepare(ds, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(&corpus, 8, &mut rng).unwrap();
        let train = corpus.pairs_by_identity(Split::Train).len();
        let mut seen = 0;
        for b in &batches {
            assert_eq!(b.len() % 2, 0);
            for two in b.chunks(2) {
                let id = |d: &Draw| corpus.dataset.pairs[d.0].identity_id;
                assert_eq!(id(&two[0]), id(&two[1]));
                assert_ne!(two[0].0, two[1].0);
                assert_eq!(corpus.captions[two[0].1].pair_index, two[0].0);
                assert_eq!(corpus.dataset.pairs[two[0].0].split, Split::Train);
            }
            seen += b.len() / 2;
        }
        assert_eq!(seen, train);
        assert!(epoch_batches(&corpus, 3, &mut rng).is_err());
    }
}

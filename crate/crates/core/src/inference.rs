//! Gallery construction, evaluation and free-text retrieval with a trained model.

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate_features, GalleryIndex, GalleryItem, RetrievalReport};
use crate::fusion::FusionKind;
use crate::model::{gallery_feature, text_feature, Model};
use crate::synthdata::Split;
use crate::text::Tokenizer;

/// Fused features of every pair in `split`, keyed by pair id.
pub fn build_gallery(model: &Model, fusion: FusionKind, corpus: &Corpus, split: Split) -> Result<GalleryIndex> {
    let items = corpus
        .dataset
        .pairs_in(split)
        .map(|p| {
            Ok(GalleryItem {
                item_id: p.pair_id,
                identity_id: p.identity_id,
                challenge: p.challenge,
                feature: gallery_feature(&model.params, &model.config, fusion, &p.rgb, &p.thermal)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    GalleryIndex::new(items)
}

/// Every caption of `split` queried against the pairs of `split`.
pub fn evaluate(model: &Model, fusion: FusionKind, corpus: &Corpus, split: Split) -> Result<RetrievalReport> {
    let index = build_gallery(model, fusion, corpus, split)?;
    let queries = corpus
        .queries(split)
        .into_iter()
        .map(|(c, tag)| {
            let cap = &corpus.captions[c];
            let id = corpus.dataset.pairs[cap.pair_index].identity_id;
            Ok((id, tag, text_feature(&model.params, &model.config, &cap.caption.tokens)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_features(&index, &queries)
}

/// One retrieved gallery entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub pair_id: usize,
    pub identity_id: usize,
    pub score: f64,
}

/// The `topk` best gallery items for a free-text query (fewer if the gallery is smaller).
pub fn retrieve(model: &Model, tokenizer: &Tokenizer, index: &GalleryIndex, query: &str, topk: usize) -> Result<Vec<Hit>> {
    let caption = tokenizer.tokenize(query, 0, 0)?;
    let feature = text_feature(&model.params, &model.config, &caption.tokens)?;
    Ok(index
        .rank(&feature)?
        .into_iter()
        .take(topk)
        .map(|(pos, score)| {
            let item = &index.items()[pos];
            Hit { pair_id: item.item_id, identity_id: item.identity_id, score }
        })
        .collect())
}

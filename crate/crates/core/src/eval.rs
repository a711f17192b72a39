//! Gallery ranking and CMC / mAP metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synthdata::Challenge;

/// One indexed gallery entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryItem {
    pub item_id: usize,
    pub identity_id: usize,
    pub challenge: Challenge,
    pub feature: Vec<f64>,
}

/// Gallery with unit-normalized feature cache.
#[derive(Clone, Debug)]
pub struct GalleryIndex {
    items: Vec<GalleryItem>,
    unit: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

impl GalleryIndex {
    pub fn new(items: Vec<GalleryItem>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Data("gallery is empty".into()));
        };
        let d = first.feature.len();
        if let Some(bad) = items.iter().find(|i| i.feature.len() != d) {
            return Err(Error::shape(
                "gallery",
                format!("item {} has dim {}, expected {d}", bad.item_id, bad.feature.len()),
            ));
        }
        let unit = items.iter().map(|i| unit(&i.feature)).collect();
        Ok(GalleryIndex { items, unit })
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.unit[0].len()
    }

    pub fn normalized(&self, pos: usize) -> &[f64] {
        &self.unit[pos]
    }

    pub fn identity_ids(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.identity_id).collect()
    }

    /// Cosine similarity of `query` to every item, in gallery order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::shape("score_query", format!("query dim {} vs gallery dim {}", query.len(), self.dim())));
        }
        let q = unit(query);
        Ok(self.unit.iter().map(|g| g.iter().zip(&q).map(|(a, b)| a * b).sum()).collect())
    }

    /// Gallery positions ranked by descending cosine, ties by ascending item id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<(usize, f64)>> {
        let scores = self.scores(query)?;
        let ids: Vec<usize> = self.items.iter().map(|i| i.item_id).collect();
        Ok(rank_by_scores(&scores, &ids).into_iter().map(|p| (p, scores[p])).collect())
    }
}

/// Positions sorted by descending score; equal scores by ascending `tiebreak`.
pub fn rank_by_scores(scores: &[f64], tiebreak: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(tiebreak[a].cmp(&tiebreak[b])));
    order
}

/// 1-based rank of the first relevant item.
fn first_hit(ranking: &[usize], gallery_ids: &[usize], query_id: usize) -> Result<usize> {
    ranking
        .iter()
        .position(|&p| gallery_ids[p] == query_id)
        .map(|r| r + 1)
        .ok_or_else(|| Error::Data(format!("query of identity {query_id} has no relevant gallery item")))
}

fn check_lengths(rankings: &[Vec<usize>], query_ids: &[usize]) -> Result<()> {
    if rankings.len() != query_ids.len() {
        return Err(Error::shape("metrics", format!("{} rankings vs {} query ids", rankings.len(), query_ids.len())));
    }
    if rankings.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    Ok(())
}

/// Percentage of queries whose first relevant item is within the top `k`.
pub fn rank_k(rankings: &[Vec<usize>], gallery_ids: &[usize], query_ids: &[usize], k: usize) -> Result<f64> {
    check_lengths(rankings, query_ids)?;
    let mut hits = 0usize;
    for (r, &q) in rankings.iter().zip(query_ids) {
        if first_hit(r, gallery_ids, q)? <= k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Average precision of one ranking, as a fraction.
pub fn average_precision(ranking: &[usize], gallery_ids: &[usize], query_id: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (r, &p) in ranking.iter().enumerate() {
        if gallery_ids[p] == query_id {
            hits += 1;
            acc += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Data(format!("query of identity {query_id} has no relevant gallery item")));
    }
    Ok(acc / hits as f64)
}

/// Mean average precision over queries, as a percentage.
pub fn mean_ap(rankings: &[Vec<usize>], gallery_ids: &[usize], query_ids: &[usize]) -> Result<f64> {
    check_lengths(rankings, query_ids)?;
    let mut total = 0.0;
    for (r, &q) in rankings.iter().zip(query_ids) {
        total += average_precision(r, gallery_ids, q)?;
    }
    Ok(100.0 * total / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub rsum: f64,
    pub num_queries: usize,
    pub per_challenge: BTreeMap<String, RetrievalReport>,
}

impl RetrievalReport {
    fn summarize(rankings: &[Vec<usize>], gallery_ids: &[usize], query_ids: &[usize]) -> Result<Self> {
        let rank1 = rank_k(rankings, gallery_ids, query_ids, 1)?;
        let rank5 = rank_k(rankings, gallery_ids, query_ids, 5)?;
        let rank10 = rank_k(rankings, gallery_ids, query_ids, 10)?;
        Ok(RetrievalReport {
            rank1,
            rank5,
            rank10,
            map: mean_ap(rankings, gallery_ids, query_ids)?,
            rsum: rank1 + rank5 + rank10,
            num_queries: rankings.len(),
            per_challenge: BTreeMap::new(),
        })
    }

    /// Builds the report; with `tags`, adds one sub-report per query challenge.
    pub fn from_rankings(
        rankings: &[Vec<usize>],
        gallery_ids: &[usize],
        query_ids: &[usize],
        tags: Option<&[Challenge]>,
    ) -> Result<Self> {
        let mut report = Self::summarize(rankings, gallery_ids, query_ids)?;
        if let Some(tags) = tags {
            if tags.len() != rankings.len() {
                return Err(Error::shape("report", format!("{} tags vs {} queries", tags.len(), rankings.len())));
            }
            for tag in Challenge::ALL {
                let sel: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == tag).collect();
                if sel.is_empty() {
                    continue;
                }
                let r: Vec<Vec<usize>> = sel.iter().map(|&i| rankings[i].clone()).collect();
                let q: Vec<usize> = sel.iter().map(|&i| query_ids[i]).collect();
                report.per_challenge.insert(tag.to_string(), Self::summarize(&r, gallery_ids, &q)?);
            }
        }
        Ok(report)
    }

    /// JSON with fixed key order and six-decimal numbers.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        self.write_json(&mut s, 0);
        s.push('\n');
        s
    }

    fn write_json(&self, s: &mut String, indent: usize) {
        let pad = "  ".repeat(indent + 1);
        let _ = writeln!(s, "{{");
        for (k, v) in [("rank1", self.rank1), ("rank5", self.rank5), ("rank10", self.rank10), ("map", self.map), ("rsum", self.rsum)] {
            let _ = writeln!(s, "{pad}\"{k}\": {v:.6},");
        }
        let _ = writeln!(s, "{pad}\"num_queries\": {},", self.num_queries);
        if self.per_challenge.is_empty() {
            let _ = writeln!(s, "{pad}\"per_challenge\": {{}}");
        } else {
            let _ = writeln!(s, "{pad}\"per_challenge\": {{");
            let n = self.per_challenge.len();
            for (i, (tag, sub)) in self.per_challenge.iter().enumerate() {
                let _ = write!(s, "{pad}  \"{tag}\": ");
                sub.write_json(s, indent + 2);
                if i + 1 < n {
                    s.push(',');
                }
                s.push('\n');
            }
            let _ = writeln!(s, "{pad}}}");
        }
        let _ = write!(s, "{}}}", "  ".repeat(indent));
    }

    pub fn csv_row(&self, config: &str) -> String {
        format!("{config},{:.6},{:.6},{:.6},{:.6},{:.6}", self.rank1, self.rank5, self.rank10, self.map, self.rsum)
    }
}

pub const CSV_HEADER: &str = "config,rank1,rank5,rank10,map,rsum";

/// Scores every query feature against the index and builds a report.
/// `queries` holds `(identity_id, challenge, feature)`.
pub fn evaluate_features(index: &GalleryIndex, queries: &[(usize, Challenge, Vec<f64>)]) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let mut rankings = Vec::with_capacity(queries.len());
    for (_, _, f) in queries {
        rankings.push(index.rank(f)?.into_iter().map(|(p, _)| p).collect());
    }
    let qids: Vec<usize> = queries.iter().map(|q| q.0).collect();
    let tags: Vec<Challenge> = queries.iter().map(|q| q.1).collect();
    RetrievalReport::from_rankings(&rankings, &index.identity_ids(), &qids, Some(&tags))
}

//! Word-level tokenization, attribute lexicons, and the three caption
//! masking strategies (color-related, random, color-unrelated).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

pub const DEFAULT_MAX_LEN: usize = 77;
pub const DEFAULT_MASK_RATIO: f64 = 0.15;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn clean_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token id table. Ids 0..4 are reserved; corpus words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds the table from every word appearing in `texts`.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(clean_words).collect();
        Self::from_words(words)
    }

    /// Non-reserved words in id order; duplicates and reserved spellings are dropped.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), all.len() as u32);
                all.push(w);
            }
        }
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `word`, or `UNK`.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Corpus words in id order, without the reserved entries.
    pub fn corpus_words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }
}

/// A set of lowercase words, stored one per line on disk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Lexicon { words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect() }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn to_file_string(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut words = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let w = line.trim_end_matches('\r');
            if w.is_empty() {
                continue;
            }
            if w != w.to_lowercase() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("lexicon line {}: '{w}' is not a single lowercase word", n + 1)));
            }
            words.insert(w.to_string());
        }
        Ok(Lexicon { words })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Color words and attribute nouns used for tagging.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicons {
    pub colors: Lexicon,
    pub nouns: Lexicon,
}

/// CLS-prefixed, PAD-suffixed caption with attribute tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub caption_id: usize,
    pub identity_id: usize,
    pub tokens: Vec<u32>,
    /// Cleaned words kept after truncation; `words[i]` sits at `tokens[i + 1]`.
    pub words: Vec<String>,
    pub color_positions: Vec<usize>,
    pub noun_positions: Vec<usize>,
}

impl TokenizedCaption {
    /// Number of non-PAD tokens, CLS included.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Text → [`TokenizedCaption`] with a fixed vocabulary, lexicons and length.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub lexicons: Lexicons,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, lexicons: Lexicons, max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len {max_len} leaves no room for words")));
        }
        Ok(Tokenizer { vocab, lexicons, max_len })
    }

    pub fn tokenize(&self, text: &str, caption_id: usize, identity_id: usize) -> Result<TokenizedCaption> {
        let words = clean_words(text);
        if words.is_empty() {
            return Err(Error::Data(format!("caption {caption_id} is empty after cleaning")));
        }
        Ok(self.caption_from_words(words, caption_id, identity_id))
    }

    fn caption_from_words(&self, mut words: Vec<String>, caption_id: usize, identity_id: usize) -> TokenizedCaption {
        words.truncate(self.max_len - 1);
        let mut tokens = Vec::with_capacity(self.max_len);
        tokens.push(CLS);
        tokens.extend(words.iter().map(|w| self.vocab.id(w)));
        tokens.resize(self.max_len, PAD);
        let tagged = |lex: &Lexicon| -> Vec<usize> {
            words.iter().enumerate().filter(|(_, w)| lex.contains(w)).map(|(i, _)| i + 1).collect()
        };
        TokenizedCaption {
            caption_id,
            identity_id,
            color_positions: tagged(&self.lexicons.colors),
            noun_positions: tagged(&self.lexicons.nouns),
            tokens,
            words,
        }
    }

    /// Drops every color word, re-compacts, re-pads and re-tags.
    pub fn erase_colors(&self, caption: &TokenizedCaption) -> Result<TokenizedCaption> {
        erase_colors(caption, self)
    }
}

/// Removes the words of `tokenizer.lexicons.colors` from `caption`.
pub fn erase_colors(caption: &TokenizedCaption, tokenizer: &Tokenizer) -> Result<TokenizedCaption> {
    let colors = &tokenizer.lexicons.colors;
    if colors.is_empty() {
        return Err(Error::Config("color lexicon is empty".into()));
    }
    let kept: Vec<String> = caption.words.iter().filter(|w| !colors.contains(w)).cloned().collect();
    if kept.is_empty() {
        return Err(Error::Data(format!("caption {} is empty after cleaning", caption.caption_id)));
    }
    Ok(tokenizer.caption_from_words(kept, caption.caption_id, caption.identity_id))
}

/// Which positions a masking branch draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MaskKind {
    /// Color words of the original caption.
    Crm,
    /// Any word of the original caption.
    Rm,
    /// Attribute nouns of the color-erased caption.
    Cum,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Crm => "CRM",
            MaskKind::Rm => "RM",
            MaskKind::Cum => "CUM",
        })
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CRM" => Ok(MaskKind::Crm),
            "RM" => Ok(MaskKind::Rm),
            "CUM" => Ok(MaskKind::Cum),
            _ => Err(Error::Config(format!("unknown mask kind '{s}'"))),
        }
    }
}

/// Default branch assignment: (L1, L2, L3) = (CRM, RM, CUM).
pub const DEFAULT_MASK_KINDS: [MaskKind; 3] = [MaskKind::Crm, MaskKind::Rm, MaskKind::Cum];

/// A masked copy of a caption plus what was hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedVariant {
    pub kind: MaskKind,
    pub tokens: Vec<u32>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original token id at each masked position.
    pub targets: Vec<u32>,
    /// The branch had no candidates of its kind and sampled RM positions instead.
    pub fallback: bool,
}

impl MaskedVariant {
    /// The source token sequence, recovered by writing targets back.
    pub fn restore(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        for (&p, &g) in self.positions.iter().zip(&self.targets) {
            t[p] = g;
        }
        t
    }

    pub fn num_masked(&self) -> usize {
        self.positions.len()
    }
}

/// `max(1, ceil(ratio * candidates))`, or 0 without candidates.
pub fn mask_count(ratio: f64, candidates: usize) -> usize {
    if candidates == 0 {
        return 0;
    }
    // the slack absorbs binary representation error, e.g. 0.15 * 20
    let k = (ratio * candidates as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(candidates)
}

fn random_positions(caption: &TokenizedCaption) -> Vec<usize> {
    (1..caption.len()).collect()
}

fn mask_from(
    kind: MaskKind,
    source: &TokenizedCaption,
    candidates: Vec<usize>,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> MaskedVariant {
    let (candidates, fallback) =
        if candidates.is_empty() { (random_positions(source), true) } else { (candidates, false) };
    let k = mask_count(ratio, candidates.len());
    let mut positions: Vec<usize> = index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    positions.sort_unstable();
    let mut tokens = source.tokens.clone();
    let targets = positions
        .iter()
        .map(|&p| {
            let g = tokens[p];
            tokens[p] = MASK;
            g
        })
        .collect();
    MaskedVariant { kind, tokens, positions, targets, fallback }
}

/// One masked variant of the given kind. CUM draws from `erased`, the
/// other kinds from `caption`.
pub fn mask_caption(
    kind: MaskKind,
    caption: &TokenizedCaption,
    erased: &TokenizedCaption,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> MaskedVariant {
    match kind {
        MaskKind::Crm => mask_from(kind, caption, caption.color_positions.clone(), ratio, rng),
        MaskKind::Rm => mask_from(kind, caption, random_positions(caption), ratio, rng),
        MaskKind::Cum => mask_from(kind, erased, erased.noun_positions.clone(), ratio, rng),
    }
}

/// The source a branch of `kind` masks: the erased caption for CUM, else the original.
pub fn branch_source<'c>(kind: MaskKind, caption: &'c TokenizedCaption, erased: &'c TokenizedCaption) -> &'c TokenizedCaption {
    match kind {
        MaskKind::Cum => erased,
        MaskKind::Crm | MaskKind::Rm => caption,
    }
}

/// The (L1, L2, L3) variants for `kinds`, driven only by `seed`.
pub fn make_variants_with(
    caption: &TokenizedCaption,
    erased: &TokenizedCaption,
    kinds: [MaskKind; 3],
    ratio: f64,
    seed: u64,
) -> Result<[MaskedVariant; 3]> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(kinds.map(|k| mask_caption(k, caption, erased, ratio, &mut rng)))
}

/// CRM / RM / CUM variants of `caption`.
pub fn make_masked_variants(
    caption: &TokenizedCaption,
    tokenizer: &Tokenizer,
    ratio: f64,
    seed: u64,
) -> Result<[MaskedVariant; 3]> {
    let erased = erase_colors(caption, tokenizer)?;
    make_variants_with(caption, &erased, DEFAULT_MASK_KINDS, ratio, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokenizer(max_len: usize) -> Tokenizer {
        let lex = Lexicons {
            colors: Lexicon::new(["red", "black", "blue", "white"]),
            nouns: Lexicon::new(["man", "jacket", "shoes", "jeans", "person"]),
        };
        let vocab = Vocabulary::build([
            "a man in a red jacket and black shoes walking",
            "red jacket blue jeans",
            "a white person",
        ]);
        Tokenizer::new(vocab, lex, max_len).unwrap()
    }

    fn words_of(tok: &Tokenizer, c: &TokenizedCaption) -> Vec<String> {
        c.tokens[1..c.len()].iter().map(|&t| tok.vocab.word(t).unwrap().to_string()).collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(["zebra apple"]);
        assert_eq!(v.word(PAD), Some("[PAD]"));
        assert_eq!(v.word(CLS), Some("[CLS]"));
        assert_eq!(v.word(MASK), Some("[MASK]"));
        assert_eq!(v.word(UNK), Some("[UNK]"));
        assert_eq!(v.id("apple"), 4);
        assert_eq!(v.id("zebra"), 5);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn tokenize_cleans_and_pads() {
        let t = tokenizer(77);
        let c = t.tokenize("A man, walking.", 0, 0).unwrap();
        assert_eq!(c.tokens.len(), 77);
        assert_eq!(c.tokens[0], CLS);
        assert_eq!(words_of(&t, &c), ["a", "man", "walking"]);
        assert!(c.tokens[4..].iter().all(|&x| x == PAD));
        assert_eq!(c.noun_positions, vec![2]);
    }

    #[test]
    fn empty_text_is_error() {
        assert!(tokenizer(77).tokenize("", 0, 0).is_err());
        assert!(tokenizer(77).tokenize(" ,.; ", 0, 0).is_err());
    }

    #[test]
    fn truncates_long_captions() {
        let t = tokenizer(77);
        let text: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let c = t.tokenize(&text.join(" "), 0, 0).unwrap();
        assert_eq!(c.tokens.len(), 77);
        assert_eq!(c.len(), 77);
        assert_eq!(c.words.last().unwrap(), "w75"); // the 76th word
        assert!(c.tokens.iter().all(|&x| x != PAD));
    }

    #[test]
    fn erase_colors_examples() {
        let t = tokenizer(77);
        let c = t.tokenize("a man in a red jacket and black shoes", 0, 0).unwrap();
        let e = t.erase_colors(&c).unwrap();
        assert_eq!(e.words.join(" "), "a man in a jacket and shoes");
        assert!(e.color_positions.is_empty());
        assert_eq!(e.noun_positions, vec![2, 5, 7]);
        assert!(e.tokens[8..].iter().all(|&x| x == PAD));

        let plain = t.tokenize("a man walking", 1, 0).unwrap();
        assert_eq!(t.erase_colors(&plain).unwrap(), plain);

        let only = t.tokenize("red black", 2, 0).unwrap();
        assert!(matches!(t.erase_colors(&only), Err(Error::Data(_))));
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(0.15, 20), 3);
        assert_eq!(mask_count(0.15, 2), 1);
        assert_eq!(mask_count(0.15, 1), 1);
        assert_eq!(mask_count(0.15, 0), 0);
        assert_eq!(mask_count(0.5, 3), 2);
    }

    #[test]
    fn crm_masks_one_color() {
        let t = tokenizer(77);
        let c = t.tokenize("red jacket blue jeans", 0, 0).unwrap();
        for seed in 0..20 {
            let [crm, _, _] = make_masked_variants(&c, &t, 0.15, seed).unwrap();
            assert_eq!(crm.positions.len(), 1);
            assert!(crm.positions[0] == 1 || crm.positions[0] == 3);
            assert_eq!(crm.targets[0], c.tokens[crm.positions[0]]);
            assert!(!crm.fallback);
        }
    }

    #[test]
    fn colorless_crm_falls_back_to_rm() {
        let t = tokenizer(77);
        let c = t.tokenize("a man walking", 0, 0).unwrap();
        let [crm, rm, cum] = make_masked_variants(&c, &t, 0.15, 1).unwrap();
        assert!(crm.fallback);
        assert_eq!(crm.kind, MaskKind::Crm);
        assert!(!rm.fallback);
        assert!(!cum.fallback);
        assert_eq!(cum.positions, vec![2]);
    }

    #[test]
    fn variants_are_seed_deterministic() {
        let t = tokenizer(77);
        let c = t.tokenize("a man in a red jacket and black shoes", 0, 0).unwrap();
        let a = make_masked_variants(&c, &t, 0.15, 42).unwrap();
        let b = make_masked_variants(&c, &t, 0.15, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_must_be_open_unit_interval() {
        let t = tokenizer(77);
        let c = t.tokenize("a man", 0, 0).unwrap();
        assert!(make_masked_variants(&c, &t, 0.0, 0).is_err());
        assert!(make_masked_variants(&c, &t, 1.0, 0).is_err());
    }

    #[test]
    fn lexicon_file_round_trip() {
        let lex = Lexicon::new(["red", "blue"]);
        let text = lex.to_file_string();
        assert_eq!(text, "blue\nred\n");
        assert_eq!(Lexicon::parse(&text).unwrap(), lex);
        assert!(Lexicon::parse("Red\n").is_err());
    }

    #[test]
    fn mask_kind_parse() {
        assert_eq!("crm".parse::<MaskKind>().unwrap(), MaskKind::Crm);
        assert!("xx".parse::<MaskKind>().is_err());
    }
}

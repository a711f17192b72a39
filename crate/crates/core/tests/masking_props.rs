use proptest::prelude::*;

use dcalign::synthdata::{NOUNS, PALETTE};
use dcalign::text::{
    branch_source, clean_words, make_variants_with, mask_count, Lexicon, Lexicons, MaskKind, Tokenizer, Vocabulary, CLS,
    DEFAULT_MASK_KINDS, MASK, PAD,
};

const FILLER: [&str; 8] = ["a", "the", "with", "and", "wearing", "slim", "broad", "walking"];

fn tokenizer(max_len: usize) -> Tokenizer {
    let colors: Vec<&str> = PALETTE.iter().map(|(c, _)| *c).collect();
    let lex = Lexicons { colors: Lexicon::new(&colors), nouns: Lexicon::new(NOUNS) };
    let vocab = Vocabulary::build(colors.iter().copied().chain(NOUNS).chain(FILLER));
    Tokenizer::new(vocab, lex, max_len).unwrap()
}

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        (0..PALETTE.len()).prop_map(|i| PALETTE[i].0.to_string()),
        (0..NOUNS.len()).prop_map(|i| NOUNS[i].to_string()),
        (0..FILLER.len()).prop_map(|i| FILLER[i].to_string()),
        "[a-z]{1,6}",
    ]
}

/// Captions of up to 90 words, some uppercased or punctuated, with a noun
/// early enough to survive truncation.
fn caption() -> impl Strategy<Value = String> {
    (prop::collection::vec((word(), 0u8..6), 0..90), 0..NOUNS.len()).prop_map(|(ws, n)| {
        let mut parts: Vec<String> = ws
            .into_iter()
            .map(|(w, style)| match style {
                0 => w.to_uppercase(),
                1 => format!("{w}."),
                _ => w,
            })
            .collect();
        parts.insert(n.min(parts.len()), NOUNS[n].to_string());
        parts.join(" ")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn masking_contract(text in caption(), seed in any::<u64>(), max_len in prop_oneof![Just(77usize), 8usize..40]) {
        let tok = tokenizer(max_len);
        let caption = tok.tokenize(&text, 0, 0).unwrap();
        let erased = tok.erase_colors(&caption).unwrap();

        prop_assert_eq!(caption.tokens.len(), max_len);
        prop_assert_eq!(caption.tokens[0], CLS);
        prop_assert_eq!(caption.len(), clean_words(&text).len().min(max_len - 1) + 1);
        prop_assert!(caption.tokens[caption.len()..].iter().all(|&t| t == PAD));
        prop_assert!(!caption.color_positions.contains(&0) && !caption.noun_positions.contains(&0));
        prop_assert!(erased.color_positions.is_empty());

        let variants = make_variants_with(&caption, &erased, DEFAULT_MASK_KINDS, 0.15, seed).unwrap();
        prop_assert_eq!(&variants, &make_variants_with(&caption, &erased, DEFAULT_MASK_KINDS, 0.15, seed).unwrap());
        for v in &variants {
            let src = branch_source(v.kind, &caption, &erased);
            prop_assert_eq!(v.restore(), src.tokens.clone());
            prop_assert!(v.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(v.positions.iter().all(|&p| p >= 1 && p < src.len() && v.tokens[p] == MASK));
            let candidates = match (v.kind, v.fallback) {
                (MaskKind::Crm, false) => caption.color_positions.clone(),
                (MaskKind::Cum, false) => erased.noun_positions.clone(),
                _ => (1..src.len()).collect(),
            };
            prop_assert!(v.positions.iter().all(|p| candidates.contains(p)));
            // max(1, ceil(15 c / 100)) in integers
            prop_assert_eq!(v.num_masked(), (15 * candidates.len()).div_ceil(100).max(1));
        }
        prop_assert_eq!(variants[0].fallback, caption.color_positions.is_empty());
        prop_assert!(!variants[2].fallback);
    }

    #[test]
    fn mask_count_matches_integer_ceiling(percent in 1usize..100, candidates in 0usize..500) {
        let want = if candidates == 0 { 0 } else { (percent * candidates).div_ceil(100).max(1) };
        prop_assert_eq!(mask_count(percent as f64 / 100.0, candidates), want);
    }
}

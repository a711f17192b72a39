use std::collections::BTreeSet;

use proptest::prelude::*;

use dcalign::numerics::Tensor;
use dcalign::synthdata::{
    caption_for, generate_corpus, render_pair, AttributeVector, Carry, Challenge, CorpusSpec, Dataset, Figure,
    IdentitySpec, Split, PALETTE,
};

fn identity() -> impl Strategy<Value = IdentitySpec> {
    (
        0..PALETTE.len(),
        0..PALETTE.len(),
        0..PALETTE.len(),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![Carry::Backpack, Carry::Handbag, Carry::None]),
        prop::sample::select(Challenge::ALL.to_vec()),
    )
        .prop_map(|(shirt, pants, bag, broad, hat, carry, challenge)| IdentitySpec {
            identity_id: 0,
            shirt,
            pants,
            bag,
            figure: if broad { Figure::Broad } else { Figure::Slim },
            hat,
            carry,
            challenge,
        })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn color_mutation_never_touches_thermal(
        id in identity(),
        colors in (0..PALETTE.len(), 0..PALETTE.len(), 0..PALETTE.len()),
        seed in any::<u64>(),
        jitter in any::<bool>(),
    ) {
        let mut other = id.clone();
        (other.shirt, other.pants, other.bag) = colors;
        let (rgb_a, th_a) = render_pair(&id, id.challenge, 32, 16, seed, jitter);
        let (rgb_b, th_b) = render_pair(&other, other.challenge, 32, 16, seed, jitter);
        prop_assert_eq!(bits(&th_a), bits(&th_b));
        if id.shirt != other.shirt && id.challenge == Challenge::Normal {
            prop_assert!(rgb_a != rgb_b);
            prop_assert!(caption_for(&id, 0) != caption_for(&other, 0));
        }
    }

    #[test]
    fn shape_mutation_changes_thermal(id in identity(), seed in any::<u64>()) {
        let mut other = id.clone();
        other.hat = !id.hat;
        other.challenge = Challenge::Normal;
        let id = IdentitySpec { challenge: Challenge::Normal, carry: Carry::None, ..id };
        let other = IdentitySpec { carry: Carry::None, ..other };
        let (_, th_a) = render_pair(&id, Challenge::Normal, 32, 16, seed, false);
        let (_, th_b) = render_pair(&other, Challenge::Normal, 32, 16, seed, false);
        prop_assert!(th_a != th_b);
        prop_assert!(caption_for(&id, 0) != caption_for(&other, 0));
    }

    #[test]
    fn rendered_values_are_in_range(id in identity(), seed in any::<u64>()) {
        let (rgb, th) = render_pair(&id, id.challenge, 32, 16, seed, false);
        prop_assert_eq!(rgb.shape(), &[3, 32, 16]);
        prop_assert_eq!(th.shape(), &[3, 32, 16]);
        prop_assert!(rgb.data().iter().chain(th.data()).all(|v| (0.0..=1.0).contains(v)));
        if id.challenge == Challenge::Dark {
            let mean = rgb.data().iter().sum::<f64>() / rgb.numel() as f64;
            prop_assert!(mean < 0.1);
        }
        // thermal channels are replicated
        let plane = 32 * 16;
        prop_assert!((0..plane).all(|i| th.data()[i] == th.data()[i + plane] && th.data()[i] == th.data()[i + 2 * plane]));
    }

    #[test]
    fn captions_describe_their_identity(id in identity(), template in 0usize..16) {
        let text = caption_for(&id, template);
        let parsed = AttributeVector::from_caption(&text);
        prop_assert_eq!(parsed.matches(&id.attributes()), parsed.matches(&parsed));
    }
}

fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec { identities: 20, seed, ..CorpusSpec::default() }
}

#[test]
fn splits_are_identity_disjoint_and_stratified() {
    for seed in 0..5 {
        let d = generate_corpus(&small_spec(seed)).unwrap();
        let train: BTreeSet<usize> = d.identity_ids(Split::Train).into_iter().collect();
        let test: BTreeSet<usize> = d.identity_ids(Split::Test).into_iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 20);
        let ids: BTreeSet<usize> = d.identities.iter().map(|i| i.identity_id).collect();
        assert_eq!(ids.len(), d.identities.len());
        for tag in Challenge::ALL {
            let of_tag: Vec<&IdentitySpec> = d.identities.iter().filter(|i| i.challenge == tag).collect();
            if of_tag.len() >= 2 {
                assert!(of_tag.iter().any(|i| train.contains(&i.identity_id)), "{tag} has no training identity");
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let a = generate_corpus(&small_spec(3)).unwrap();
    assert_eq!(a, generate_corpus(&small_spec(3)).unwrap());
    assert_ne!(a, generate_corpus(&small_spec(4)).unwrap());
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.identities, a.identities);
    assert_eq!(back.lexicons, a.lexicons);
    for (x, y) in back.pairs.iter().zip(&a.pairs) {
        assert_eq!((x.pair_id, x.identity_id, x.split, x.challenge, &x.captions), (y.pair_id, y.identity_id, y.split, y.challenge, &y.captions));
        assert!(x.rgb.data().iter().zip(y.rgb.data()).all(|(p, q)| (p - q).abs() <= 1e-7));
        assert!(x.thermal.data().iter().zip(y.thermal.data()).all(|(p, q)| (p - q).abs() <= 1e-7));
    }
    // a second write of the re-read corpus is byte-identical
    let again = tempfile::tempdir().unwrap();
    back.write(again.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        let p = dir.path().join(&n);
        if p.is_file() {
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(again.path().join(&n)).unwrap(), "{n:?}");
        }
    }
}

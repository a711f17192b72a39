//! Procedural RGB-thermal person corpus with captions.
//!
//! Color attributes (shirt, pants, bag) are painted only into the RGB image;
//! shape attributes (figure, hat, carried object) only change silhouette
//! geometry, which both modalities share. The thermal image is therefore a
//! pure function of shape attributes and the pair's noise seed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, decode_tensor_f32, encode_tensor_f32};
use crate::numerics::Tensor;
use crate::text::{clean_words, Lexicon, Lexicons};

/// Color names and their RGB values.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("blue", [0.10, 0.25, 0.90]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.55, 0.10, 0.70]),
    ("orange", [1.00, 0.55, 0.00]),
];

/// Attribute nouns of the caption grammar.
pub const NOUNS: [&str; 6] = ["person", "shirt", "pants", "hat", "backpack", "handbag"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Challenge {
    Normal,
    LowLight,
    Glare,
    Occlusion,
    Dark,
}

impl Challenge {
    pub const ALL: [Challenge; 5] =
        [Challenge::Normal, Challenge::LowLight, Challenge::Glare, Challenge::Occlusion, Challenge::Dark];

    pub fn as_str(self) -> &'static str {
        match self {
            Challenge::Normal => "normal",
            Challenge::LowLight => "low-light",
            Challenge::Glare => "glare",
            Challenge::Occlusion => "occlusion",
            Challenge::Dark => "dark",
        }
    }
}

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Broad,
    Slim,
}

impl Figure {
    pub fn word(self) -> &'static str {
        match self {
            Figure::Broad => "broad",
            Figure::Slim => "slim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carry {
    Backpack,
    Handbag,
    None,
}

impl Carry {
    pub fn word(self) -> Option<&'static str> {
        match self {
            Carry::Backpack => Some("backpack"),
            Carry::Handbag => Some("handbag"),
            Carry::None => None,
        }
    }
}

/// Ground-truth attributes of one synthetic person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: usize,
    /// Palette indices.
    pub shirt: usize,
    pub pants: usize,
    pub bag: usize,
    pub figure: Figure,
    pub hat: bool,
    pub carry: Carry,
    pub challenge: Challenge,
}

/// Observable attributes; `None` means "not stated" (captions) and never
/// counts as a match.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    pub shirt: Option<usize>,
    pub pants: Option<usize>,
    pub bag: Option<usize>,
    pub figure: Option<Figure>,
    pub hat: Option<bool>,
    pub carry: Option<Carry>,
}

impl AttributeVector {
    /// Slots where both vectors state the same value.
    pub fn matches(&self, other: &AttributeVector) -> usize {
        fn eq<T: PartialEq>(a: &Option<T>, b: &Option<T>) -> usize {
            matches!((a, b), (Some(x), Some(y)) if x == y) as usize
        }
        eq(&self.shirt, &other.shirt)
            + eq(&self.pants, &other.pants)
            + eq(&self.bag, &other.bag)
            + eq(&self.figure, &other.figure)
            + eq(&self.hat, &other.hat)
            + eq(&self.carry, &other.carry)
    }

    /// Parses the caption grammar: a color word attaches to the noun after it.
    pub fn from_caption(text: &str) -> AttributeVector {
        let words = clean_words(text);
        let color = |w: &str| PALETTE.iter().position(|(name, _)| *name == w);
        let mut a = AttributeVector::default();
        if words.is_empty() {
            return a;
        }
        a.hat = Some(false);
        a.carry = Some(Carry::None);
        for (i, w) in words.iter().enumerate() {
            let prev = if i > 0 { color(&words[i - 1]) } else { None };
            match w.as_str() {
                "broad" => a.figure = Some(Figure::Broad),
                "slim" => a.figure = Some(Figure::Slim),
                "hat" => a.hat = Some(true),
                "shirt" => a.shirt = prev,
                "pants" => a.pants = prev,
                "backpack" | "handbag" => {
                    a.carry = Some(if w == "backpack" { Carry::Backpack } else { Carry::Handbag });
                    a.bag = prev;
                }
                _ => {}
            }
        }
        a
    }
}

impl IdentitySpec {
    pub fn attributes(&self) -> AttributeVector {
        AttributeVector {
            shirt: Some(self.shirt),
            pants: Some(self.pants),
            bag: (self.carry != Carry::None).then_some(self.bag),
            figure: Some(self.figure),
            hat: Some(self.hat),
            carry: Some(self.carry),
        }
    }

    /// Shape-only view, as a color-erased caption would describe it.
    pub fn shape_attributes(&self) -> AttributeVector {
        AttributeVector { shirt: None, pants: None, bag: None, ..self.attributes() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One registered visible/thermal pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbtPair {
    pub pair_id: usize,
    pub identity_id: usize,
    pub challenge: Challenge,
    pub split: Split,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `[3, H, W]`, channel-replicated intensity in `[0, 1]`.
    pub thermal: Tensor,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChallengeMix {
    pub normal: f64,
    pub low_light: f64,
    pub glare: f64,
    pub occlusion: f64,
    pub dark: f64,
}

impl Default for ChallengeMix {
    fn default() -> Self {
        ChallengeMix { normal: 0.6, low_light: 0.1, glare: 0.1, occlusion: 0.1, dark: 0.1 }
    }
}

impl ChallengeMix {
    fn weights(&self) -> [(Challenge, f64); 5] {
        [
            (Challenge::Normal, self.normal),
            (Challenge::LowLight, self.low_light),
            (Challenge::Glare, self.glare),
            (Challenge::Occlusion, self.occlusion),
            (Challenge::Dark, self.dark),
        ]
    }
}

/// Corpus generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Total identities across both splits.
    pub identities: usize,
    pub images_per_identity: usize,
    /// Probability that an image gets two captions instead of one.
    pub two_caption_fraction: f64,
    /// Fraction of identities (per challenge tag) assigned to training.
    pub train_fraction: f64,
    /// Overrides `train_fraction` with an exact test-identity count.
    pub test_identities: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub challenges: ChallengeMix,
    /// Shift the thermal image by one pixel against the RGB image.
    pub weak_alignment_jitter: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            identities: 91,
            images_per_identity: 2,
            two_caption_fraction: 0.69,
            train_fraction: 0.7,
            test_identities: None,
            height: 32,
            width: 16,
            challenges: ChallengeMix::default(),
            weak_alignment_jitter: false,
            seed: 0,
        }
    }
}

/// A generated corpus: identities, rendered pairs and lexicons.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: CorpusSpec,
    pub identities: Vec<IdentitySpec>,
    pub pairs: Vec<RgbtPair>,
    pub lexicons: Lexicons,
}

impl Dataset {
    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &RgbtPair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    pub fn identity(&self, id: usize) -> Option<&IdentitySpec> {
        self.identities.iter().find(|i| i.identity_id == id)
    }

    pub fn identity_ids(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.pairs_in(split).map(|p| p.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn captions(&self, split: Split) -> impl Iterator<Item = &str> {
        self.pairs_in(split).flat_map(|p| p.captions.iter().map(String::as_str))
    }
}

pub fn color_lexicon() -> Lexicon {
    Lexicon::new(PALETTE.iter().map(|(n, _)| *n))
}

pub fn noun_lexicon() -> Lexicon {
    Lexicon::new(NOUNS)
}

/// 64-bit mix of a seed with stream labels.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = splitmix(x ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits `total` into integer counts proportional to `weights`
/// (largest remainder, ties to the earlier entry).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn validate(spec: &CorpusSpec) -> Result<()> {
    if spec.identities < 2 {
        return Err(Error::Config(format!("need at least 2 identities, got {}", spec.identities)));
    }
    if spec.images_per_identity < 1 {
        return Err(Error::Config("images_per_identity must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.two_caption_fraction) {
        return Err(Error::Config("two_caption_fraction must lie in [0, 1]".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    if let Some(t) = spec.test_identities {
        if t > spec.identities {
            return Err(Error::Config(format!("{t} test identities requested but only {} exist", spec.identities)));
        }
        if t == 0 || t == spec.identities {
            return Err(Error::Config("both splits need at least one identity".into()));
        }
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::Config(format!("images of {}x{} are too small to render", spec.height, spec.width)));
    }
    let w = spec.challenges.weights();
    if w.iter().any(|(_, p)| !(*p >= 0.0)) || w.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 {
        return Err(Error::Config("challenge proportions must be non-negative with a positive sum".into()));
    }
    let combos = PALETTE.len() * PALETTE.len() * 2 * 2 * (1 + 2 * PALETTE.len());
    if spec.identities > combos {
        return Err(Error::Config(format!("at most {combos} distinct identities can be described")));
    }
    Ok(())
}

/// Draws identities with pairwise distinct observable attribute vectors.
fn sample_identities(spec: &CorpusSpec) -> Vec<IdentitySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    let weights = spec.challenges.weights();
    let counts = apportion(spec.identities, &weights.map(|(_, w)| w));
    let mut tags: Vec<Challenge> =
        weights.iter().zip(&counts).flat_map(|((c, _), &n)| std::iter::repeat_n(*c, n)).collect();
    tags.shuffle(&mut rng);

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.identities);
    while out.len() < spec.identities {
        let carry = [Carry::Backpack, Carry::Handbag, Carry::None][rng.random_range(0..3)];
        let id = IdentitySpec {
            identity_id: out.len(),
            shirt: rng.random_range(0..PALETTE.len()),
            pants: rng.random_range(0..PALETTE.len()),
            bag: rng.random_range(0..PALETTE.len()),
            figure: if rng.random::<bool>() { Figure::Broad } else { Figure::Slim },
            hat: rng.random::<bool>(),
            carry,
            challenge: tags[out.len()],
        };
        if seen.insert(id.attributes()) {
            out.push(id);
        }
    }
    out
}

/// Per challenge tag, the training share of its identities; totals match
/// the global fraction and each tag is within one identity of its share.
fn stratified_split(spec: &CorpusSpec, identities: &[IdentitySpec]) -> BTreeMap<usize, Split> {
    let n = identities.len();
    let test_total = spec
        .test_identities
        .unwrap_or_else(|| n - ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n - 1));
    let train_total = n - test_total;

    let mut by_tag: BTreeMap<Challenge, Vec<usize>> = BTreeMap::new();
    for id in identities {
        by_tag.entry(id.challenge).or_default().push(id.identity_id);
    }
    let tags: Vec<Challenge> = by_tag.keys().copied().collect();
    let sizes: Vec<f64> = tags.iter().map(|t| by_tag[t].len() as f64).collect();
    let mut train_counts = apportion(train_total, &sizes);
    // apportioning can exceed a tag's size only in degenerate mixes; clamp and
    // hand the surplus to tags with room
    let mut surplus = 0;
    for (i, t) in tags.iter().enumerate() {
        let cap = by_tag[t].len();
        if train_counts[i] > cap {
            surplus += train_counts[i] - cap;
            train_counts[i] = cap;
        }
    }
    for (i, t) in tags.iter().enumerate() {
        let room = by_tag[t].len() - train_counts[i];
        let give = room.min(surplus);
        train_counts[i] += give;
        surplus -= give;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2]));
    let mut split = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        let mut ids = by_tag[t].clone();
        ids.shuffle(&mut rng);
        for (k, id) in ids.into_iter().enumerate() {
            split.insert(id, if k < train_counts[i] { Split::Train } else { Split::Test });
        }
    }
    split
}

const TEMPLATES: usize = 3;

/// Caption `template` (0..3) describing `id`.
pub fn caption_for(id: &IdentitySpec, template: usize) -> String {
    let shirt = PALETTE[id.shirt].0;
    let pants = PALETTE[id.pants].0;
    let fig = id.figure.word();
    let (hat, carry) = match template % TEMPLATES {
        1 => (" and a hat", id.carry.word().map(|c| format!(" and holds a {} {c}", PALETTE[id.bag].0))),
        _ => (" with a hat", id.carry.word().map(|c| format!(" carrying a {} {c}", PALETTE[id.bag].0))),
    };
    let hat = if id.hat { hat } else { "" };
    let carry = carry.unwrap_or_default();
    match template % TEMPLATES {
        0 => format!("a {fig} person wearing a {shirt} shirt and {pants} pants{hat}{carry}"),
        1 => format!("the {fig} person has a {shirt} shirt and {pants} pants{hat}{carry}"),
        _ => format!("{fig} person in a {shirt} shirt and {pants} pants{hat}{carry}"),
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { h, w, data: vec![0.0; 3 * h * w] }
    }

    fn set(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        for (ch, v) in rgb.iter().enumerate() {
            self.data[ch * self.h * self.w + r * self.w + c] = *v;
        }
    }

    fn rect(&mut self, r0: f64, r1: f64, c0: f64, c1: f64, rgb: [f64; 3]) {
        let clip = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        let (r0, r1) = (clip(r0, self.h), clip(r1, self.h));
        let (c0, c1) = (clip(c0, self.w), clip(c1, self.w));
        for r in r0..r1 {
            for c in c0..c1 {
                self.set(r, c, rgb);
            }
        }
    }

    fn map(&mut self, mut f: impl FnMut(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Clamped to `[0, 1]` and rounded through `f32`, matching the on-disk form.
    fn finish(self) -> Tensor {
        let data = self.data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64).collect();
        Tensor::new(vec![3, self.h, self.w], data).expect("canvas shape")
    }
}

/// Body part rectangles `(r0, r1, c0, c1)` in pixels.
struct Silhouette {
    hat: Option<[f64; 4]>,
    head: [f64; 4],
    torso: [f64; 4],
    legs: [f64; 4],
    bag: Option<[f64; 4]>,
}

fn silhouette(id: &IdentitySpec, h: usize, w: usize, dx: f64, dy: f64) -> Silhouette {
    let (h, w) = (h as f64, w as f64);
    let cx = w / 2.0 + dx;
    let (torso_half, leg_half) = match id.figure {
        Figure::Broad => (0.34 * w, 0.28 * w),
        Figure::Slim => (0.20 * w, 0.16 * w),
    };
    let bag_w = 0.19 * w;
    Silhouette {
        hat: id.hat.then_some([dy, 0.08 * h + dy, cx - 0.19 * w, cx + 0.19 * w]),
        head: [0.08 * h + dy, 0.2 * h + dy, cx - 0.13 * w, cx + 0.13 * w],
        torso: [0.2 * h + dy, 0.56 * h + dy, cx - torso_half, cx + torso_half],
        legs: [0.56 * h + dy, 0.97 * h + dy, cx - leg_half, cx + leg_half],
        bag: match id.carry {
            Carry::Backpack => Some([0.22 * h + dy, 0.48 * h + dy, cx + torso_half, cx + torso_half + bag_w]),
            Carry::Handbag => Some([0.48 * h + dy, 0.66 * h + dy, cx - torso_half - bag_w, cx - torso_half]),
            Carry::None => None,
        },
    }
}

const SKIN: [f64; 3] = [0.85, 0.68, 0.55];
const HAT_RGB: [f64; 3] = [0.30, 0.22, 0.15];

/// Renders the RGB and thermal images of one pair. Every random draw comes
/// from streams keyed by `pair_seed`; none depends on color attributes.
pub fn render_pair(
    id: &IdentitySpec,
    challenge: Challenge,
    height: usize,
    width: usize,
    pair_seed: u64,
    jitter: bool,
) -> (Tensor, Tensor) {
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(pair_seed, &[k]));
    let mut geo = stream(1);
    let dx = geo.random_range(-1i32..=1) as f64;
    let dy = geo.random_range(0i32..=1) as f64;
    let body = silhouette(id, height, width, dx, dy);

    // RGB
    let mut rgb = Canvas::new(height, width);
    let mut bg = stream(2);
    for r in 0..height {
        for c in 0..width {
            let base = bg.random_range(0.35..0.55);
            rgb.set(r, c, [base + bg.random_range(-0.04..0.04), base, base + bg.random_range(-0.04..0.04)]);
        }
    }
    let rect = |cv: &mut Canvas, b: [f64; 4], col: [f64; 3]| cv.rect(b[0], b[1], b[2], b[3], col);
    rect(&mut rgb, body.legs, PALETTE[id.pants].1);
    rect(&mut rgb, body.torso, PALETTE[id.shirt].1);
    rect(&mut rgb, body.head, SKIN);
    if let Some(b) = body.hat {
        rect(&mut rgb, b, HAT_RGB);
    }
    if let Some(b) = body.bag {
        rect(&mut rgb, b, PALETTE[id.bag].1);
    }
    let pixel_noise = Normal::new(0.0, 0.03).unwrap();
    rgb.map(|v| v + pixel_noise.sample(&mut bg));

    // thermal
    let mut th = Canvas::new(height, width);
    let mut tn = stream(3);
    for r in 0..height {
        for c in 0..width {
            let v = 0.15 + tn.random_range(0.0..0.1);
            th.set(r, c, [v; 3]);
        }
    }
    let (tdx, tdy) = if jitter {
        let mut j = stream(5);
        (j.random_range(-1i32..=1) as f64, j.random_range(-1i32..=1) as f64)
    } else {
        (0.0, 0.0)
    };
    let shift = |b: [f64; 4]| [b[0] + tdy, b[1] + tdy, b[2] + tdx, b[3] + tdx];
    rect(&mut th, shift(body.legs), [0.72; 3]);
    rect(&mut th, shift(body.torso), [0.85; 3]);
    rect(&mut th, shift(body.head), [0.95; 3]);
    if let Some(b) = body.hat {
        rect(&mut th, shift(b), [0.55; 3]);
    }
    if let Some(b) = body.bag {
        rect(&mut th, shift(b), [0.40; 3]);
    }
    let thermal_noise = Normal::new(0.0, 0.02).unwrap();
    // channel-replicated: one draw per pixel
    let plane = height * width;
    let draws: Vec<f64> = (0..plane).map(|_| thermal_noise.sample(&mut tn)).collect();
    for (i, v) in th.data.iter_mut().enumerate() {
        *v += draws[i % plane];
    }

    // challenge corruptions
    let mut cr = stream(4);
    let (h, w) = (height as f64, width as f64);
    match challenge {
        Challenge::Normal => {}
        Challenge::LowLight => {
            let n = Normal::new(0.0, 0.01).unwrap();
            rgb.map(|v| v.clamp(0.0, 1.0) * 0.15 + n.sample(&mut cr));
        }
        Challenge::Glare => {
            let (gh, gw) = ((0.2 * h).round(), (0.33 * w).round());
            let r0 = cr.random_range(0.0..=(h - gh)).floor();
            let c0 = cr.random_range(0.0..=(w - gw)).floor();
            rgb.rect(r0, r0 + gh, c0, c0 + gw, [1.0; 3]);
        }
        Challenge::Occlusion => {
            let (oh, ow) = ((0.19 * h).round(), (0.375 * w).round());
            let r0 = cr.random_range(0.0..=(h - oh)).floor();
            let c0 = cr.random_range(0.0..=(w - ow)).floor();
            rgb.rect(r0, r0 + oh, c0, c0 + ow, [0.0; 3]);
            th.rect(r0, r0 + oh, c0, c0 + ow, [0.0; 3]);
        }
        Challenge::Dark => rgb.map(|v| v.clamp(0.0, 1.0) * 0.02),
    }
    (rgb.finish(), th.finish())
}

/// Generates identities, splits them 7:3 per challenge tag, renders every
/// pair and writes captions from the grammar.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    validate(spec)?;
    let identities = sample_identities(spec);
    let split = stratified_split(spec, &identities);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[3]));
    let mut pairs = Vec::new();
    for id in &identities {
        for _ in 0..spec.images_per_identity {
            let pair_id = pairs.len();
            let pair_seed = derive_seed(spec.seed, &[4, pair_id as u64]);
            let (rgb, thermal) =
                render_pair(id, id.challenge, spec.height, spec.width, pair_seed, spec.weak_alignment_jitter);
            let n_caps = if rng.random::<f64>() < spec.two_caption_fraction { 2 } else { 1 };
            let first = rng.random_range(0..TEMPLATES);
            let captions = (0..n_caps).map(|k| caption_for(id, first + k)).collect();
            pairs.push(RgbtPair {
                pair_id,
                identity_id: id.identity_id,
                challenge: id.challenge,
                split: split[&id.identity_id],
                rgb,
                thermal,
                captions,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        identities,
        pairs,
        lexicons: Lexicons { colors: color_lexicon(), nouns: noun_lexicon() },
    })
}

/// Retrieval upper bound from ground-truth attributes: the gallery is ranked
/// by how many caption-stated attributes each item's identity matches. Ties
/// are broken by a fixed seeded permutation, so an uninformative caption
/// scores at chance level.
pub fn oracle_retrieval(dataset: &Dataset) -> Result<crate::eval::RetrievalReport> {
    oracle_retrieval_with(dataset, |c| c.to_string())
}

/// [`oracle_retrieval`] after rewriting every test caption with `edit`.
pub fn oracle_retrieval_with(dataset: &Dataset, edit: impl Fn(&str) -> String) -> Result<crate::eval::RetrievalReport> {
    use crate::eval::{rank_by_scores, RetrievalReport};
    let gallery: Vec<&RgbtPair> = dataset.pairs_in(Split::Test).collect();
    if gallery.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let attrs: Vec<AttributeVector> = gallery
        .iter()
        .map(|p| dataset.identity(p.identity_id).map(IdentitySpec::attributes))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Data("pair references unknown identity".into()))?;
    let gallery_ids: Vec<usize> = gallery.iter().map(|p| p.identity_id).collect();

    // tie-break order: a seeded shuffle of gallery positions
    let mut perm: Vec<usize> = (0..gallery.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(dataset.spec.seed, &[5])));
    let tiebreak_ids: Vec<usize> = {
        let mut ids = vec![0; gallery.len()];
        for (rank, &pos) in perm.iter().enumerate() {
            ids[pos] = rank;
        }
        ids
    };

    let mut rankings = Vec::new();
    let mut query_ids = Vec::new();
    let mut tags = Vec::new();
    for p in &gallery {
        for c in &p.captions {
            let q = AttributeVector::from_caption(&edit(c));
            let scores: Vec<f64> = attrs.iter().map(|a| q.matches(a) as f64).collect();
            rankings.push(rank_by_scores(&scores, &tiebreak_ids));
            query_ids.push(p.identity_id);
            tags.push(p.challenge);
        }
    }
    RetrievalReport::from_rankings(&rankings, &gallery_ids, &query_ids, Some(&tags))
}

// ----- on-disk form -------------------------------------------------------

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub pair_id: usize,
    pub identity_id: usize,
    pub split: Split,
    pub challenge: Challenge,
    pub rgb_path: String,
    pub thermal_path: String,
    pub captions: Vec<String>,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const IDENTITIES: &str = "identities.jsonl";
pub const COLOR_LEXICON: &str = "colors.txt";
pub const NOUN_LEXICON: &str = "nouns.txt";
pub const CORPUS_SPEC: &str = "corpus.toml";

impl Dataset {
    /// Writes manifest, identities, lexicons, spec and tensor files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("tensors"))?;
        let mut manifest = String::new();
        for p in &self.pairs {
            let rgb_path = format!("tensors/{:05}_rgb.dctn", p.pair_id);
            let thermal_path = format!("tensors/{:05}_thermal.dctn", p.pair_id);
            atomic_write(&dir.join(&rgb_path), &encode_tensor_f32(&p.rgb))?;
            atomic_write(&dir.join(&thermal_path), &encode_tensor_f32(&p.thermal))?;
            let rec = ManifestRecord {
                pair_id: p.pair_id,
                identity_id: p.identity_id,
                split: p.split,
                challenge: p.challenge,
                rgb_path,
                thermal_path,
                captions: p.captions.clone(),
            };
            manifest.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
            manifest.push('\n');
        }
        let mut ids = String::new();
        for id in &self.identities {
            ids.push_str(&serde_json::to_string(id).map_err(|e| Error::Format(e.to_string()))?);
            ids.push('\n');
        }
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&dir.join(MANIFEST), manifest.as_bytes())?;
        atomic_write(&dir.join(IDENTITIES), ids.as_bytes())?;
        atomic_write(&dir.join(COLOR_LEXICON), self.lexicons.colors.to_file_string().as_bytes())?;
        atomic_write(&dir.join(NOUN_LEXICON), self.lexicons.nouns.to_file_string().as_bytes())?;
        atomic_write(&dir.join(CORPUS_SPEC), spec.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let spec: CorpusSpec = toml::from_str(&read(CORPUS_SPEC)?).map_err(|e| Error::Data(e.to_string()))?;
        let identities = read(IDENTITIES)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{IDENTITIES}: {e}"))))
            .collect::<Result<Vec<IdentitySpec>>>()?;
        let mut pairs = Vec::new();
        for (n, line) in read(MANIFEST)?.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let rec: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("{MANIFEST} line {}: {e}", n + 1)))?;
            let load = |rel: &str| -> Result<Tensor> {
                let path: PathBuf = dir.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                decode_tensor_f32(&bytes)
            };
            pairs.push(RgbtPair {
                pair_id: rec.pair_id,
                identity_id: rec.identity_id,
                challenge: rec.challenge,
                split: rec.split,
                rgb: load(&rec.rgb_path)?,
                thermal: load(&rec.thermal_path)?,
                captions: rec.captions,
            });
        }
        let lexicons = Lexicons {
            colors: Lexicon::parse(&read(COLOR_LEXICON)?)?,
            nouns: Lexicon::parse(&read(NOUN_LEXICON)?)?,
        };
        Ok(Dataset { spec, identities, pairs, lexicons })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec { identities: 20, seed, ..CorpusSpec::default() }
    }

    #[test]
    fn apportion_sums_and_rounds() {
        assert_eq!(apportion(91, &[0.6, 0.1, 0.1, 0.1, 0.1]), vec![55, 9, 9, 9, 9]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(5, &[0.0, 1.0]), vec![0, 5]);
    }

    #[test]
    fn default_split_has_64_training_identities() {
        let ds = generate_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(ds.identity_ids(Split::Train).len(), 64);
        assert_eq!(ds.identity_ids(Split::Test).len(), 27);
    }

    #[test]
    fn caption_round_trips_through_parser() {
        let ds = generate_corpus(&small_spec(3)).unwrap();
        for p in &ds.pairs {
            let truth = ds.identity(p.identity_id).unwrap().attributes();
            for c in &p.captions {
                assert_eq!(AttributeVector::from_caption(c), truth, "{c}");
            }
        }
    }

    #[test]
    fn caption_colors_are_in_lexicon() {
        let ds = generate_corpus(&small_spec(4)).unwrap();
        let palette: HashSet<&str> = PALETTE.iter().map(|(n, _)| *n).collect();
        for c in ds.captions(Split::Train).chain(ds.captions(Split::Test)) {
            for w in clean_words(c) {
                if palette.contains(w.as_str()) {
                    assert!(ds.lexicons.colors.contains(&w));
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let too_many_test = CorpusSpec { identities: 10, test_identities: Some(11), ..CorpusSpec::default() };
        assert!(matches!(generate_corpus(&too_many_test), Err(Error::Config(_))));
        let one = CorpusSpec { identities: 1, ..CorpusSpec::default() };
        assert!(generate_corpus(&one).is_err());
        let no_images = CorpusSpec { images_per_identity: 0, ..CorpusSpec::default() };
        assert!(generate_corpus(&no_images).is_err());
    }

    #[test]
    fn dark_rgb_is_dim() {
        let id = IdentitySpec {
            identity_id: 0,
            shirt: 5,
            pants: 5,
            bag: 5,
            figure: Figure::Broad,
            hat: true,
            carry: Carry::Backpack,
            challenge: Challenge::Dark,
        };
        let (rgb, _) = render_pair(&id, Challenge::Dark, 32, 16, 11, false);
        let mean = rgb.data().iter().sum::<f64>() / rgb.numel() as f64;
        assert!(mean < 0.1);
    }
}

//! Visual token fusion: addition, concatenation + projection, and adaptive
//! token fusion (ATF).
//!
//! ATF computes
//!
//! ```text
//! V' = drop(gelu(V Wv + bv))      T' = drop(gelu(T Wt + bt))      J = [V' | T']
//! w  = sigmoid(gelu(J W1 + b1) W2 + b2)
//! F  = w * V + (1 - w) * T + gelu(J R1 + c1) R2 + c2
//! ```
//!
//! with the convex combination over the untransformed inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{init_linear, linear};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const ATF_PREFIX: &str = "fusion.atf.";
pub const CAT_PREFIX: &str = "fusion.cat.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Add,
    Cat,
    Atf,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionKind::Add => "add",
            FusionKind::Cat => "cat",
            FusionKind::Atf => "atf",
        })
    }
}

/// Granularity of the ATF mixing weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtfWeightMode {
    /// One weight per token and channel.
    Element,
    /// One weight per token, shared across channels.
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtfConfig {
    pub dropout: f64,
    pub weight_mode: AtfWeightMode,
}

impl Default for AtfConfig {
    fn default() -> Self {
        AtfConfig { dropout: 0.1, weight_mode: AtfWeightMode::Element }
    }
}

pub fn init_cat(store: &mut ParamStore, d: usize, rng: &mut impl Rng) {
    init_linear(store, "fusion.cat.proj", 2 * d, d, rng);
}

/// Output layers of both branches start at zero, so the initial module
/// returns `(V + T) / 2`.
pub fn init_atf(store: &mut ParamStore, d: usize, cfg: &AtfConfig, rng: &mut impl Rng) {
    init_linear(store, "fusion.atf.tv", d, d, rng);
    init_linear(store, "fusion.atf.tt", d, d, rng);
    init_linear(store, "fusion.atf.w1", 2 * d, d, rng);
    let w_out = match cfg.weight_mode {
        AtfWeightMode::Element => d,
        AtfWeightMode::Token => 1,
    };
    store.init_const("fusion.atf.w2.w", &[d, w_out], 0.0);
    store.init_const("fusion.atf.w2.b", &[w_out], 0.0);
    init_linear(store, "fusion.atf.r1", 2 * d, d, rng);
    store.init_const("fusion.atf.r2.w", &[d, d], 0.0);
    store.init_const("fusion.atf.r2.b", &[d], 0.0);
}

fn same_shape(tape: &Tape<'_>, v: Var, t: Var, op: &'static str) -> Result<()> {
    if tape.value(v).shape() != tape.value(t).shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.value(v).shape(), tape.value(t).shape())));
    }
    Ok(())
}

pub fn fuse_add(tape: &mut Tape<'_>, v: Var, t: Var) -> Result<Var> {
    tape.add(v, t)
}

pub fn fuse_cat(tape: &mut Tape<'_>, v: Var, t: Var) -> Result<Var> {
    same_shape(tape, v, t, "fuse_cat")?;
    let j = tape.concat_cols(&[v, t])?;
    linear(tape, j, "fusion.cat.proj")
}

/// Intermediate ATF values, exposed for inspection.
pub struct AtfParts {
    pub weight: Var,
    pub refine: Var,
    pub fused: Var,
}

pub fn fuse_atf(tape: &mut Tape<'_>, v: Var, t: Var, cfg: &AtfConfig) -> Result<Var> {
    Ok(fuse_atf_parts(tape, v, t, cfg, true)?.fused)
}

/// ATF with an option to drop the refinement branch.
pub fn fuse_atf_parts(tape: &mut Tape<'_>, v: Var, t: Var, cfg: &AtfConfig, refine: bool) -> Result<AtfParts> {
    same_shape(tape, v, t, "fuse_atf")?;
    let vt = linear(tape, v, "fusion.atf.tv")?;
    let vt = tape.quick_gelu(vt)?;
    let vt = tape.dropout(vt, cfg.dropout)?;
    let tt = linear(tape, t, "fusion.atf.tt")?;
    let tt = tape.quick_gelu(tt)?;
    let tt = tape.dropout(tt, cfg.dropout)?;
    let j = tape.concat_cols(&[vt, tt])?;

    let h = linear(tape, j, "fusion.atf.w1")?;
    let h = tape.quick_gelu(h)?;
    let logits = linear(tape, h, "fusion.atf.w2")?;
    let w = tape.sigmoid(logits)?;

    // w*V + (1-w)*T = T + w*(V - T)
    let diff = tape.sub(v, t)?;
    let mixed = match cfg.weight_mode {
        AtfWeightMode::Element => tape.mul(w, diff)?,
        AtfWeightMode::Token => tape.mul_col(diff, w)?,
    };
    let convex = tape.add(t, mixed)?;

    let r = linear(tape, j, "fusion.atf.r1")?;
    let r = tape.quick_gelu(r)?;
    let r = linear(tape, r, "fusion.atf.r2")?;
    let fused = if refine { tape.add(convex, r)? } else { convex };
    Ok(AtfParts { weight: w, refine: r, fused })
}

/// Dispatches on `kind`.
pub fn fuse(tape: &mut Tape<'_>, kind: FusionKind, v: Var, t: Var, atf: &AtfConfig) -> Result<Var> {
    match kind {
        FusionKind::Add => fuse_add(tape, v, t),
        FusionKind::Cat => fuse_cat(tape, v, t),
        FusionKind::Atf => fuse_atf(tape, v, t, atf),
    }
}

/// Constant helper: elementwise `[min, max]` bounds of two tensors.
pub fn elementwise_bounds(a: &Tensor, b: &Tensor) -> Vec<(f64, f64)> {
    a.data().iter().zip(b.data()).map(|(x, y)| (x.min(*y), x.max(*y))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = rand_t(&mut rng, 3, 4);
        let t = rand_t(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let zero = tape.constant(Tensor::zeros(vec![3, 4]));
        let f = fuse_add(&mut tape, vv, zero).unwrap();
        assert_eq!(tape.value(f), &v);
        let neg = tape.constant(v.map(|x| -x));
        let f = fuse_add(&mut tape, vv, neg).unwrap();
        assert!(tape.value(f).data().iter().all(|&x| x == 0.0));
        let f = fuse_add(&mut tape, vv, tv).unwrap();
        for i in 0..12 {
            assert_eq!(tape.value(f).data()[i], v.data()[i] + t.data()[i]);
        }
    }

    fn cat_store(d: usize, right: f64) -> ParamStore {
        // proj = [I | right * I]
        let mut w = vec![0.0; 2 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
            w[(d + i) * d + i] = right;
        }
        let mut s = ParamStore::new();
        s.insert("fusion.cat.proj.w", Tensor::new(vec![2 * d, d], w).unwrap());
        s.insert("fusion.cat.proj.b", Tensor::zeros(vec![d]));
        s
    }

    #[test]
    fn cat_selector_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (v, t) = (rand_t(&mut rng, 2, 3), rand_t(&mut rng, 2, 3));
        for (right, expect_sum) in [(0.0, false), (1.0, true)] {
            let store = cat_store(3, right);
            let mut tape = Tape::with_params(&store, Trainable::Nothing);
            let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
            let f = fuse_cat(&mut tape, vv, tv).unwrap();
            for i in 0..6 {
                let want = if expect_sum { v.data()[i] + t.data()[i] } else { v.data()[i] };
                assert!((tape.value(f).data()[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cat_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, n) = (3, 4);
        let (v, t) = (rand_t(&mut rng, n, d), rand_t(&mut rng, n, d));
        let w = rand_t(&mut rng, 2 * d, d);
        let b = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut store = ParamStore::new();
        store.insert("fusion.cat.proj.w", w.clone());
        store.insert("fusion.cat.proj.b", b.clone());
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let f = fuse_cat(&mut tape, vv, tv).unwrap();
        for r in 0..n {
            for c in 0..d {
                let mut acc = b.data()[c];
                for k in 0..d {
                    acc += v.at(r, k) * w.at(k, c) + t.at(r, k) * w.at(d + k, c);
                }
                assert!((tape.value(f).at(r, c) - acc).abs() < 1e-12);
            }
        }
    }

    fn atf_store(d: usize, seed: u64, mode: AtfWeightMode) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_atf(&mut store, d, &AtfConfig { dropout: 0.0, weight_mode: mode }, &mut rng);
        store
    }

    #[test]
    fn atf_initial_output_is_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v, t) = (rand_t(&mut rng, 5, 4), rand_t(&mut rng, 5, 4));
        let store = atf_store(4, 0, AtfWeightMode::Element);
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let f = fuse_atf(&mut tape, vv, tv, &AtfConfig::default()).unwrap();
        for i in 0..20 {
            assert!((tape.value(f).data()[i] - 0.5 * (v.data()[i] + t.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn atf_branch_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (v, t) = (rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 4));
        // w forced to 1 by a large bias on the sigmoid branch, refine at its zero init
        let mut store = atf_store(4, 1, AtfWeightMode::Element);
        store.insert("fusion.atf.w2.b", Tensor::full(vec![4], 1e3));
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let f = fuse_atf(&mut tape, vv, tv, &AtfConfig::default()).unwrap();
        for i in 0..12 {
            assert!((tape.value(f).data()[i] - v.data()[i]).abs() < 1e-12);
        }
        // w = 0.5 and V = T gives V
        let store = atf_store(4, 1, AtfWeightMode::Element);
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let vv = tape.constant(v.clone());
        let f = fuse_atf(&mut tape, vv, vv, &AtfConfig::default()).unwrap();
        for i in 0..12 {
            assert!((tape.value(f).data()[i] - v.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn atf_without_refine_is_convex() {
        for mode in [AtfWeightMode::Element, AtfWeightMode::Token] {
            for seed in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let (v, t) = (rand_t(&mut rng, 4, 6), rand_t(&mut rng, 4, 6));
                let mut store = atf_store(6, seed, mode);
                let out = if mode == AtfWeightMode::Element { 6 } else { 1 };
                store.insert("fusion.atf.w2.w", rand_t(&mut rng, 6, out).map(|x| 3.0 * x));
                let mut tape = Tape::with_params(&store, Trainable::Nothing);
                let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
                let cfg = AtfConfig { dropout: 0.1, weight_mode: mode };
                let parts = fuse_atf_parts(&mut tape, vv, tv, &cfg, false).unwrap();
                for (x, (lo, hi)) in tape.value(parts.fused).data().iter().zip(elementwise_bounds(&v, &t)) {
                    assert!(*x >= lo - 1e-15 && *x <= hi + 1e-15);
                }
                assert!(tape.value(parts.weight).data().iter().all(|&w| w > 0.0 && w < 1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let store = atf_store(4, 0, AtfWeightMode::Element);
        let mut tape = Tape::with_params(&store, Trainable::Nothing);
        let v = tape.constant(Tensor::zeros(vec![3, 4]));
        let t = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(fuse_atf(&mut tape, v, t, &AtfConfig::default()).is_err());
        assert!(fuse_add(&mut tape, v, t).is_err());
    }
}

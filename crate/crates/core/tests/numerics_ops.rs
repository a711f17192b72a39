//! Op-level gradient checks and numeric invariants of the tape.

use dcalign::numerics::{cosine_sim, grad_check, Tape, Tensor, Var};
use dcalign::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with a fixed random weighting so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, &shape);
    let wy = t.mul_const(y, &w)?;
    t.sum(wy)
}

fn check_unary(name: &str, shape: &[usize], op: impl Fn(&mut Tape<'_>, Var) -> Result<Var> + Copy) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, shape);
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                weighted_sum(t, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "{name}: seed {seed} rel err {err:e}");
    }
}

/// Binary ops: the second operand is a fixed random constant packed in the
/// same leaf as the first so both sides are checked.
fn check_binary(
    name: &str,
    a_shape: &[usize],
    b_shape: &[usize],
    op: impl Fn(&mut Tape<'_>, Var, Var) -> Result<Var> + Copy,
) {
    let na: usize = a_shape.iter().product();
    let nb: usize = b_shape.iter().product();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let packed = random(&mut rng, &[1, na + nb]);
        let err = grad_check(
            |t, x| {
                let a = t.slice_cols(x, 0, na)?;
                let a = reshape(t, a, a_shape)?;
                let b = t.slice_cols(x, na, na + nb)?;
                let b = reshape(t, b, b_shape)?;
                let y = op(t, a, b)?;
                weighted_sum(t, y, seed)
            },
            &packed,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "{name}: seed {seed} rel err {err:e}");
    }
}

/// Reshape a `[1, n]` row into `shape` using only differentiable row slices.
fn reshape(t: &mut Tape<'_>, row: Var, shape: &[usize]) -> Result<Var> {
    match shape {
        [n] => {
            assert_eq!(t.value(row).numel(), *n);
            Ok(row)
        }
        [r, c] => {
            let rows: Vec<Var> = (0..*r).map(|i| t.slice_cols(row, i * c, (i + 1) * c)).collect::<Result<_>>()?;
            t.concat_rows(&rows)
        }
        _ => unreachable!(),
    }
}

#[test]
fn matmul_family() {
    check_binary("matmul", &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b));
    check_binary("matmul_nt", &[3, 4], &[5, 4], |t, a, b| t.matmul_nt(a, b));
    check_unary("transpose", &[3, 2], |t, x| t.transpose(x));
}

#[test]
fn elementwise_binary() {
    check_binary("add", &[2, 3], &[2, 3], |t, a, b| t.add(a, b));
    check_binary("sub", &[2, 3], &[2, 3], |t, a, b| t.sub(a, b));
    check_binary("mul", &[2, 3], &[2, 3], |t, a, b| t.mul(a, b));
    check_binary("add_row", &[3, 4], &[4], |t, a, b| t.add_row(a, b));
    check_binary("mul_col", &[3, 4], &[3, 1], |t, a, b| t.mul_col(a, b));
}

#[test]
fn elementwise_unary() {
    check_unary("scale", &[2, 3], |t, x| t.scale(x, -0.7));
    check_unary("quick_gelu", &[2, 5], |t, x| t.quick_gelu(x));
    check_unary("sigmoid", &[2, 5], |t, x| t.sigmoid(x));
    check_unary("add_const", &[2, 2], |t, x| t.add_const(x, &Tensor::full(vec![2, 2], 0.3)));
}

#[test]
fn structural() {
    check_binary("concat_cols", &[2, 3], &[2, 5], |t, a, b| t.concat_cols(&[a, b]));
    check_binary("concat_rows", &[2, 3], &[4, 3], |t, a, b| t.concat_rows(&[a, b]));
    check_unary("slice_cols", &[3, 5], |t, x| t.slice_cols(x, 1, 4));
    check_unary("slice_rows", &[4, 3], |t, x| t.slice_rows(x, 1, 3));
    check_unary("gather_rows", &[4, 3], |t, x| t.gather_rows(x, &[2, 0, 2]));
    check_unary("pick", &[3, 3], |t, x| t.pick(x, &[(0, 1), (2, 2), (0, 1)]));
    check_unary("sum", &[2, 3], |t, x| t.sum(x));
    check_unary("mean", &[2, 3], |t, x| t.mean(x));
}

#[test]
fn normalizers() {
    check_unary("softmax", &[3, 4], |t, x| t.softmax_rows(x, 0.5));
    check_unary("softmax_axis0", &[3, 4], |t, x| t.softmax(x, 0, 1.0));
    check_unary("softmax_masked", &[3, 4], |t, x| t.softmax_rows_masked(x, 1.0, Some(&[true, false, true, true])));
    check_unary("log_softmax", &[3, 4], |t, x| t.log_softmax_rows(x, 0.07));
    check_unary("normalize_rows", &[3, 4], |t, x| t.normalize_rows(x));
    check_binary("layer_norm", &[3, 4], &[8], |t, x, gb| {
        let g = t.slice_cols(gb, 0, 4)?;
        let b = t.slice_cols(gb, 4, 8)?;
        t.layer_norm(x, g, b)
    });
    check_binary("cosine_matrix", &[3, 4], &[2, 4], |t, a, b| t.cosine_matrix(a, b));
}

#[test]
fn dropout_with_fixed_mask() {
    // With a fixed mask dropout is linear: gradient is the mask itself.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]);
        let mut tape = Tape::new().training(seed);
        let xv = tape.leaf(x.clone());
        let y = tape.dropout(xv, 0.3).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(&tape, xv);
        let kept: Vec<f64> = tape.value(y).data().to_vec();
        for ((gi, yi), xi) in g.data().iter().zip(&kept).zip(x.data()) {
            if *yi == 0.0 {
                assert_eq!(*gi, 0.0);
            } else {
                assert!((gi - 1.0 / 0.7).abs() < 1e-12);
                assert!((yi - xi / 0.7).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = t.constant(Tensor::identity(2));
    let p = t.matmul(a, i).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    assert_eq!(t.scalar(s), 6.0);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let u = t.constant(Tensor::zeros(vec![2, 3]));
    let v = t.constant(Tensor::zeros(vec![2, 5]));
    let c = t.concat_cols(&[u, v]).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 8]);

    let bad = t.constant(Tensor::zeros(vec![3, 3]));
    assert!(t.matmul(a, bad).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let s = t.softmax_rows(x, 1.0).unwrap();
    for v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = t.softmax_rows(x, 1.0).unwrap();
    assert_eq!(t.value(s).data(), &[1.0, 0.0]);
    let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let s = t.softmax_rows(x, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((t.value(s).data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((t.value(s).data()[0] - 0.7311).abs() < 1e-4);
    assert!((t.value(s).data()[1] - 0.2689).abs() < 1e-4);
    assert!(t.softmax_rows(x, 0.0).is_err());
    assert!(t.softmax_rows(x, -1.0).is_err());
    t.check_finite().unwrap();
}

#[test]
fn quick_gelu_and_dropout_identities() {
    let mut t = Tape::new().training(1);
    let z = t.constant(Tensor::scalar(0.0));
    let q = t.quick_gelu(z).unwrap();
    assert_eq!(t.scalar(q), 0.0);
    let x = t.constant(Tensor::vector(vec![0.5, -2.0, 3.0]));
    let d = t.dropout(x, 0.0).unwrap();
    assert_eq!(t.value(d), t.value(x));
    assert!(t.dropout(x, 1.0).is_err());

    let mut eval = Tape::new();
    let x = eval.constant(Tensor::vector(vec![0.5, -2.0, 3.0]));
    let d = eval.dropout(x, 0.5).unwrap();
    assert_eq!(d, x);
}

#[test]
fn backward_visits_in_reverse_creation_order() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.3, -0.2]));
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let w = t.scale(z, 2.0).unwrap();
    let s = t.sum(w).unwrap();
    let g = t.backward(s).unwrap();
    let order = g.visit_order();
    assert!(order.windows(2).all(|p| p[0] > p[1]));
    // fan-out: x feeds mul twice and add once → d/dx = 2(2x + 1)
    let gx = g.get(x).unwrap();
    assert!((gx[0] - 2.0 * (2.0 * 0.3 + 1.0)).abs() < 1e-15);
    assert!((gx[1] - 2.0 * (2.0 * -0.2 + 1.0)).abs() < 1e-15);
}

#[test]
fn non_finite_is_recorded() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0]));
    let y = t.scale(x, f64::INFINITY).unwrap();
    let _ = t.sum(y).unwrap();
    assert!(t.check_finite().is_err());
    assert_eq!(t.diagnostics().non_finite_op, Some("scale"));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new().training(4);
        let a = t.constant(random(&mut rng, &[5, 7]));
        let b = t.constant(random(&mut rng, &[7, 3]));
        let c = t.matmul(a, b).unwrap();
        let c = t.dropout(c, 0.2).unwrap();
        let s = t.log_softmax_rows(c, 0.07).unwrap();
        t.value(s).to_le_bytes()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), tau in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let s = t.softmax_rows(xv, tau).unwrap();
        for r in 0..rows {
            let row = t.value(s).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_in_range(a in prop::collection::vec(-1e6f64..1e6, 1..16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
        let c = cosine_sim(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        if a.iter().any(|&v| v != 0.0) {
            prop_assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

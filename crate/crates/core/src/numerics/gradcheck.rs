//! Finite-difference verification of tape gradients.

use super::params::{ParamStore, Trainable};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Gradients smaller than this are
/// compared in absolute terms; float64 differences cannot resolve them
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar(tape: &Tape<'_>, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::shape("grad_check", format!("function must be scalar, got {:?}", t.shape())));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Fourth-order central difference from values at `x-2h, x-h, x+h, x+2h`.
fn five_point(fm2: f64, fm1: f64, fp1: f64, fp2: f64, h: f64) -> f64 {
    (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h)
}

/// Max relative error between the tape gradient of `f` at `x` and the
/// fourth-order central difference with step `h`, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    eval_scalar(&tape, out)?;
    let analytic = tape.backward(out)?.wrt(&tape, xv);

    let eval_at = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        eval_scalar(&tape, out)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let at = |off: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += off;
            eval_at(p)
        };
        let numeric = five_point(at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?, h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-space gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Checks the gradient of `f` with respect to every trainable coordinate of
/// every parameter in `store` selected by `trainable` that `f` reads. `f`
/// builds the scalar on a tape already bound to the store; it must be
/// deterministic and read the same parameters at every probe.
pub fn grad_check_params<F>(store: &ParamStore, trainable: &Trainable, f: F, h: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut checks = grad_check_params_multi(store, trainable, |t| f(t).map(|v| vec![v]), h)?;
    Ok(checks.remove(0))
}

/// [`grad_check_params`] for several scalars built by one function, sharing
/// each probe's forward pass.
pub fn grad_check_params_multi<F>(store: &ParamStore, trainable: &Trainable, f: F, h: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Vec<Var>>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::with_params(store, trainable.clone());
    let outs = f(&mut tape)?;
    let mut grads = Vec::with_capacity(outs.len());
    for &out in &outs {
        eval_scalar(&tape, out)?;
        grads.push(tape.backward(out)?.params(&tape));
    }
    let used: Vec<String> = tape.param_vars().keys().filter(|n| trainable.allows(n)).cloned().collect();
    drop(tape);

    let eval_with = |probe: &ParamStore| -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(probe, Trainable::Nothing);
        let outs = f(&mut tape)?;
        outs.into_iter().map(|o| eval_scalar(&tape, o)).collect()
    };

    let blank = ParamCheck { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, coordinates: 0 };
    let mut reports = vec![blank; outs.len()];
    let mut probe = store.clone();
    for name in &used {
        let numel = store.get(name)?.numel();
        for i in 0..numel {
            let orig = store.get(name)?.data()[i];
            let mut at = |off: f64| {
                probe.get_mut(name).unwrap().data_mut()[i] = orig + off;
                eval_with(&probe)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            for (k, report) in reports.iter_mut().enumerate() {
                let analytic = grads[k].get(name).map_or(0.0, |g| g.data()[i]);
                let err = relative_error(analytic, five_point(m2[k], m1[k], p1[k], p2[k], h));
                report.coordinates += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = name.clone();
                    report.worst_index = i;
                }
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |t: &mut Tape<'_>, x: Var| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&mut tape, xv).unwrap();
        let g = tape.backward(out).unwrap().wrt(&tape, xv);
        assert_eq!(g.data(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn non_finite_function_is_error() {
        let x = Tensor::vector(vec![1.0]);
        let f = |t: &mut Tape<'_>, x: Var| {
            let big = t.scale(x, f64::INFINITY)?;
            t.sum(big)
        };
        assert!(matches!(grad_check(f, &x, 1e-5), Err(Error::Numerical(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}

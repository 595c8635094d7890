//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Worst element found by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    v.item().ok_or_else(|| TensorError::NonScalarRoot(v.shape().to_vec()))
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` for every element of every
/// input, evaluated in double precision.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid("grad_check step must be positive".into()));
    }
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for e in 0..inputs[i].len() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let hi = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let lo = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            g.push((hi - lo) / (2.0 * eps));
        }
        out.push(Tensor::from_parts(inputs[i].shape().to_vec(), g));
    }
    Ok(out)
}

/// Compares the tape gradient of scalar `f` w.r.t. every element of every
/// input against `(f(x+ε) − f(x−ε)) / 2ε`. The error of one element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the maximum is
/// reported. Runs in double precision.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(TensorError::Invalid("grad_check step must be positive".into()));
    }
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);
    let numeric = numeric_gradient(&f, inputs, opts.eps)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, (an, nu)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&a, &n)) in an.data().iter().zip(nu.data()).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: err,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric: n,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |t, v| f(t, v[0]),
        std::slice::from_ref(x),
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
    .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Tensor::from_fn(shape.to_vec(), |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn sigmoid_sum() {
        let x = rand_tensor(&[2, 3, 4, 4], 3);
        let err = grad_check(
            |t, x| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let x = rand_tensor(&[3, 5], 4);
        let err = grad_check(
            |t, x| {
                let y = t.scale(x, 0.5)?;
                t.sum(y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = rand_tensor(&[3], 1);
        assert!(grad_check(|t, x| t.sigmoid(x), &x, DEFAULT_EPS).is_err());
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = rand_tensor(&[3], 1);
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}

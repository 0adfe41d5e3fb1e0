//! Central-difference gradient verification in 64-bit mode.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Compare at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Relative error with denominator `max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `f` w.r.t. one input. Returns zero checked coordinates when `x` does
/// not require a gradient.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(
        |_, vars| f(vars[0]),
        std::slice::from_ref(x),
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

/// Checks `f` w.r.t. every input whose `requires_grad` flag is set.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::invalid_shape(
            "grad_check",
            format!("function output must be scalar, got {:?}", out.shape()),
        ));
    }
    tape.backward(out)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = vars[i].grad().expect("leaf gradient after backward");
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[j], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::from_f64(vec![4], &[0.5, -1.25, 2.0, 3.5]).unwrap().with_requires_grad(true);
        let r = grad_check(|v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn frozen_input_contributes_no_coordinates() {
        let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(|v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap().with_requires_grad(true);
        assert!(grad_check(|v| Ok(v), &x, 1e-5).is_err());
    }

    #[test]
    fn conv_sigmoid_sum_passes() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
        let x = Tensor::from_f64(vec![1, 1, 4, 4], &data).unwrap().with_requires_grad(true);
        let kernel = Tensor::from_f64(vec![2, 1, 3, 3], &[0.3, -0.2, 0.1, 0.5, 0.4, -0.6, 0.2, 0.1, -0.3, 0.1, 0.2, 0.3, -0.1, -0.2, -0.3, 0.4, 0.5, 0.6])
            .unwrap();
        let r = grad_check(
            move |v| {
                let t = v.tape();
                let k = t.constant(kernel.clone());
                let b = t.constant(Tensor::from_f64(vec![2], &[0.1, -0.1])?);
                Ok(v.conv2d(k, b, Padding::Same, 1)?.sigmoid().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}

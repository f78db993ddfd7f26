use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Scalar, Tensor};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of `f` with central differences
/// `(f(p + eps) - f(p - eps)) / 2eps` on up to `max_entries` sampled
/// entries of each parameter.
pub fn finite_diff_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let leaves: Vec<Tensor<T>> = params.iter().map(|p| p.with_requires_grad(true)).collect();
    let loss = f(&leaves)?;
    let analytic: Vec<Vec<T>> = if loss.requires_grad() {
        loss.backward()?;
        leaves
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect()
    } else {
        leaves.iter().map(|p| vec![T::zero(); p.numel()]).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let constants: Vec<Tensor<T>> = params.iter().map(Tensor::detach).collect();
    let mut report = GradCheckReport { params: Vec::new() };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let entries: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_entries).into_vec()
        };
        let mut check = ParamCheck {
            index: pi,
            entries_checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &e in &entries {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = p.to_vec();
                data[e] = data[e] + T::from_f64(delta);
                let mut inputs = constants.clone();
                inputs[pi] = Tensor::from_vec(data, p.shape())?;
                Ok(no_grad(|| f(&inputs))?.item().as_f64())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[pi][e].as_f64();
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric));
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let report = finite_diff_check(
            |p| Ok(p[0].mul(&p[0])?.scale(0.5).sum()),
            &[x],
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let report =
            finite_diff_check(|_| Ok(Tensor::scalar(4.0)), &[x], 1e-5, 10, 0).unwrap();
        assert_eq!(report.params[0].max_abs_err, 0.0);
    }
}

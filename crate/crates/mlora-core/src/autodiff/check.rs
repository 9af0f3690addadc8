use crate::error::{Error, Result};
use crate::numlin::Rng;

use super::params::Params;

/// Coordinates sampled per tensor. Full sweeps are infeasible even at toy
/// scale; seeded sampling has the same power against systematic bugs.
const COORDS_PER_TENSOR: usize = 64;

/// Central-difference gradient check. Analytic gradients must already be
/// populated in `params.grad` (one `backward` pass at the current point);
/// `loss_fn` re-evaluates the deterministic scalar loss at perturbed
/// parameters. Returns the max over sampled coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(params: &mut Params, eps: f64, seed: u64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&Params) -> Result<f64>,
{
    let l0 = loss_fn(params)?;
    let l1 = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::State(
            "grad_check: loss_fn is not deterministic (repeated evaluation mismatch)".into(),
        ));
    }

    let mut rng = Rng::new(seed);
    let mut max_rel = 0.0f64;
    let trainable: Vec<usize> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    for id in trainable {
        let numel = params.get(id).value.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        rng.shuffle(&mut coords);
        coords.truncate(COORDS_PER_TENSOR.min(numel));

        for k in coords {
            let original = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = original + eps;
            let plus = loss_fn(params)?;
            params.get_mut(id).value.data_mut()[k] = original - eps;
            let minus = loss_fn(params)?;
            params.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.get(id).grad.data()[k];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::{Params, Tape};
    use super::*;
    use crate::numlin::DenseMatrix;

    #[test]
    fn quadratic_scalar() {
        // f(x) = x^2 at x = 3: analytic 6
        let mut params = Params::new();
        let id = params
            .register("x", DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap(), true)
            .unwrap();
        params.get_mut(id).grad = DenseMatrix::from_vec(1, 1, vec![6.0]).unwrap();
        let err = grad_check(&mut params, 1e-4, 0, |p| {
            let x = p.value(id).get(0, 0);
            Ok(x * x)
        })
        .unwrap();
        assert!(err < 1e-8, "rel error {err}");
    }

    #[test]
    fn softmax_cross_entropy_logits() {
        let mut params = Params::new();
        let id = params
            .register(
                "logits",
                DenseMatrix::from_vec(1, 4, vec![0.2, -1.1, 0.7, 0.05]).unwrap(),
                true,
            )
            .unwrap();
        let forward = |p: &Params| -> Result<f64> {
            let mut tape = Tape::new();
            let l = tape.param(p, id);
            let loss = tape.cross_entropy_masked(l, &[2], &[true])?;
            Ok(tape.value(loss).get(0, 0))
        };
        // analytic pass
        {
            let mut tape = Tape::new();
            let l = tape.param(&params, id);
            let loss = tape.cross_entropy_masked(l, &[2], &[true]).unwrap();
            tape.backward(loss, &mut params).unwrap();
        }
        let err = grad_check(&mut params, 1e-4, 1, forward).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let mut params = Params::new();
        params
            .register("x", DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(), true)
            .unwrap();
        let mut calls = 0u32;
        let result = grad_check(&mut params, 1e-4, 2, |_| {
            calls += 1;
            Ok(calls as f64)
        });
        assert!(matches!(result, Err(Error::State(_))));
    }
}

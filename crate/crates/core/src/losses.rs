//! Training objectives. Every logarithm is base 2. Logs of softmax outputs
//! go through a log-softmax; the batch-mean term of the IM loss clamps its
//! argument at [`LOG_EPS`](crate::tensor::LOG_EPS).

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor, Var};
use crate::{Error, Result};

/// Weights of the correlation-matrix (`lambda1`) and attention (`lambda2`)
/// consistency terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

fn expect_matrix<T: Real>(op: &'static str, v: &Var<'_, T>) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `-E[sum p log2 p] + sum p_hat log2 p_hat` over softmax rows of `logits`.
///
/// The first term rewards confident predictions, the second (the negative
/// entropy of the batch-mean prediction) rewards class diversity.
pub fn im_loss<'t, T: Real>(logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (m, _) = expect_matrix("im_loss", logits)?;
    if m < 2 {
        return Err(Error::invalid(
            "im_loss",
            format!("needs a batch of at least 2 rows, got {m}"),
        ));
    }
    let p = logits.softmax(1)?;
    let entropy = p.mul(&logits.log2_softmax(1)?)?.sum(1)?.mean_all().neg();
    let p_hat = p.mean(0)?;
    let diversity = p_hat.mul(&p_hat.log2())?.sum_all();
    entropy.add(&diversity)
}

/// Cross-entropy (bits) between one-hot rows of `targets` and softmax rows.
fn one_hot_ce<'t, T: Real>(logits: &Var<'t, T>, targets: Tensor<T>) -> Result<Var<'t, T>> {
    let q = logits.tape().constant(targets);
    let logp = logits.log2_softmax(1)?;
    Ok(q.mul(&logp)?.sum(1)?.mean_all().neg())
}

/// Binary cross-entropy of examiner logits `[t, 2]` against one-hot labels.
pub fn examiner_bce_loss<'t, T: Real>(logits: &Var<'t, T>, labels: &Tensor<T>) -> Result<Var<'t, T>> {
    let (t, k) = expect_matrix("examiner_bce_loss", logits)?;
    if k != 2 || labels.shape() != [t, 2] {
        return Err(Error::shape("examiner_bce_loss", &logits.shape(), labels.shape()));
    }
    for r in 0..t {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != 1 {
            return Err(Error::invalid(
                "examiner_bce_loss",
                format!("label row {r} is not one-hot: {row:?}"),
            ));
        }
    }
    one_hot_ce(logits, labels.clone())
}

/// One-hot `[n, 2]` labels from ordering targets in `{0, 1}`.
pub fn ordering_targets<T: Real>(labels: &[u8]) -> Tensor<T> {
    Tensor::from_fn([labels.len(), 2], |i| {
        if usize::from(labels[i / 2]) == i % 2 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Frobenius norm of the difference of two correlation matrices.
pub fn cmc_loss<'t, T: Real>(c_examiner: &Var<'t, T>, c_base: &Var<'t, T>) -> Result<Var<'t, T>> {
    if c_examiner.shape() != c_base.shape() {
        return Err(Error::shape("cmc_loss", &c_examiner.shape(), &c_base.shape()));
    }
    c_examiner.frobenius_norm_diff(c_base)
}

/// Per-image L2 distance between attention vectors `[m, c]`, batch mean.
pub fn ac_loss<'t, T: Real>(a_examiner: &Var<'t, T>, a_base: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a_examiner.shape() != a_base.shape() || a_base.shape().len() != 2 {
        return Err(Error::shape("ac_loss", &a_examiner.shape(), &a_base.shape()));
    }
    Ok(a_examiner.sub(a_base)?.l2_norm_axis(1)?.mean_all())
}

/// `im + lambda1 * cmc + lambda2 * ac`, refusing non-finite components.
pub fn total_loss<'t, T: Real>(
    im: &Var<'t, T>,
    cmc: &Var<'t, T>,
    ac: &Var<'t, T>,
    weights: LossWeights,
) -> Result<Var<'t, T>> {
    for (component, v) in [("im", im), ("cmc", cmc), ("ac", ac)] {
        let value = v.item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                component,
                value: value.f64(),
            });
        }
    }
    im.add(&cmc.scale(T::of(weights.lambda1)))?
        .add(&ac.scale(T::of(weights.lambda2)))
}

/// Supervised cross-entropy (bits) against class ids.
pub fn source_ce_loss<'t, T: Real>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let (n, k) = expect_matrix("source_ce_loss", logits)?;
    if labels.len() != n {
        return Err(Error::shape("source_ce_loss", &[n, k], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(
            "source_ce_loss",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let q = Tensor::from_fn([n, k], |i| if labels[i / k] == i % k { T::one() } else { T::zero() });
    one_hot_ce(logits, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_for(probs: &[f64], shape: [usize; 2]) -> Tensor<f64> {
        // log of clamped probabilities; softmax recovers the normalised rows
        Tensor::new(shape, probs.iter().map(|&p| p.max(1e-300).ln()).collect()).unwrap()
    }

    fn softmax_rows(x: &[f64], k: usize) -> Vec<Vec<f64>> {
        x.chunks(k)
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn lg(p: f64) -> f64 {
        p.max(1e-12).log2()
    }

    #[test]
    fn im_uniform_rows_cancel() {
        let tape = Tape::new();
        let v = im_loss(&tape.constant(Tensor::<f64>::zeros([5, 4]))).unwrap();
        assert!(v.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn im_balanced_one_hot_hits_minimum() {
        let tape = Tape::new();
        let mut x = Tensor::<f64>::full([4, 4], -1e6);
        for i in 0..4 {
            x.data_mut()[i * 4 + i] = 0.0;
        }
        let v = im_loss(&tape.constant(x)).unwrap().item().unwrap();
        assert!((v + 2.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn im_needs_two_rows() {
        let tape = Tape::new();
        assert!(im_loss(&tape.constant(Tensor::<f64>::zeros([1, 3]))).is_err());
    }

    #[test]
    fn im_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = softmax_rows(&x, 3);
        let ent: f64 = -p.iter().map(|r| r.iter().map(|&v| v * lg(v)).sum::<f64>()).sum::<f64>() / 4.0;
        let div: f64 = (0..3)
            .map(|k| {
                let m = p.iter().map(|r| r[k]).sum::<f64>() / 4.0;
                m * lg(m)
            })
            .sum();
        let tape = Tape::new();
        let v = im_loss(&tape.constant(Tensor::new([4, 3], x).unwrap()))
            .unwrap()
            .item()
            .unwrap();
        assert!((v - (ent + div)).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let tape = Tape::new();
        let q = ordering_targets::<f64>(&[0, 1]);
        let logits = tape.constant(logits_for(q.data(), [2, 2]));
        let v = examiner_bce_loss(&logits, &q).unwrap().item().unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn bce_uniform_is_one_bit() {
        let tape = Tape::new();
        let q = ordering_targets::<f64>(&[0, 1, 1]);
        let v = examiner_bce_loss(&tape.constant(Tensor::zeros([3, 2])), &q)
            .unwrap()
            .item()
            .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_one_hot() {
        let tape = Tape::new();
        let q = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        assert!(examiner_bce_loss(&tape.constant(Tensor::<f64>::zeros([1, 2])), &q).is_err());
    }

    #[test]
    fn bce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..5).map(|_| rng.gen_range(0..2)).collect();
        let p = softmax_rows(&x, 2);
        let want = -p.iter().zip(&labels).map(|(r, &l)| lg(r[l as usize])).sum::<f64>() / 5.0;
        let tape = Tape::new();
        let v = examiner_bce_loss(
            &tape.constant(Tensor::new([5, 2], x).unwrap()),
            &ordering_targets(&labels),
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn cmc_cases() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([3, 3], |i| i as f64 * 0.1));
        assert_eq!(cmc_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        let mut d = Tensor::<f64>::zeros([3, 3]);
        d.data_mut()[4] = 3.0;
        let b = tape.constant(Tensor::from_fn([3, 3], |i| i as f64 * 0.1 + d.data()[i]));
        assert!((cmc_loss(&b, &a).unwrap().item().unwrap() - 3.0).abs() < 1e-12);
        let c = tape.constant(Tensor::<f64>::zeros([2, 3]));
        assert!(cmc_loss(&a, &c).is_err());
    }

    #[test]
    fn ac_cases() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new([2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        assert_eq!(ac_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        assert!((ac_loss(&a, &b).unwrap().item().unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(ac_loss(&a, &tape.constant(Tensor::zeros([2, 3]))).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let t = total_loss(&s(1.0), &s(0.2), &s(0.1), LossWeights::default()).unwrap();
        assert!((t.item().unwrap() - 4.0).abs() < 1e-12);
        let w0 = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        let im = s(0.7364);
        assert_eq!(total_loss(&im, &s(0.2), &s(0.1), w0).unwrap().item().unwrap(), 0.7364);
        let err = total_loss(&s(1.0), &s(f64::NAN), &s(0.1), w0).unwrap_err();
        assert!(err.to_string().contains("cmc"), "{err}");
    }

    #[test]
    fn source_ce_cases() {
        let tape = Tape::new();
        let v = source_ce_loss(&tape.constant(Tensor::<f64>::zeros([3, 4])), &[0, 1, 3]).unwrap();
        assert!((v.item().unwrap() - 2.0).abs() < 1e-12);
        let mut x = Tensor::<f64>::full([2, 3], -1e3);
        x.data_mut()[1] = 0.0;
        x.data_mut()[5] = 0.0;
        let v = source_ce_loss(&tape.constant(x.clone()), &[1, 2]).unwrap();
        assert!(v.item().unwrap().abs() < 1e-9);
        assert!(source_ce_loss(&tape.constant(x), &[1, 3]).is_err());
    }

    #[test]
    fn source_ce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let p = softmax_rows(&x, 3);
        let want = -p.iter().zip(&y).map(|(r, &c)| lg(r[c])).sum::<f64>() / 5.0;
        let tape = Tape::new();
        let v = source_ce_loss(&tape.constant(Tensor::new([5, 3], x).unwrap()), &y).unwrap();
        assert!((v.item().unwrap() - want).abs() < 1e-12);
    }
}

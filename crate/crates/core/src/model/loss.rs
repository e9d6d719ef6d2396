use crate::error::{Error, Result};
use crate::model::{Batch, Hidden};
use crate::real::Real;

/// Mean next-token cross-entropy over every position of the batch.
///
/// Accumulates in `f64` whatever the element type.
pub fn loss<T: Real>(logits: &Hidden<T>, batch: &Batch) -> Result<f64> {
    let v = logits.width;
    if logits.batch != batch.batch || logits.seq != batch.seq_len {
        return Err(Error::dim(
            "logits",
            format!("({}, {}, {v})", batch.batch, batch.seq_len),
            format!("({}, {}, {v})", logits.batch, logits.seq),
        ));
    }
    if logits.data.len() != batch.tokens() * v {
        return Err(Error::dim("logits buffer", batch.tokens() * v, logits.data.len()));
    }
    let mut total = 0.0;
    for (row, &target) in logits.data.chunks_exact(v).zip(&batch.targets) {
        let target = target as usize;
        if target >= v {
            return Err(Error::Config(format!("target {target} out of range for vocab {v}")));
        }
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            let x = x.as_f64();
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite logit {x}")));
            }
            max = max.max(x);
        }
        let mut sum = 0.0;
        for &x in row {
            sum += (x.as_f64() - max).exp();
        }
        total += max + sum.ln() - row[target].as_f64();
    }
    let l = total / batch.tokens() as f64;
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {l}")));
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn logits(batch: usize, seq: usize, v: usize, data: Vec<f64>) -> Hidden<f64> {
        Hidden { batch, seq, width: v, data }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let b = Batch::new(1, 3, vec![0, 1, 2], vec![1, 2, 3]).unwrap();
        let l = loss(&logits(1, 3, 4, vec![0.7; 12]), &b).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn margin_drives_loss_to_zero() {
        let b = Batch::new(1, 1, vec![0], vec![2]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let mut d = vec![0.0; 4];
            d[2] = margin;
            let l = loss(&logits(1, 1, 4, d), &b).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn matches_elementwise_softmax_nll() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (bt, s, v) = (3, 5, 7);
        let data: Vec<f64> = (0..bt * s * v).map(|_| rng.random_range(-4.0..4.0)).collect();
        let targets: Vec<u32> = (0..bt * s).map(|_| rng.random_range(0..v as u32)).collect();
        let b = Batch::new(bt, s, vec![0; bt * s], targets.clone()).unwrap();
        let got = loss(&logits(bt, s, v, data.clone()), &b).unwrap();
        // Brute force: explicit probabilities, then negative log-likelihood.
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let p = row[t as usize].exp() / z;
            nll += -p.ln();
        }
        nll /= (bt * s) as f64;
        assert!((got - nll).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let b = Batch::new(1, 1, vec![0], vec![0]).unwrap();
        let err = loss(&logits(1, 1, 2, vec![f64::NAN, 0.0]), &b).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = loss(&logits(1, 1, 2, vec![f64::INFINITY, 0.0]), &b).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

/// Error summary in SOH percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub max_err: f64,
    pub n: usize,
}

pub fn metrics(predicted: &[f64], actual: &[f64]) -> Result<MetricReport> {
    if predicted.len() != actual.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = predicted.len();
    let (mut abs_sum, mut sq_sum, mut max_err) = (0.0, 0.0, 0.0f64);
    for (p, a) in predicted.iter().zip(actual) {
        let e = (p - a).abs();
        abs_sum += e;
        sq_sum += e * e;
        max_err = max_err.max(e);
    }
    let mae = abs_sum / n as f64;
    let rmse = (sq_sum / n as f64).sqrt();
    // Rounding can invert the power-mean ordering by an ulp when all errors
    // are equal; the true values satisfy mae <= rmse <= max.
    let rmse = rmse.clamp(mae, max_err);
    Ok(MetricReport { mae, rmse, max_err, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::NormalStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn exact_predictions_score_zero() {
        let r = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.max_err, r.n), (0.0, 0.0, 0.0, 2));
    }

    #[test]
    fn two_errors() {
        let r = metrics(&[1.0, -3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.mae, 2.0);
        assert_relative_eq!(r.rmse, 5f64.sqrt(), max_relative = 1e-15);
        assert_eq!(r.max_err, 3.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut g = NormalStream::new(3);
        let p: Vec<f64> = (0..100).map(|_| g.next_standard()).collect();
        let a: Vec<f64> = (0..100).map(|_| g.next_standard()).collect();
        let r = metrics(&p, &a).unwrap();
        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut mx = 0.0f64;
        for i in 0..100 {
            let e = p[i] - a[i];
            abs += e.abs();
            sq += e * e;
            if e.abs() > mx {
                mx = e.abs();
            }
        }
        assert!((r.mae - abs / 100.0).abs() <= 1e-12);
        assert!((r.rmse - (sq / 100.0).sqrt()).abs() <= 1e-12);
        assert!((r.max_err - mx).abs() <= 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            metrics(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch(1, 2))
        ));
        assert!(matches!(metrics(&[], &[]), Err(EvalError::Empty)));
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50), rot in 0usize..50) {
            let (p, a): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut a2 = a.clone();
            p2.rotate_left(k);
            a2.rotate_left(k);
            let r1 = metrics(&p, &a).unwrap();
            let r2 = metrics(&p2, &a2).unwrap();
            prop_assert!((r1.mae - r2.mae).abs() <= 1e-12);
            prop_assert!((r1.rmse - r2.rmse).abs() <= 1e-12);
            prop_assert_eq!(r1.max_err, r2.max_err);
            prop_assert!(r1.mae <= r1.rmse && r1.rmse <= r1.max_err);
        }
    }
}

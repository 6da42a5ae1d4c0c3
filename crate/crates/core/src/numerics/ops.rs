//! Plain numeric primitives shared across training and evaluation.

use super::autograd::softmax_in_place;
use super::tensor::{r, Real};
use crate::error::{Error, Result};

/// Softmax of `logits / tau`, max-subtracted for stability.
pub fn softmax_temp<T: Real>(logits: &[T], tau: T) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    if tau <= T::zero() {
        return Err(Error::Numeric(format!(
            "softmax temperature must be positive, got {}",
            tau.as_f64()
        )));
    }
    let mut out: Vec<T> = logits.iter().map(|&v| v / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Cross-entropy -sum p ln q between two distributions over the same support.
/// q is floored at 1e-12 before the log; terms with p = 0 contribute zero.
pub fn cross_entropy<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "cross-entropy over mismatched supports: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Numeric("cross-entropy of empty distributions".into()));
    }
    let floor = r::<T>(1e-12);
    let mut s = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi != T::zero() {
            s -= pi * qi.max(floor).ln();
        }
    }
    Ok(s)
}

/// v / max(|v|, eps): unit vector, or a scaled copy when |v| < eps.
pub fn l2_normalize<T: Real>(v: &[T], eps: T) -> Vec<T> {
    let norm = v.iter().map(|x| *x * *x).fold(T::zero(), |a, b| a + b).sqrt();
    let denom = norm.max(eps);
    v.iter().map(|x| *x / denom).collect()
}

/// Shannon entropy -sum p ln p in nats; zero entries contribute zero.
pub fn entropy<T: Real>(p: &[T]) -> T {
    let mut s = T::zero();
    for &pi in p {
        if pi > T::zero() {
            s -= pi * pi.ln();
        }
    }
    s
}

/// Mean and population standard deviation of a slice.
pub fn mean_std<T: Real>(xs: &[T]) -> (T, T) {
    if xs.is_empty() {
        return (T::zero(), T::zero());
    }
    let n = r::<T>(xs.len() as f64);
    let mut mu = T::zero();
    for &v in xs {
        mu += v;
    }
    mu /= n;
    let mut var = T::zero();
    for &v in xs {
        let c = v - mu;
        var += c * c;
    }
    (mu, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let p = softmax_temp(&[3.0f64, 3.0, 3.0, 3.0], 0.07).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        let logits = [1.0f64, 0.0];
        let warm = softmax_temp(&logits, 1.0).unwrap();
        let cold = softmax_temp(&logits, 0.1).unwrap();
        assert!(cold[0] > warm[0]);
        assert!((cold[0] - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_temp::<f64>(&[], 1.0).is_err());
        assert!(softmax_temp(&[1.0f64], 0.0).is_err());
        assert!(softmax_temp(&[1.0f64], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_one_hot_against_uniform_is_ln2() {
        let ce = cross_entropy(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_handles_zero_target_mass() {
        // p = 0 entries contribute nothing even where q = 0
        let ce = cross_entropy(&[0.0f64, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn cross_entropy_floors_q() {
        let ce = cross_entropy(&[1.0f64], &[0.0]).unwrap();
        assert!((ce - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_unit_and_small_vectors() {
        let v = l2_normalize(&[3.0f64, 4.0], 1e-8);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        // below eps the vector is scaled by 1/eps, not blown up
        let tiny = l2_normalize(&[1e-12f64, 0.0], 1e-8);
        assert!((tiny[0] - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let h = entropy(&[0.25f64; 4]);
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
    }
}

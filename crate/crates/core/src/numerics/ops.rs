//! Plain-value versions of the numeric primitives, used outside the tape.

use crate::error::{shape_err, Error, Result};

use super::tape::softmax_in_place;
use super::Scalar;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(shape_err!("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("softmax input is not finite".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Layer normalisation of one vector, epsilon 1e-5 inside the square root.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T]) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(shape_err!(
            "layer_norm lengths differ: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        ));
    }
    if x.len() < 2 {
        return Err(shape_err!("layer_norm needs at least 2 values, got {}", x.len()));
    }
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::from_f64(1e-5)).sqrt();
    Ok(x
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b)
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // e/(2e+1) and 1/(2e+1)
        let e = std::f64::consts::E;
        let direct = [e / (2.0 * e + 1.0), e / (2.0 * e + 1.0), 1.0 / (2.0 * e + 1.0)];
        let p = softmax(&[1.0f64, 1.0, 0.0]).unwrap();
        for (a, b) in p.iter().zip(direct) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.422_318_79).abs() < 1e-8);
        assert!((p[2] - 0.155_362_40).abs() < 1e-8);
    }

    #[test]
    fn softmax_shift_invariant_and_rejects_nan() {
        let a = softmax(&[0.3f64, -1.2, 2.0]).unwrap();
        let b = softmax(&[100.3f64, 98.8, 102.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(softmax(&[1.0f64, f64::NAN]), Err(Error::NumericDomain(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0f64; 4];
        let zeros = [0.0f64; 4];
        assert_eq!(layer_norm(&[3.0f64; 4], &ones, &zeros).unwrap(), vec![0.0; 4]);

        let y = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-12 && (y[1] + expect).abs() < 1e-12);
        assert!((y[0] - 0.999_995).abs() < 1e-6);

        let y = layer_norm(&[0.2f64, 5.0, -3.0], &[0.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);

        assert!(matches!(layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_unit_moments() {
        // epsilon shrinks the variance by var / (var + 1e-5); with input variance
        // above 10 that bias is below 1e-6.
        let x: Vec<f64> = (0..17).map(|i| ((i * 7) % 11) as f64 * 3.7 - 10.0).collect();
        let y = layer_norm(&x, &[1.0; 17], &[0.0; 17]).unwrap();
        let mean = y.iter().sum::<f64>() / 17.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "variance {var}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}

//! Symmetric per-tensor 8-bit quantization and LUT dot products.

use crate::axmul::AxMultiplier;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Largest code magnitude; -128 is never produced.
pub const QMAX: i8 = 127;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Real value represented by code 1.
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
}

/// Scale for a per-tensor symmetric quantizer: `max|t| / 127`, or 1.0 for an
/// all-zero tensor.
pub fn scale_for(values: &[f32]) -> f32 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max / QMAX as f32
    } else {
        1.0
    }
}

#[inline]
pub fn quantize_value(v: f32, scale: f32) -> i8 {
    // f32::round rounds half away from zero
    (v / scale).round().clamp(-(QMAX as f32), QMAX as f32) as i8
}

pub fn quantize_slice(values: &[f32]) -> Result<(Vec<i8>, f32)> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        bail!(Numeric, "cannot quantize non-finite value {bad}");
    }
    let scale = scale_for(values);
    Ok((values.iter().map(|&v| quantize_value(v, scale)).collect(), scale))
}

pub fn quantize(t: &Tensor) -> Result<(QuantTensor, QuantParams)> {
    let (codes, scale) = quantize_slice(t.data())?;
    Ok((
        QuantTensor {
            shape: t.shape().to_vec(),
            codes,
        },
        QuantParams { scale },
    ))
}

pub fn dequantize(q: &QuantTensor, p: QuantParams) -> Tensor {
    let data = q.codes.iter().map(|&c| c as f32 * p.scale).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized shape is consistent")
}

/// Quantize then dequantize; the straight-through forward value.
pub fn fake_quantize(t: &Tensor) -> Result<Tensor> {
    let (q, p) = quantize(t)?;
    Ok(dequantize(&q, p))
}

/// `sum_i lut(a_i, b_i)` with checked 32-bit accumulation.
pub fn approx_dot(a: &[i8], b: &[i8], m: &AxMultiplier) -> Result<i32> {
    if a.len() != b.len() {
        bail!(Shape, "dot operands have lengths {} and {}", a.len(), b.len());
    }
    let mut acc: i32 = 0;
    for (&x, &w) in a.iter().zip(b) {
        acc = checked_acc(acc, m.row(x)[(w as i16 + 128) as usize])?;
    }
    Ok(acc)
}

#[inline]
pub(crate) fn checked_acc(acc: i32, p: i16) -> Result<i32> {
    match acc.checked_add(p as i32) {
        Some(v) => Ok(v),
        None => bail!(Numeric, "32-bit accumulator overflow"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axmul::{build_exact_multiplier, build_truncation_multiplier, AxMultiplier, LUT_LEN};
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn all_zero_tensor() {
        let (q, p) = quantize(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.scale, 1.0);
        assert!(q.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn symmetric_endpoints() {
        let (q, p) = quantize(&Tensor::from_vec(vec![-1.27, 1.27])).unwrap();
        assert_eq!(q.codes, vec![-127, 127]);
        assert!((p.scale - 0.01).abs() < 1e-7);
    }

    #[test]
    fn single_value_maps_to_qmax() {
        for s in [1e-6f32, 0.37, 2.0, 1e4] {
            let (q, _) = quantize(&Tensor::from_vec(vec![127.0 * s])).unwrap();
            assert_eq!(q.codes, vec![127]);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize(&Tensor::from_vec(vec![1.0, f32::NAN])), Err(Error::Numeric(_))));
        assert!(matches!(quantize(&Tensor::from_vec(vec![f32::INFINITY])), Err(Error::Numeric(_))));
    }

    #[test]
    fn dot_examples() {
        let exact = build_exact_multiplier();
        assert_eq!(approx_dot(&[1, 2, 3], &[4, 5, 6], &exact).unwrap(), 32);
        assert_eq!(approx_dot(&[], &[], &exact).unwrap(), 0);
        let t1 = build_truncation_multiplier(1, 0.3).unwrap();
        // lut(3,3) = 2*2, lut(3,1) = 2*0
        assert_eq!(approx_dot(&[3, 3], &[3, 1], &t1).unwrap(), t1.mul(3, 3) as i32 + t1.mul(3, 1) as i32);
        assert_eq!(approx_dot(&[3, 3], &[3, 1], &t1).unwrap(), 4);
        assert!(matches!(approx_dot(&[1], &[1, 2], &exact), Err(Error::Shape(_))));
    }

    #[test]
    fn accumulator_overflow_is_an_error() {
        let m = AxMultiplier::new("sat", 0.1, vec![i16::MAX; LUT_LEN]).unwrap();
        let a = vec![1i8; 70_000];
        assert!(matches!(approx_dot(&a, &a, &m), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(v in prop::collection::vec(-1e3f32..1e3, 1..64)) {
            let t = Tensor::from_vec(v);
            let (q, p) = quantize(&t).unwrap();
            prop_assert!(q.codes.iter().all(|&c| c >= -127));
            let back = dequantize(&q, p);
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= p.scale * 0.5 * (1.0 + 1e-5) + 1e-6);
            }
        }

        #[test]
        fn exact_lut_dot_is_integer_dot(a in prop::collection::vec(-127i8..=127, 0..200), seed in any::<u64>()) {
            let b: Vec<i8> = a.iter().enumerate().map(|(i, _)| ((seed.rotate_left(i as u32) & 0xff) as i16 - 128).max(-127) as i8).collect();
            let m = build_exact_multiplier();
            let want: i32 = a.iter().zip(&b).map(|(&x, &y)| x as i32 * y as i32).sum();
            prop_assert_eq!(approx_dot(&a, &b, &m).unwrap(), want);
        }
    }
}

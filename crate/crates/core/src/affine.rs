//! Per-tensor affine int8 quantization: `real ≈ scale * (q - zero_point)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Range `[-a, a]`, zero point pinned at 0. Used for weights.
    Symmetric,
    /// Full `[min, max]` range widened to contain 0. Used for activations.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f32,
    zero_point: i8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "quantization scale must be positive and finite, got {scale}"
            )));
        }
        let zero_point = i8::try_from(zero_point).map_err(|_| {
            Error::InvalidInput(format!("zero point {zero_point} outside [-128, 127]"))
        })?;
        Ok(Self { scale, zero_point })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point as i32
    }

    /// Quantizes one value. Rounds half away from zero and saturates.
    #[inline]
    pub fn quantize(&self, v: f32) -> i8 {
        let q = (v as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        ((q as i32 - self.zero_point as i32) as f64 * self.scale as f64) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    channels: usize,
    frames: usize,
    data: Vec<i8>,
    params: QuantParams,
}

impl QuantTensor {
    pub fn new(channels: usize, frames: usize, data: Vec<i8>, params: QuantParams) -> Result<Self> {
        if channels == 0 || data.len() != channels * frames {
            return Err(Error::shape(format!(
                "quantized data length {} does not match {channels}x{frames}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            frames,
            data,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }
}

pub fn quantize_slice(values: &[f32], p: QuantParams) -> Result<Vec<i8>> {
    values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                Ok(p.quantize(v))
            } else {
                Err(Error::InvalidInput(format!("cannot quantize {v}")))
            }
        })
        .collect()
}

pub fn quantize_affine(x: &Tensor2D, p: QuantParams) -> Result<QuantTensor> {
    let data = quantize_slice(x.data(), p)?;
    QuantTensor::new(x.channels(), x.frames(), data, p)
}

pub fn dequantize_affine(q: &QuantTensor) -> Tensor2D {
    let p = q.params();
    let data = q.data().iter().map(|&v| p.dequantize(v)).collect();
    Tensor2D::new(q.channels(), q.frames(), data).expect("dequantized values are finite")
}

/// Derives per-tensor parameters from an observed value range.
pub fn choose_quant_params(min_v: f32, max_v: f32, mode: QuantMode) -> Result<QuantParams> {
    if !(min_v.is_finite() && max_v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "range bounds must be finite, got [{min_v}, {max_v}]"
        )));
    }
    if min_v > max_v {
        return Err(Error::InvalidRange {
            min: min_v,
            max: max_v,
        });
    }
    match mode {
        QuantMode::Symmetric => {
            let a = (min_v.abs() as f64).max(max_v.abs() as f64);
            if a == 0.0 {
                return QuantParams::new(1.0, 0);
            }
            QuantParams::new((a / 127.0) as f32, 0)
        }
        QuantMode::Asymmetric => {
            let lo = (min_v as f64).min(0.0);
            let hi = (max_v as f64).max(0.0);
            if hi == lo {
                return QuantParams::new(1.0, 0);
            }
            let scale = (hi - lo) / 255.0;
            let zp = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
            QuantParams::new(scale as f32, zp)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor2D {
        Tensor2D::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let p = QuantParams::new(0.1, 5).unwrap();
        assert_eq!(quantize_affine(&t(&[0.0]), p).unwrap().data(), &[5]);
        let p = QuantParams::new(0.1, 0).unwrap();
        assert_eq!(quantize_affine(&t(&[1.0]), p).unwrap().data(), &[10]);
        assert_eq!(quantize_affine(&t(&[100.0]), p).unwrap().data(), &[127]);
        assert_eq!(quantize_affine(&t(&[-100.0]), p).unwrap().data(), &[-128]);
    }

    #[test]
    fn rounds_half_away_from_zero() {
        let p = QuantParams::new(1.0, 0).unwrap();
        assert_eq!(p.quantize(0.5), 1);
        assert_eq!(p.quantize(-0.5), -1);
        assert_eq!(p.quantize(2.5), 3);
        assert_eq!(p.quantize(-2.5), -3);
    }

    #[test]
    fn dequantize_examples() {
        let p = QuantParams::new(0.1, 5).unwrap();
        let q = QuantTensor::new(1, 1, vec![5], p).unwrap();
        assert_eq!(dequantize_affine(&q).data(), &[0.0]);
        let p = QuantParams::new(0.1, 0).unwrap();
        let q = QuantTensor::new(1, 1, vec![10], p).unwrap();
        assert!((dequantize_affine(&q).data()[0] - 1.0).abs() < 1e-6);
        let p = QuantParams::new(1.0, 0).unwrap();
        let q = QuantTensor::new(1, 1, vec![-128], p).unwrap();
        assert_eq!(dequantize_affine(&q).data(), &[-128.0]);
    }

    #[test]
    fn choose_params_examples() {
        let p = choose_quant_params(-2.0, 2.0, QuantMode::Symmetric).unwrap();
        assert!((p.scale() - 2.0 / 127.0).abs() < 1e-9);
        assert_eq!(p.zero_point(), 0);

        let p = choose_quant_params(0.0, 0.0, QuantMode::Symmetric).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (1.0, 0));
        let p = choose_quant_params(0.0, 0.0, QuantMode::Asymmetric).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (1.0, 0));

        let p = choose_quant_params(0.0, 2.55, QuantMode::Asymmetric).unwrap();
        assert!((p.scale() - 0.01).abs() < 1e-7);
        assert_eq!(p.zero_point(), -128);
    }

    #[test]
    fn asymmetric_range_includes_zero() {
        // [1, 3] widens to [0, 3]: zero must land exactly on the zero point.
        let p = choose_quant_params(1.0, 3.0, QuantMode::Asymmetric).unwrap();
        assert_eq!(p.zero_point(), -128);
        assert_eq!(p.dequantize(p.quantize(0.0)), 0.0);
        let p = choose_quant_params(-3.0, -1.0, QuantMode::Asymmetric).unwrap();
        assert_eq!(p.zero_point(), 127);
        assert_eq!(p.dequantize(p.quantize(0.0)), 0.0);
    }

    #[test]
    fn param_errors() {
        assert!(matches!(
            choose_quant_params(1.0, -1.0, QuantMode::Asymmetric),
            Err(Error::InvalidRange { .. })
        ));
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
        assert!(quantize_slice(&[f32::INFINITY], QuantParams::new(1.0, 0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            lo in -50.0f32..0.0,
            width in 0.01f32..100.0,
            frac in 0.0f32..=1.0,
            symmetric in any::<bool>(),
        ) {
            let hi = lo + width;
            let mode = if symmetric { QuantMode::Symmetric } else { QuantMode::Asymmetric };
            let p = choose_quant_params(lo, hi, mode).unwrap();
            let x = lo + frac * width;
            let back = p.dequantize(p.quantize(x));
            // f32 storage of the scale adds a few ulps on top of the half step.
            let slack = 1e-5 * p.scale() + 1e-6 * x.abs();
            prop_assert!((back - x).abs() <= p.scale() / 2.0 + slack,
                "x={x} back={back} scale={}", p.scale());
        }

        #[test]
        fn requantization_is_a_fixed_point(
            lo in -50.0f32..0.0,
            width in 0.01f32..100.0,
            xs in prop::collection::vec(-200.0f32..200.0, 1..32),
        ) {
            let p = choose_quant_params(lo, lo + width, QuantMode::Asymmetric).unwrap();
            let q = quantize_affine(&Tensor2D::new(1, xs.len(), xs).unwrap(), p).unwrap();
            let again = quantize_affine(&dequantize_affine(&q), p).unwrap();
            prop_assert_eq!(q.data(), again.data());
        }

        #[test]
        fn symmetric_zero_point_is_zero(a in -100.0f32..100.0, b in -100.0f32..100.0) {
            let p = choose_quant_params(a.min(b), a.max(b), QuantMode::Symmetric).unwrap();
            prop_assert_eq!(p.zero_point(), 0);
        }
    }
}

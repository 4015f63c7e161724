//! Stochastic uniform quantization of feature tensors.
//!
//! Values are mapped onto `2^b` evenly spaced levels spanning the tensor's
//! own `[min, max]` and rounded up with probability equal to their
//! fractional position between the two neighbouring levels, which makes the
//! dequantized value an unbiased estimate of the input. Gradients treat the
//! quantizer as the identity (straight-through).

use rand::Rng;

use crate::nn::{NnError, Tensor};

pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub bits: u32,
    pub lo: f64,
    pub hi: f64,
    pub codes: Vec<u32>,
}

impl QuantizedTensor {
    /// Number of intervals between the lowest and highest level.
    pub fn intervals(&self) -> f64 {
        intervals(self.bits)
    }

    /// Spacing between adjacent levels, the worst-case rounding error.
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dequantize(&self) -> Tensor {
        let step = self.step();
        let data = self
            .codes
            .iter()
            .map(|&c| (self.lo + c as f64 * step).clamp(self.lo, self.hi))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("finite dequantized values")
    }
}

fn intervals(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantizeError {
    #[error("bit width {0} outside 1..={MAX_BITS}")]
    Bits(u32),
    #[error(transparent)]
    Tensor(#[from] NnError),
}

pub fn quantize<R: Rng + ?Sized>(
    z: &Tensor,
    bits: u32,
    rng: &mut R,
) -> Result<QuantizedTensor, QuantizeError> {
    if bits == 0 || bits > MAX_BITS {
        return Err(QuantizeError::Bits(bits));
    }
    let data = z.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if data.is_empty() {
        return Ok(QuantizedTensor {
            shape: z.shape().to_vec(),
            bits,
            lo: 0.0,
            hi: 0.0,
            codes: Vec::new(),
        });
    }
    let levels = intervals(bits);
    let codes = if hi == lo {
        vec![0; data.len()]
    } else {
        let span = hi - lo;
        data.iter()
            .map(|&v| {
                let pos = ((v - lo) / span * levels).clamp(0.0, levels);
                let floor = pos.floor();
                let frac = pos - floor;
                let up = rng.random::<f64>() < frac;
                (floor as u64 + up as u64).min(levels as u64) as u32
            })
            .collect()
    };
    Ok(QuantizedTensor {
        shape: z.shape().to_vec(),
        bits,
        lo,
        hi,
        codes,
    })
}

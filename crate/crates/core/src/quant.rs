//! Differential β-bit quantization against a mirrored previous state.
//!
//! Each block is quantized on an evenly spaced grid of `2^β` points centred on
//! the previously quantized values, with radius `R = ‖g − prev‖∞`. Only `R`
//! (as a 32-bit float) and the integer grid indices travel; both endpoints
//! advance their copy of the state with the same arithmetic, so sender and
//! receiver stay bit-identical.
//!
//! The radius is rounded *up* to the nearest `f32` before use, so the grid
//! always covers every element and the sender works with exactly the value
//! the receiver decodes.

use crate::error::{QrrError, Result};
use crate::scalar::Scalar;
use crate::tensor::max_abs;

pub const MAX_BETA: u8 = 16;

/// Radii at or below this are sent as exactly zero (no-change block).
pub const ZERO_RADIUS: f64 = 1e-12;

/// Bits charged for the radius of every block.
pub const RADIUS_BITS: u64 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub radius: f32,
    pub codes: Vec<u16>,
    pub beta: u8,
}

impl QuantizedBlock {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `32 + β·n`, excluding framing and byte padding.
    pub fn payload_bits(&self) -> u64 {
        payload_bits(self.beta, self.codes.len())
    }
}

pub fn payload_bits(beta: u8, n: usize) -> u64 {
    RADIUS_BITS + beta as u64 * n as u64
}

/// Previous quantized values of one block, `Q(θ^{k-1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantState<T> {
    values: Vec<T>,
}

impl<T: Scalar> QuantState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![T::zero(); n],
        }
    }

    pub fn from_values(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn check_beta(beta: u8) -> Result<()> {
    if beta == 0 || beta > MAX_BETA {
        return Err(QrrError::InvalidArgument(format!("beta {beta} outside 1..={MAX_BETA}")));
    }
    Ok(())
}

fn levels(beta: u8) -> u32 {
    (1u32 << beta) - 1
}

/// `τ = 1 / (2^β − 1)`
pub fn tau<T: Scalar>(beta: u8) -> T {
    T::one() / T::of(levels(beta) as f64)
}

/// Smallest `f32` that is `>= r`.
fn radius_to_wire<T: Scalar>(r: T) -> f32 {
    let r64 = r.as_f64();
    let mut r32 = r64 as f32;
    if (r32 as f64) < r64 {
        r32 = f32::from_bits(r32.to_bits() + 1);
    }
    r32
}

/// Quantizes `g` against `prev` and returns the block together with the
/// advanced state (the value the receiver will also hold after [`recover`]).
pub fn quantize<T: Scalar>(g: &[T], prev: &QuantState<T>, beta: u8) -> Result<(QuantizedBlock, QuantState<T>)> {
    check_beta(beta)?;
    if g.len() != prev.len() {
        return Err(QrrError::ShapeMismatch(format!(
            "block of {} values against state of {}",
            g.len(),
            prev.len()
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(QrrError::NonFinite);
    }
    let diff: Vec<T> = g.iter().zip(&prev.values).map(|(&a, &b)| a - b).collect();
    let r = max_abs(&diff);
    if !r.is_finite() {
        return Err(QrrError::NonFinite);
    }
    if r.as_f64() <= ZERO_RADIUS {
        let block = QuantizedBlock {
            radius: 0.0,
            codes: vec![0; g.len()],
            beta,
        };
        return Ok((block, prev.clone()));
    }
    let radius = radius_to_wire(r);
    let r = T::of(radius as f64);
    let step = T::of(2.0) * tau::<T>(beta) * r;
    let top = levels(beta) as f64;
    let half = T::of(0.5);
    let codes = diff
        .iter()
        .map(|&d| {
            let q = ((d + r) / step + half).floor().as_f64();
            q.clamp(0.0, top) as u16
        })
        .collect();
    let block = QuantizedBlock { radius, codes, beta };
    let next = recover(prev, &block)?;
    Ok((block, next))
}

/// `Q(θ^k) = Q(θ^{k-1}) + 2τR·q − R·1`
pub fn recover<T: Scalar>(prev: &QuantState<T>, block: &QuantizedBlock) -> Result<QuantState<T>> {
    check_beta(block.beta)?;
    if block.len() != prev.len() {
        return Err(QrrError::ShapeMismatch(format!(
            "block of {} codes against state of {}",
            block.len(),
            prev.len()
        )));
    }
    if block.radius == 0.0 {
        return Ok(prev.clone());
    }
    if !block.radius.is_finite() || block.radius < 0.0 {
        return Err(QrrError::Malformed(format!("radius {}", block.radius)));
    }
    let top = levels(block.beta);
    if let Some(&c) = block.codes.iter().find(|&&c| c as u32 > top) {
        return Err(QrrError::Malformed(format!("code {c} exceeds {top}")));
    }
    let r = T::of(block.radius as f64);
    let denom = T::of(top as f64);
    let values = prev
        .values
        .iter()
        .zip(&block.codes)
        .map(|(&p, &q)| {
            let frac = T::of(2.0 * q as f64) / denom;
            p + (frac * r - r)
        })
        .collect();
    Ok(QuantState { values })
}

/// Packs β-bit codes into a little-endian, LSB-first bit stream of
/// `⌈β·n/8⌉` bytes: code `i` occupies stream bits `[iβ, (i+1)β)`, and stream
/// bit `k` is bit `k mod 8` of byte `k / 8`.
pub fn pack(codes: &[u16], beta: u8) -> Result<Vec<u8>> {
    check_beta(beta)?;
    let top = levels(beta);
    let mut out = Vec::with_capacity(packed_len(beta, codes.len()));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        if c as u32 > top {
            return Err(QrrError::InvalidArgument(format!(
                "code {c} does not fit in {beta} bits"
            )));
        }
        acc |= (c as u64) << filled;
        filled += beta as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn packed_len(beta: u8, n: usize) -> usize {
    (beta as usize * n).div_ceil(8)
}

pub fn unpack(bytes: &[u8], beta: u8, n: usize) -> Result<Vec<u16>> {
    check_beta(beta)?;
    let need = packed_len(beta, n);
    if bytes.len() < need {
        return Err(QrrError::Malformed(format!(
            "{n} codes of {beta} bits need {need} bytes, got {}",
            bytes.len()
        )));
    }
    let mask = levels(beta) as u64;
    let mut codes = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut next = bytes[..need].iter();
    for _ in 0..n {
        while filled < beta as u32 {
            acc |= (*next.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        codes.push((acc & mask) as u16);
        acc >>= beta;
        filled -= beta as u32;
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_endpoints_recover_exactly() {
        let prev = QuantState::zeros(2);
        let (block, next) = quantize(&[1.0, -1.0], &prev, 8).unwrap();
        assert_eq!(block.radius, 1.0);
        assert_eq!(block.codes, vec![255, 0]);
        assert_eq!(next.values(), &[1.0, -1.0]);
        assert_eq!(recover(&prev, &block).unwrap().values(), &[1.0, -1.0]);
        assert_eq!(block.payload_bits(), 32 + 16);
    }

    #[test]
    fn unchanged_input_gives_zero_block() {
        let prev = QuantState::from_values(vec![0.25, -3.0, 7.5]);
        let (block, next) = quantize(prev.values(), &prev, 8).unwrap();
        assert_eq!(block.radius, 0.0);
        assert_eq!(block.codes, vec![0, 0, 0]);
        assert_eq!(next, prev);
        assert_eq!(recover(&prev, &block).unwrap(), prev);
        assert_eq!(block.payload_bits(), 32 + 24);
    }

    #[test]
    fn error_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for trial in 0..10_000 {
            let beta = [1, 2, 4, 8][trial % 4];
            let n = rng.random_range(1..20);
            let scale = 10f64.powi(rng.random_range(-3..3));
            let g: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let prev = QuantState::from_values((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
            let (block, next) = quantize(&g, &prev, beta).unwrap();
            let bound = tau::<f64>(beta) * block.radius as f64 + 1e-9;
            for (x, y) in g.iter().zip(next.values()) {
                assert!((x - y).abs() <= bound, "beta {beta}: |{x} - {y}| > {bound}");
            }
        }
    }

    #[test]
    fn chained_rounds_stay_in_lockstep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let mut signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sender = QuantState::zeros(n);
        let mut receiver = QuantState::zeros(n);
        for _ in 0..100 {
            for s in &mut signal {
                *s += 0.1 * rng.random_range(-1.0..1.0);
            }
            let (block, next) = quantize(&signal, &sender, 4).unwrap();
            let wire = pack(&block.codes, block.beta).unwrap();
            let received = QuantizedBlock {
                radius: block.radius,
                codes: unpack(&wire, 4, n).unwrap(),
                beta: 4,
            };
            receiver = recover(&receiver, &received).unwrap();
            sender = next;
            assert!(sender.bit_eq(&receiver));
        }
    }

    #[test]
    fn length_and_value_errors() {
        let prev = QuantState::<f64>::zeros(3);
        assert!(quantize(&[1.0, 2.0], &prev, 8).is_err());
        assert!(quantize(&[1.0, f64::NAN, 0.0], &prev, 8).is_err());
        assert!(quantize(&[1.0, 2.0, 3.0], &prev, 0).is_err());
        assert!(quantize(&[1.0, 2.0, 3.0], &prev, 17).is_err());
        let block = QuantizedBlock {
            radius: 1.0,
            codes: vec![1, 2],
            beta: 8,
        };
        assert!(recover(&prev, &block).is_err());
        let block = QuantizedBlock {
            radius: 1.0,
            codes: vec![1, 2, 300],
            beta: 8,
        };
        assert!(recover(&prev, &block).is_err());
    }

    #[test]
    fn pack_layout() {
        let codes = [3u16, 200, 0, 255];
        assert_eq!(pack(&codes, 8).unwrap(), vec![3, 200, 0, 255]);
        assert_eq!(pack(&[1, 0, 1, 1, 0, 0, 0, 0], 1).unwrap(), vec![0b0000_1101]);
        // 12-bit codes 0xABC, 0x123 → stream 0x123ABC little-endian
        assert_eq!(pack(&[0xABC, 0x123], 12).unwrap(), vec![0xBC, 0x3A, 0x12]);
        assert_eq!(pack(&[1, 1, 1], 3).unwrap().len(), 2);
        assert!(pack(&[4], 2).is_err());
        assert!(unpack(&[0], 8, 2).is_err());
    }

    proptest! {
        #[test]
        fn pack_roundtrip(beta in 1u8..=16, raw in prop::collection::vec(any::<u16>(), 0..200)) {
            let mask = ((1u32 << beta) - 1) as u16;
            let codes: Vec<u16> = raw.iter().map(|c| c & mask).collect();
            let bytes = pack(&codes, beta).unwrap();
            prop_assert_eq!(bytes.len(), packed_len(beta, codes.len()));
            prop_assert_eq!(unpack(&bytes, beta, codes.len()).unwrap(), codes);
        }

        #[test]
        fn bound_for_every_beta(beta in 1u8..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            let prev = QuantState::from_values((0..16).map(|_| rng.random_range(-5.0..5.0)).collect());
            let (block, next) = quantize(&g, &prev, beta).unwrap();
            prop_assert_eq!(block.payload_bits(), 32 + beta as u64 * 16);
            let bound = tau::<f64>(beta) * block.radius as f64 + 1e-9;
            for (x, y) in g.iter().zip(next.values()) {
                prop_assert!((x - y).abs() <= bound);
            }
        }
    }
}

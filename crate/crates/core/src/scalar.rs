//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar usable by the tensor engine: `f32` (default compute) or `f64`
/// (gradient checks and equivalence tests).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Name written to checkpoint manifests.
    const DTYPE: &'static str;
    /// Width of one little-endian encoded value.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<S: Scalar>(xs: impl IntoIterator<Item = S> + Clone) -> S {
    let max = xs
        .clone()
        .into_iter()
        .fold(S::neg_infinity(), |m, x| if x > m { x } else { m });
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of one row, in place. Entries equal to `-inf` get probability 0.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row
        .iter()
        .fold(S::neg_infinity(), |m, &x| if x > m { x } else { m });
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }

    #[test]
    fn lse_matches_naive() {
        let xs = [0.1f64, -2.0, 3.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs) - naive).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>([]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_masks_neg_inf() {
        let mut row = [0.0f64, f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row, [0.5, 0.0, 0.5]);
    }
}

//! Floating-point abstraction for the numeric core.
//!
//! Everything that does arithmetic (policy, decoding scores, BM25, metrics,
//! mutual information) is generic over [`Scalar`] so the same code runs in
//! `f32` and `f64`. The shipped pipeline instantiates `f64`; snapshots store
//! IEEE doubles regardless of the working type.

/// Trait bound for the scalar type used throughout the numeric core.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if the target type cannot represent any finite value of the
/// argument's magnitude, which cannot happen for the constants used here.
pub fn scalar<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("constant representable in scalar type")
}

/// Converts a count into the working scalar type.
pub fn count<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        let x: f32 = scalar(0.25);
        assert_eq!(x, 0.25f32);
        let y: f64 = count(100);
        assert_eq!(y, 100.0);
    }

    #[test]
    fn works_for_both_widths() {
        fn mean<S: Scalar>(xs: &[S]) -> S {
            xs.iter().copied().sum::<S>() / count(xs.len())
        }
        assert_eq!(mean(&[1.0f64, 2.0, 3.0]), 2.0);
        assert_eq!(mean(&[1.0f32, 2.0, 3.0]), 2.0);
    }
}

//! Scalar abstraction: every numeric routine in this crate is generic over
//! the floating-point type so the same code serves f32 pipelines (checkpoint
//! compatible) and f64 verification runs (finite-difference friendly).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Cast an f64 literal into the working scalar type.
#[inline]
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("literal representable in scalar type")
}

/// Lexicographic total order over equal-length slices; inputs must be NaN-free.
pub fn lex_cmp<F: Scalar>(a: &[F], b: &[F]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(ord) => return ord,
        }
    }
    a.len().cmp(&b.len())
}

use std::fmt;
use std::iter::Sum;

/// Scalar types the tape can differentiate through.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + Sum
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Lossy conversion from f64 into any element type.
pub fn elem<T: Element>(x: f64) -> T {
    T::from(x).expect("f64 not representable in element type")
}

/// Count conversion; exact for the array sizes this crate works with.
pub fn elem_usize<T: Element>(n: usize) -> T {
    elem(n as f64)
}

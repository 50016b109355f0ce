//! Floating-point abstraction shared by the rasterizer and the autodiff tape.
//!
//! Everything numeric that participates in training is generic over [`Real`]
//! so the same code runs in `f32` (training) and `f64` (gradient verification).

use std::fmt::Debug;

use num_traits::{Float, FloatConst, NumAssign};

pub trait Real:
    Float + FloatConst + NumAssign + Copy + Default + Debug + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Pairwise (cascade) summation with a fixed split schedule.
///
/// The result depends only on the input order, never on thread scheduling.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(x)` over `values`.
pub fn pairwise_sum_by<T: Real, U>(values: &[U], f: impl Fn(&U) -> T + Copy) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = T::zero();
        for v in values {
            acc += f(v);
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum_by(&values[..mid], f) + pairwise_sum_by(&values[mid..], f)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

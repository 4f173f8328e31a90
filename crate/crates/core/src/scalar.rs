//! Floating-point abstraction shared by the graph, spectral and splitting code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the dense linear-algebra routines.
///
/// Tolerances are per-type so that `f32` callers get thresholds that are
/// achievable at single precision.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Largest asymmetry `max |S - Sᵀ|` accepted by symmetric routines.
    fn symmetry_tol() -> Self;
    /// Off-diagonal Frobenius norm at which Jacobi sweeps stop.
    fn jacobi_tol() -> Self;
    /// Relative tolerance for power iteration.
    fn power_tol() -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn symmetry_tol() -> Self {
        1e-10
    }
    fn jacobi_tol() -> Self {
        1e-12
    }
    fn power_tol() -> Self {
        1e-10
    }
}

impl Scalar for f32 {
    fn symmetry_tol() -> Self {
        1e-5
    }
    fn jacobi_tol() -> Self {
        1e-6
    }
    fn power_tol() -> Self {
        1e-5
    }
}

//! Float math routed through `libm`.
//!
//! Every transcendental in this crate goes through these wrappers instead of
//! the `std` inherent methods. `libm` is pure-Rust software math, so datasets,
//! training trajectories, and metric logs come out bit-identical on every
//! platform; `std` floats defer to the system libm, which is not guaranteed
//! to round identically across OSes.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

/// Natural log of 2π, used by the Gaussian log-density normalizer.
pub const LN_TAU: f64 = 1.8378770664093453;

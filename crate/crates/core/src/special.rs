//! Complementary error function helpers.

use std::f64::consts::PI;

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
///
/// Below 5 the product is formed directly; above, a continued fraction avoids
/// the underflow of `erfc` and the overflow of `exp(x^2)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 5.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for n in (1..=60).rev() {
        tail = x + (n as f64 * 0.5) / tail;
    }
    1.0 / (tail * PI.sqrt())
}

/// `exp(-a^2) * erfcx(b)` without forming either factor separately when that
/// would overflow.
pub fn gauss_erfcx(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        (-a * a).exp() * erfcx(b)
    } else {
        (b * b - a * a).exp() * libm::erfc(b)
    }
}

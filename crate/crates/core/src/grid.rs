//! Uniformly sampled real functions.

use serde::{Deserialize, Serialize};

/// A real function sampled on the uniform grid `start + i * step`, read back by
/// linear interpolation and held constant outside the sampled range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Self {
        assert!(step > 0.0, "grid step must be positive");
        Self { start, step, values }
    }

    /// Samples `f` at `n + 1` nodes covering `[start, start + n * step]`.
    pub fn sample(start: f64, step: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=n).map(|i| f(start + i as f64 * step)).collect();
        Self::new(start, step, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.node(self.values.len().saturating_sub(1))
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| self.node(i))
    }

    /// Linear interpolation, constant extension beyond both ends.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        match n {
            0 => f64::NAN,
            1 => self.values[0],
            _ => {
                let u = (x - self.start) / self.step;
                if u <= 0.0 {
                    return self.values[0];
                }
                if u >= (n - 1) as f64 {
                    return self.values[n - 1];
                }
                let i = u.floor() as usize;
                let w = u - i as f64;
                self.values[i] * (1.0 - w) + self.values[i + 1] * w
            }
        }
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sup distance after reading `other` at this grid's nodes.
    pub fn sup_distance_interp(&self, other: &GridFunction) -> f64 {
        self.nodes()
            .zip(&self.values)
            .map(|(x, v)| (v - other.eval(x)).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_nondecreasing(&self, tol: f64) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

/// Inverse of a nondecreasing grid function, sampled on a uniform grid of the
/// value axis. Flat sections are crossed to their right end, which gives the
/// right-continuous inverse `inf { x : f(x) > y }`.
pub fn right_inverse(f: &GridFunction, y: f64) -> f64 {
    let v = &f.values;
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let k = v.partition_point(|&val| val <= y);
    if k == 0 {
        return f.start;
    }
    if k == n {
        return f.end();
    }
    let (a, b) = (v[k - 1], v[k]);
    let w = if b > a { (y - a) / (b - a) } else { 0.0 };
    f.node(k - 1) + w * f.step
}

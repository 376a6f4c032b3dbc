//! Delayed Poissonian mean-field integrate-and-fire dynamics: time-change
//! solver, buffer regularization, first-passage kernels and a finite-size
//! particle simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod grid;
pub mod model;
pub mod special;
pub mod fpt;
pub mod buffer;
pub mod timechange;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Send, U: Send>(items: Vec<T>, f: impl Fn(T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, U>(items: Vec<T>, f: impl Fn(T) -> U) -> Vec<U> {
    items.into_iter().map(f).collect()
}
pub mod particles;

//! Minimal reverse-mode autodiff over dense tensors, sized for small
//! convolutional/recurrent models on CPU. Supports f32 training and f64
//! graphs for finite-difference checks.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use params::ParamSet;

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2};

/// Scalar element type for tensors: f32 for training, f64 for gradient checks.
pub trait Elem:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// `out += a . b`, split over row chunks when large enough to pay for threads.
pub fn matmul_acc<E: Elem>(a: ArrayView2<E>, b: ArrayView2<E>, out: &mut ArrayViewMut2<E>) {
    let m = a.nrows();
    // Chunked rows keep per-element accumulation order fixed, so results are
    // bit-identical regardless of thread count.
    const CHUNK: usize = 256;
    if m >= 2 * CHUNK && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        let a_rows: Vec<ArrayView2<E>> = a
            .axis_chunks_iter(ndarray::Axis(0), CHUNK)
            .map(|c| c)
            .collect();
        let out_rows: Vec<ArrayViewMut2<E>> = out
            .axis_chunks_iter_mut(ndarray::Axis(0), CHUNK)
            .collect();
        a_rows
            .into_par_iter()
            .zip(out_rows.into_par_iter())
            .for_each(|(ac, mut oc)| {
                ndarray::linalg::general_mat_mul(E::one(), &ac, &b, E::one(), &mut oc);
            });
    } else {
        ndarray::linalg::general_mat_mul(E::one(), &a, &b, E::one(), out);
    }
}

/// `a . b` into a fresh array.
pub fn matmul<E: Elem>(a: ArrayView2<E>, b: ArrayView2<E>) -> ndarray::Array2<E> {
    let mut out = ndarray::Array2::zeros((a.nrows(), b.ncols()));
    matmul_acc(a, b, &mut out.view_mut());
    out
}

/// True if every element is finite.
pub fn all_finite<E: Elem>(a: &ArrayD<E>) -> bool {
    a.iter().all(|v| v.is_finite())
}

//! im2col/col2im helpers shared by the convolution and transposed-convolution
//! graph ops. Layout is NHWC with channels contiguous.

use super::Elem;
use ndarray::{Array2, ArrayView4, ArrayViewMut4};

/// Geometry of one (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub batch: usize,
    /// Input spatial size (square images).
    pub in_hw: usize,
    pub in_ch: usize,
    /// Output spatial size.
    pub out_hw: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMeta {
    /// Forward convolution geometry for a square input.
    pub fn conv(batch: usize, in_hw: usize, in_ch: usize, out_ch: usize) -> Self {
        let (kernel, stride, pad) = (4, 2, 1);
        let out_hw = (in_hw + 2 * pad - kernel) / stride + 1;
        ConvMeta {
            batch,
            in_hw,
            in_ch,
            out_hw,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Transposed convolution with input side `in_hw` and doubled output side.
    ///
    /// Returned meta is in *underlying conv* orientation: `in_hw`/`in_ch`
    /// describe the convT OUTPUT image (where col2im scatters) and
    /// `out_hw`/`out_ch` the convT INPUT grid. im2col/col2im are shared with
    /// the forward convolution this way.
    pub fn conv_transpose(batch: usize, in_hw: usize, in_ch: usize, out_ch: usize) -> Self {
        let (kernel, stride, pad) = (4, 2, 1);
        let out_side = (in_hw - 1) * stride + kernel - 2 * pad;
        ConvMeta {
            batch,
            in_hw: out_side,
            in_ch: out_ch,
            out_hw: in_hw,
            out_ch: in_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.batch * self.out_hw * self.out_hw
    }

    pub fn col_cols(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

/// Unfold NHWC input patches into a `[batch*out_hw*out_hw, k*k*in_ch]` matrix.
pub fn im2col<E: Elem>(x: ArrayView4<E>, m: &ConvMeta) -> Array2<E> {
    let mut col = Array2::<E>::zeros((m.col_rows(), m.col_cols()));
    let (k, s, p, hw) = (m.kernel, m.stride, m.pad as isize, m.in_hw as isize);
    for b in 0..m.batch {
        for oy in 0..m.out_hw {
            for ox in 0..m.out_hw {
                let row = (b * m.out_hw + oy) * m.out_hw + ox;
                let mut row_view = col.row_mut(row);
                let base_y = (oy * s) as isize - p;
                let base_x = (ox * s) as isize - p;
                for ky in 0..k {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= hw {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= hw {
                            continue;
                        }
                        let dst = (ky * k + kx) * m.in_ch;
                        for c in 0..m.in_ch {
                            row_view[dst + c] = x[(b, iy as usize, ix as usize, c)];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a column matrix back into NHWC, accumulating overlaps.
pub fn col2im_acc<E: Elem>(col: &Array2<E>, m: &ConvMeta, out: &mut ArrayViewMut4<E>) {
    let (k, s, p, hw) = (m.kernel, m.stride, m.pad as isize, m.in_hw as isize);
    for b in 0..m.batch {
        for oy in 0..m.out_hw {
            for ox in 0..m.out_hw {
                let row = (b * m.out_hw + oy) * m.out_hw + ox;
                let row_view = col.row(row);
                let base_y = (oy * s) as isize - p;
                let base_x = (ox * s) as isize - p;
                for ky in 0..k {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= hw {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= hw {
                            continue;
                        }
                        let src = (ky * k + kx) * m.in_ch;
                        for c in 0..m.in_ch {
                            out[(b, iy as usize, ix as usize, c)] += row_view[src + c];
                        }
                    }
                }
            }
        }
    }
}

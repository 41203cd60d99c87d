//! Patch-extraction geometry for convolutions.
//!
//! A convolution is expressed as im2col → matmul → reshape, so both its
//! parameter and input gradients fall out of the same tape machinery as
//! dense layers. `im2col` and `col2im` are adjoint linear maps: for all x, g
//! of matching shapes, ⟨im2col(x), g⟩ == ⟨x, col2im(g)⟩. `col2im` sums
//! contributions from overlapping patches, which is exactly the transpose.

use ndarray::{ArrayD, IxDyn};

use super::Scalar;

/// Geometry of one conv layer: input [batch, in_ch, in_h, in_w], square
/// stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Shape of the input tensor.
    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    /// Shape of the patch matrix: [batch·out_h·out_w, in_ch·k_h·k_w].
    pub fn col_shape(&self) -> [usize; 2] {
        [
            self.batch * self.out_h() * self.out_w(),
            self.in_ch * self.k_h * self.k_w,
        ]
    }

    pub fn valid(&self) -> bool {
        self.batch > 0
            && self.in_ch > 0
            && self.stride > 0
            && self.k_h > 0
            && self.k_w > 0
            && self.in_h + 2 * self.pad >= self.k_h
            && self.in_w + 2 * self.pad >= self.k_w
    }
}

/// Gather sliding-window patches of `x` into a [rows × patch] matrix.
/// Out-of-bounds taps (from padding) read as zero.
pub fn im2col<E: Scalar>(x: &ArrayD<E>, g: &ConvGeom) -> ArrayD<E> {
    debug_assert_eq!(x.shape(), g.input_shape());
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = ArrayD::<E>::zeros(IxDyn(&g.col_shape()));
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                for c in 0..g.in_ch {
                    for kh in 0..g.k_h {
                        let h = (i * g.stride + kh) as isize - g.pad as isize;
                        if h < 0 || h >= g.in_h as isize {
                            continue;
                        }
                        for kw in 0..g.k_w {
                            let w = (j * g.stride + kw) as isize - g.pad as isize;
                            if w < 0 || w >= g.in_w as isize {
                                continue;
                            }
                            let col = (c * g.k_h + kh) * g.k_w + kw;
                            cols[[row, col]] = x[[b, c, h as usize, w as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch values back onto the image grid.
pub fn col2im<E: Scalar>(cols: &ArrayD<E>, g: &ConvGeom) -> ArrayD<E> {
    debug_assert_eq!(cols.shape(), g.col_shape());
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = ArrayD::<E>::zeros(IxDyn(&g.input_shape()));
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                for c in 0..g.in_ch {
                    for kh in 0..g.k_h {
                        let h = (i * g.stride + kh) as isize - g.pad as isize;
                        if h < 0 || h >= g.in_h as isize {
                            continue;
                        }
                        for kw in 0..g.k_w {
                            let w = (j * g.stride + kw) as isize - g.pad as isize;
                            if w < 0 || w >= g.in_w as isize {
                                continue;
                            }
                            let col = (c * g.k_h + kh) * g.k_w + kw;
                            x[[b, c, h as usize, w as usize]] =
                                x[[b, c, h as usize, w as usize]] + cols[[row, col]];
                        }
                    }
                }
            }
        }
    }
    x
}

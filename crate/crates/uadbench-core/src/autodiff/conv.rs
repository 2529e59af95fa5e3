//! Image-to-column lowering for 2D convolutions.
//!
//! Convolution and transposed convolution are both expressed as
//! `unfold -> matmul -> reshape` (resp. `matmul -> fold`), so the tape only
//! needs the unfold/fold pair as primitives. `fold` is the exact adjoint of
//! `unfold`, which is what makes transposed convolutions and double
//! backpropagation come out right.

use ndarray::{ArrayD, IxDyn};

/// Spatial geometry of one convolution stage, always square kernels and
/// symmetric-per-axis zero padding. `in_*` is the large grid, `out_*` the
/// strided grid; a transposed convolution runs the same geometry backwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_before: usize,
    pub pad_after: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry with `out = ceil(in / stride)` and minimal zero padding,
    /// i.e. the usual "same" policy for strided downsampling.
    pub fn same(in_h: usize, in_w: usize, channels: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_total = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_before = pad_total / 2;
        let pad_after = pad_total - pad_before;
        ConvGeom {
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad_before,
            pad_after,
            out_h,
            out_w,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Lower `[n, in_h, in_w, c]` to patch columns `[n*out_h*out_w, k*k*c]`.
/// Out-of-bounds taps read as zero.
pub fn unfold(x: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "unfold expects [n, h, w, c]");
    assert_eq!(shape[1], g.in_h);
    assert_eq!(shape[2], g.in_w);
    assert_eq!(shape[3], g.channels);
    let n = shape[0];
    let (k, s, c) = (g.kernel, g.stride, g.channels);
    let pb = g.pad_before as isize;

    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let rows = n * g.out_h * g.out_w;
    let cols = g.patch_len();
    let mut out = vec![0.0f64; rows * cols];

    for b in 0..n {
        let base_in = b * g.in_h * g.in_w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * cols;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pb;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = base_in + iy as usize * g.in_w * c;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pb;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = in_row + ix as usize * c;
                        let dst = row + (ky * k + kx) * c;
                        out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).unwrap()
}

/// Adjoint of [`unfold`]: scatter-add patch columns back onto the
/// `[n, in_h, in_w, c]` grid.
pub fn fold(cols: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let shape = cols.shape();
    assert_eq!(shape.len(), 2, "fold expects [rows, patch]");
    assert_eq!(shape[1], g.patch_len());
    let per_img = g.out_h * g.out_w;
    assert_eq!(shape[0] % per_img, 0, "row count must cover whole images");
    let n = shape[0] / per_img;
    let (k, s, c) = (g.kernel, g.stride, g.channels);
    let pb = g.pad_before as isize;

    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; n * g.in_h * g.in_w * c];
    let patch = g.patch_len();

    for b in 0..n {
        let base_in = b * g.in_h * g.in_w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pb;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = base_in + iy as usize * g.in_w * c;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pb;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = in_row + ix as usize * c;
                        let src = row + (ky * k + kx) * c;
                        for j in 0..c {
                            out[dst + j] += cs[src + j];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, g.in_h, g.in_w, c]), out).unwrap()
}

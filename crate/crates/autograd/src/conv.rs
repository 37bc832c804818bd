//! im2col-based 2-D convolution kernels (NCHW layout).

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::Real;

/// Geometry of a strided 2-D convolution with per-side zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    /// (top, bottom, left, right)
    pub padding: (usize, usize, usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize, usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Stride `s` in both directions with symmetric padding `p`.
    pub fn square(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (pad, pad, pad, pad),
        }
    }

    /// Output spatial size for an input of `(h, w)` and kernel `(kh, kw)`,
    /// or `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (pt, pb, pl, pr) = self.padding;
        let ph = h + pt + pb;
        let pw = w + pl + pr;
        if ph < kh || pw < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

/// Geometry of a transposed convolution with symmetric padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let oh = ((h.checked_sub(1)?) * self.stride + kh).checked_sub(2 * self.padding)?;
        let ow = ((w.checked_sub(1)?) * self.stride + kw).checked_sub(2 * self.padding)?;
        if oh == 0 || ow == 0 || self.stride == 0 {
            return None;
        }
        Some((oh, ow))
    }

    /// The forward convolution whose adjoint this transposed convolution is.
    pub(crate) fn as_conv(&self) -> Conv2dSpec {
        Conv2dSpec::square(self.stride, self.padding)
    }
}

/// Geometry shared by im2col and col2im.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patch {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn src_index(&self, oy: usize, ki: usize, ox: usize, kj: usize) -> Option<(usize, usize)> {
        let (pt, _, pl, _) = self.spec.padding;
        let iy = (oy * self.spec.stride.0 + ki).checked_sub(pt)?;
        let ix = (ox * self.spec.stride.1 + kj).checked_sub(pl)?;
        if iy < self.h && ix < self.w {
            Some((iy, ix))
        } else {
            None
        }
    }
}

/// Unfolds one image `[c, h, w]` into columns `[c*kh*kw, oh*ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], p: &Patch, cols: &mut ArrayViewMut2<T>) {
    for ci in 0..p.c {
        let plane = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (ci * p.kh + ki) * p.kw + kj;
                let mut dst = cols.row_mut(row);
                for oy in 0..p.oh {
                    for ox in 0..p.ow {
                        dst[oy * p.ow + ox] = match p.src_index(oy, ki, ox, kj) {
                            Some((iy, ix)) => plane[iy * p.w + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image `[c, h, w]`.
pub(crate) fn col2im<T: Real>(cols: &ArrayView2<T>, p: &Patch, x: &mut [T]) {
    for ci in 0..p.c {
        let plane = &mut x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (ci * p.kh + ki) * p.kw + kj;
                let src = cols.row(row);
                for oy in 0..p.oh {
                    for ox in 0..p.ow {
                        if let Some((iy, ix)) = p.src_index(oy, ki, ox, kj) {
                            plane[iy * p.w + ix] += src[oy * p.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn output_sizes() {
        let s = Conv2dSpec::square(2, 1);
        assert_eq!(s.output_hw(32, 32, 3, 3), Some((16, 16)));
        assert_eq!(Conv2dSpec::square(1, 1).output_hw(7, 5, 3, 3), Some((7, 5)));
        assert_eq!(Conv2dSpec::square(1, 0).output_hw(2, 2, 3, 3), None);
        let t = ConvTranspose2dSpec::new(2, 1);
        assert_eq!(t.output_hw(8, 8, 4, 4), Some((16, 16)));
        assert_eq!(ConvTranspose2dSpec::new(2, 0).output_hw(8, 8, 2, 2), Some((16, 16)));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let p = Patch {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            oh: 0,
            ow: 0,
            spec: Conv2dSpec::new((2, 1), (1, 0, 1, 1)),
        };
        let (oh, ow) = p.spec.output_hw(5, 4, 3, 2).unwrap();
        let p = Patch { oh, ow, ..p };
        let x: Vec<f64> = (0..p.c * p.h * p.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let c = Array2::from_shape_fn((p.rows(), p.cols()), |(i, j)| ((i * 7 + j) as f64).cos());
        let mut cols = Array2::zeros((p.rows(), p.cols()));
        im2col(&x, &p, &mut cols.view_mut());
        let lhs: f64 = (&cols * &c).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c.view(), &p, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}

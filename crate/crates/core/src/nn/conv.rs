//! im2col / col2im for cubic-kernel 3-D convolutions.

use super::tensor::Scalar;

/// Geometry shared by a convolution and its transpose.
///
/// `big` is the spatial extent of the convolution input (the transpose's
/// output), `small` the convolution output (the transpose's input).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(c: usize, big: [usize; 3], small: [usize; 3], k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { c, big, small, k, stride, pad }
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k * self.k
    }

    /// Calls `f(row, col, big_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [bd, bh, bw] = self.big;
        let [sd, sh, sw] = self.small;
        let k = self.k;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..self.c {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        for od in 0..sd {
                            let id = od as isize * s - p + kd as isize;
                            if id < 0 || id >= bd as isize {
                                continue;
                            }
                            for oh in 0..sh {
                                let ih = oh as isize * s - p + kh as isize;
                                if ih < 0 || ih >= bh as isize {
                                    continue;
                                }
                                let col_base = (od * sh + oh) * sw;
                                let big_base = ((c * bd + id as usize) * bh + ih as usize) * bw;
                                for ow in 0..sw {
                                    let iw = ow as isize * s - p + kw as isize;
                                    if iw < 0 || iw >= bw as isize {
                                        continue;
                                    }
                                    f(row, col_base + ow, big_base + iw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x` (`[c, big]`) into `cols` (`[c k^3, small]`).
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    cols.iter_mut().for_each(|v| *v = T::zero());
    let n = g.small_len();
    g.for_each_tap(|row, col, bi| cols[row * n + col] = x[bi]);
}

/// Adjoint of [`im2col`]: scatters `cols` back into `x`, accumulating.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let n = g.small_len();
    g.for_each_tap(|row, col, bi| x[bi] += cols[row * n + col]);
}

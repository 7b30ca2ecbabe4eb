//! Dense kernels shared by the tape primitives.

/// Row-major matrix view described by explicit strides so transposes are free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of a row-major `rows × cols` buffer as its transpose.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `out = beta·out + a·b` where `a` is `m×k`, `b` is `k×n`, `out` is row-major `m×n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides describe in-bounds accesses for the stated dimensions,
    // which every caller derives from the buffer lengths it checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 zero-padded convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.k_h
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.k_w
    }

    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Walks every (output row, patch offset, input offset) triple that lands inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plen = self.patch_len();
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * plen;
                    for ky in 0..self.k_h {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.k_w {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((n * self.in_h + iy as usize) * self.in_w + ix as usize)
                                * self.in_c;
                            let dst = row + (ky * self.k_w + kx) * self.in_c;
                            f(dst, src, self.in_c);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.out_rows() * self.patch_len()];
        self.for_each_tap(|dst, src, len| {
            cols[dst..dst + len].copy_from_slice(&input[src..src + len])
        });
        cols
    }

    pub fn col2im_add(&self, cols: &[f64], input_grad: &mut [f64]) {
        self.for_each_tap(|dst, src, len| {
            input_grad[src..src + len]
                .iter_mut()
                .zip(&cols[dst..dst + len])
                .for_each(|(g, c)| *g += c)
        });
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, in the overflow-free form.
#[inline]
pub(crate) fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

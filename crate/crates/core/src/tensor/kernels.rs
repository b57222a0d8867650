//! Dense kernels shared by the forward and backward passes.

/// Row-major matrix view with optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after transposition.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out`, all row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides describe slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let (m, _) = a.dims();
    let (_, n) = b.dims();
    let mut out = vec![0.0; m * n];
    gemm(a, b, &mut out, 0.0);
    out
}

/// Geometry of a 2-D convolution over one image.
///
/// For transposed convolutions the same struct describes the adjoint
/// convolution: `in_*` is the transposed-conv output and `out_*` its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Calls `f(row, col, image_index)` for every in-bounds patch entry.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = oy * self.out_w + ox;
                for c in 0..self.channels {
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let col = (c * self.kh + ky) * self.kw + kx;
                            let idx = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(row * patch, col, idx);
                        }
                    }
                }
            }
        }
    }

    /// Writes the `[positions, patch_len]` patch matrix of one image.
    pub(crate) fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.positions() * self.patch_len());
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|base, col, idx| cols[base + col] = image[idx]);
    }

    /// Scatter-adds a patch matrix back onto one image.
    pub(crate) fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        debug_assert_eq!(image.len(), self.image_len());
        self.for_each_tap(|base, col, idx| image[idx] += cols[base + col]);
    }
}

/// Output side length of a convolution, or `None` when it would be empty.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    let full = (input.checked_sub(1)?) * stride + kernel + output_pad;
    full.checked_sub(2 * pad).filter(|&n| n > 0)
}

/// `[n, c, p]` → `[n * p, c]`.
pub(crate) fn nchw_to_rows(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * p..(i * c + ch + 1) * p];
            for (s, v) in src.iter().enumerate() {
                out[(i * p + s) * c + ch] = *v;
            }
        }
    }
    out
}

/// `[n * p, c]` → `[n, c, p]`.
pub(crate) fn rows_to_nchw(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for s in 0..p {
            let row = &x[(i * p + s) * c..(i * p + s + 1) * c];
            for (ch, v) in row.iter().enumerate() {
                out[(i * c + ch) * p + s] = *v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let want = naive(&a, &b, 2, 3, 4);
        let got = matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }

        // aᵀ stored as 3x2
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let got = matmul(MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_arithmetic() {
        assert_eq!(conv_out_len(16, 3, 2, 1), Some(8));
        assert_eq!(conv_out_len(5, 3, 1, 0), Some(3));
        assert_eq!(conv_out_len(1, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_len(8, 3, 2, 1, 1), Some(16));
        assert_eq!(conv_transpose_out_len(3, 3, 1, 0, 0), Some(5));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom {
            channels: 2,
            in_h: 5,
            in_w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let c: Vec<f64> = (0..g.positions() * g.patch_len())
            .map(|i| (i as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; c.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

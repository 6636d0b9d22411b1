//! Raw numeric kernels shared by the graph ops.

use super::GraphError;

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`,
/// all row-major. `trans_a` / `trans_b` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output side `ceil(in / stride)`; `(k - 1) / 2` zero rows/cols before, the rest after.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, GraphError> {
        let mismatch = || GraphError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || kernel[2] != input[3] || stride == 0 {
            return Err(mismatch());
        }
        let [n, h, w, cin] = [input[0], input[1], input[2], input[3]];
        let [kh, kw, _, cout] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => (h.div_ceil(stride), w.div_ceil(stride), (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(mismatch());
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_image_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    /// A 1x1 stride-1 convolution reads its input directly as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Row offset in the input for output row `o` and kernel row `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&v| v < limit)
    }

    /// Patch matrix `[ho*wo, kh*kw*cin]` for one image of the batch.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let plen = self.patch_len();
        debug_assert_eq!(cols.len(), self.out_pixels() * plen);
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = self.src(oy, ky, self.pad_top, self.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        match (iy, self.src(ox, kx, self.pad_left, self.w)) {
                            (Some(iy), Some(ix)) => dst.copy_from_slice(
                                &image[(iy * self.w + ix) * self.cin..][..self.cin],
                            ),
                            _ => dst.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of a patch-matrix gradient back onto one input image.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let plen = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox, kx, self.pad_left, self.w) else {
                            continue;
                        };
                        let dst = &mut image[(iy * self.w + ix) * self.cin..][..self.cin];
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function; the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

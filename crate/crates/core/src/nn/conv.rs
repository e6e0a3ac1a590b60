//! im2col lowering for 2-D convolution with zero "same"-style padding `k / 2`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        out_extent(self.height, self.width, self.kernel, self.stride)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }
}

pub(crate) fn out_extent(h: usize, w: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let pad = kernel / 2;
    (
        (h + 2 * pad - kernel) / stride + 1,
        (w + 2 * pad - kernel) / stride + 1,
    )
}

/// Lowers an NCHW input into a `[C*k*k, N*Ho*Wo]` row-major matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let pad = g.pad() as isize;
    let plane = ho * wo;
    let cols = g.batch * plane;
    let mut col = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..][..g.width];
                        let dst = &mut dst_row[n * plane + oh * wo..][..wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the NCHW input.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let pad = g.pad() as isize;
    let plane = ho * wo;
    let cols = g.batch * plane;
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst =
                        &mut x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[n * plane + oh * wo..][..wo];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                dst[ih as usize * g.width + iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, N*P]` (channel-major) to `[N, C, P]` (NCHW).
pub(crate) fn channel_major_to_nchw(
    src: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..channels {
        for n in 0..batch {
            let s = &src[c * batch * plane + n * plane..][..plane];
            out[(n * channels + c) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// `[N, C, P]` (NCHW) to `[C, N*P]`.
pub(crate) fn nchw_to_channel_major(
    src: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for n in 0..batch {
        for c in 0..channels {
            let s = &src[(n * channels + c) * plane..][..plane];
            out[c * batch * plane + n * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

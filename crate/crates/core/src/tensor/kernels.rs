//! Raw numeric kernels on flat buffers. Shapes are validated by the caller.

/// `c = a·b (+ c if accumulate)` where `a` is `m×k` and `b` is `k×n`,
/// each optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) buffers whose lengths are asserted above.
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

/// Geometry of one 2D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch. `out` must be `N×F×out_h×out_w`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    filters: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let o = &mut out[n * out_len..(n + 1) * out_len];
        gemm(filters, g.col_rows(), g.col_cols(), w, false, &cols, false, o, false);
        if let Some(b) = bias {
            for (f, chunk) in o.chunks_mut(g.col_cols()).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[f]);
            }
        }
    }
}

/// Gradients of a batched convolution. Each output slot is accumulated into
/// when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    filters: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let go = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (f, chunk) in go.chunks(g.col_cols()).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(filters, g.col_cols(), g.col_rows(), go, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(g.col_rows(), filters, g.col_cols(), w, true, go, false, &mut cols, false);
            col2im(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// 2×2 stride-2 transposed convolution. `w` is laid out `C×F×2×2`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn up2_forward(
    batch: usize,
    channels: usize,
    filters: usize,
    h: usize,
    w_: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let hw = h * w_;
    let mut y = vec![0.0; filters * 4 * hw];
    for n in 0..batch {
        let xs = &x[n * channels * hw..(n + 1) * channels * hw];
        gemm(filters * 4, channels, hw, w, true, xs, false, &mut y, false);
        let o = &mut out[n * filters * 4 * hw..(n + 1) * filters * 4 * hw];
        for f in 0..filters {
            let b = bias.map_or(0.0, |b| b[f]);
            for a in 0..2 {
                for bb in 0..2 {
                    let yrow = &y[(f * 4 + a * 2 + bb) * hw..(f * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        for j in 0..w_ {
                            o[f * 4 * hw + (2 * i + a) * 2 * w_ + 2 * j + bb] = yrow[i * w_ + j] + b;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn up2_backward(
    batch: usize,
    channels: usize,
    filters: usize,
    h: usize,
    w_: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let hw = h * w_;
    let mut dy = vec![0.0; filters * 4 * hw];
    for n in 0..batch {
        let go = &dout[n * filters * 4 * hw..(n + 1) * filters * 4 * hw];
        for f in 0..filters {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dy[(f * 4 + a * 2 + bb) * hw..(f * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        for j in 0..w_ {
                            row[i * w_ + j] = go[f * 4 * hw + (2 * i + a) * 2 * w_ + 2 * j + bb];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (f, chunk) in go.chunks(4 * hw).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        let xs = &x[n * channels * hw..(n + 1) * channels * hw];
        if let Some(dw) = dw.as_deref_mut() {
            gemm(channels, hw, filters * 4, xs, false, &dy, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let d = &mut dx[n * channels * hw..(n + 1) * channels * hw];
            gemm(channels, filters * 4, hw, w, false, &dy, false, d, true);
        }
    }
}

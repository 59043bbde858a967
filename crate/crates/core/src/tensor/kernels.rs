//! Dense loops shared by the tape primitives. All reductions run
//! left-to-right over the flat buffers.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_at_b(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm(a, &bt, out, m, k, n);
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `[batch, c, n]` to `[c, batch * n]`.
pub fn channel_major(x: &[f64], batch: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            out[(ch * batch + b) * n..][..n].copy_from_slice(&x[(b * c + ch) * n..][..n]);
        }
    }
    out
}

/// `[c, batch * n]` to `[batch, c, n]`.
pub fn batch_major(x: &[f64], batch: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            out[(b * c + ch) * n..][..n].copy_from_slice(&x[(ch * batch + b) * n..][..n]);
        }
    }
    out
}

/// Unfolds every image of a `[batch, c, h, w]` buffer into one
/// `[col_rows, batch * col_cols]` matrix.
pub fn im2col_batch(x: &[f64], g: &ConvGeom, batch: usize) -> Vec<f64> {
    let (ncols, img) = (g.col_cols(), g.channels * g.height * g.width);
    let ld = batch * ncols;
    let mut cols = vec![0.0; g.col_rows() * ld];
    for b in 0..batch {
        im2col(&x[b * img..(b + 1) * img], g, &mut cols[b * ncols..], ld);
    }
    cols
}

/// Adjoint of [`im2col_batch`], accumulating into `x`.
pub fn col2im_batch(cols: &[f64], g: &ConvGeom, batch: usize, x: &mut [f64]) {
    let (ncols, img) = (g.col_cols(), g.channels * g.height * g.width);
    let ld = batch * ncols;
    for b in 0..batch {
        col2im(&cols[b * ncols..], g, &mut x[b * img..(b + 1) * img], ld);
    }
}

/// Sliding-window geometry of a 2-D convolution over a `[c, h, w]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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

/// Output extent of a convolution, or `None` when the window does not fit.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output extent of a transposed convolution: `(size - 1) * stride - 2 * pad + k`.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if size == 0 || stride == 0 {
        return None;
    }
    ((size - 1) * stride + k).checked_sub(2 * pad).filter(|&n| n > 0)
}

/// Unfolds one image into `cols`, whose rows are `ld` apart; the image's
/// columns start at the beginning of each row.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld..row * ld + ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + ih as usize) * g.width..][..g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image; adjoint of [`im2col`].
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld..row * ld + ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + ih as usize) * g.width..][..g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
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

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(&a, &b, &mut out, 2, 3, 4);

        let at = transpose(&a, 2, 3);
        let mut out2 = vec![0.0; 8];
        gemm_at_b(&at, &b, &mut out2, 3, 2, 4);
        assert_eq!(out, out2);

        let bt = transpose(&b, 3, 4);
        let mut out3 = vec![0.0; 8];
        gemm_a_bt(&a, &bt, &mut out3, 2, 3, 4);
        assert_eq!(out, out3);
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let cm = channel_major(&x, 2, 3, 4);
        assert_eq!(&cm[4..8], &x[12..16]);
        assert_eq!(batch_major(&cm, 2, 3, 4), x);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out(16, 3, 1, 1), Some(16));
        assert_eq!(conv_out(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out(1, 4, 1, 0), Some(4));
        assert_eq!(conv_transpose_out(4, 4, 2, 1), Some(8));
        assert_eq!(conv_transpose_out(8, 4, 2, 1), Some(16));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { channels: 2, height: 5, width: 4, kh: 3, kw: 2, stride: 2, pad: 1, out_h: 3, out_w: 3 };
        let img: Vec<f64> = (0..80).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let cols_probe: Vec<f64> = (0..g.col_rows() * g.col_cols() * 2).map(|v| ((v * 3) % 5) as f64).collect();
        let cols = im2col_batch(&img, &g, 2);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_batch(&cols_probe, &g, 2, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}

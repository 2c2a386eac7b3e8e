//! Tape-free forward and backward kernels.
//!
//! Convolutions are lowered to im2col + GEMM. The transposed convolution is
//! implemented as the exact adjoint of the strided convolution, so the two
//! share one geometry description.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    /// When the total padding is odd the extra row/column goes at the
    /// bottom/right.
    Same,
    Valid,
}

/// Geometry of a 2-D convolution mapping `in_c × in_h × in_w` to
/// `out_c × out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn axis_geometry(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                return Err(Error::Shape(format!("input extent {input} smaller than kernel {k}")));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}

impl ConvGeom {
    /// Geometry for convolving a `(.., in_c, in_h, in_w)` input with an
    /// `(out_c, in_c, kh, kw)` kernel.
    pub fn new(
        kernel_shape: &[usize],
        in_c: usize,
        in_h: usize,
        in_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [out_c, k_in, kh, kw] = kernel_shape[..] else {
            return Err(Error::Shape(format!("kernel must be 4-D, got {kernel_shape:?}")));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if k_in != in_c {
            return Err(Error::Shape(format!(
                "kernel expects {k_in} input channels, input has {in_c}"
            )));
        }
        let (out_h, pad_top) = axis_geometry(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = axis_geometry(in_w, kw, stride, padding)?;
        Ok(ConvGeom { in_c, out_c, kh, kw, stride, in_h, in_w, out_h, out_w, pad_top, pad_left })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output range `[lo, hi)` along an axis whose taps at offset `k` land
/// inside the input.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    // o·stride + k − pad ∈ [0, extent)
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if extent + pad > k { (extent + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Lay out receptive fields of one sample as a `(in_c·kh·kw) × (out_h·out_w)`
/// matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(ky, g.stride, g.pad_top, g.in_h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(kx, g.stride, g.pad_left, g.in_w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..ylo * g.out_w].fill(0.0);
                dst[yhi * g.out_w..].fill(0.0);
                for oy in ylo..yhi {
                    let y = oy * g.stride + ky - g.pad_top;
                    let src = &plane[y * g.in_w..(y + 1) * g.in_w];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    d[..xlo].fill(0.0);
                    d[xhi..].fill(0.0);
                    let x0 = xlo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        d[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (j, v) in d[xlo..xhi].iter_mut().enumerate() {
                            *v = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(ky, g.stride, g.pad_top, g.in_h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(kx, g.stride, g.pad_left, g.in_w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let y = oy * g.stride + ky - g.pad_top;
                    let dst = &mut plane[y * g.in_w..(y + 1) * g.in_w];
                    let s = &src[oy * g.out_w + xlo..oy * g.out_w + xhi];
                    let x0 = xlo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        for (d, v) in dst[x0..x0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dst[x0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a` (`m × k`, or `k × m` when `ta`) and
/// `b` (`k × n`, or `n × k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address them in bounds for the requested layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn conv_geom_for(x: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<ConvGeom> {
    let (_, c, h, w) = x.dims4()?;
    ConvGeom::new(kernel.shape(), c, h, w, stride, padding)
}

fn check_bias(bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::Shape(format!("bias shape {:?}, expected [{channels}]", bias.shape())));
    }
    Ok(())
}

pub fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let (n, _, _, _) = x.dims4()?;
    check_bias(bias, g.out_c)?;
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * p;
    let mut out = vec![0.0; n * out_plane];
    let mut cols = vec![0.0; rows * p];
    for b in 0..n {
        im2col(&x.data()[b * in_plane..(b + 1) * in_plane], g, &mut cols);
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        for (oc, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        gemm(g.out_c, rows, p, kernel.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::new(vec![n, g.out_c, g.out_h, g.out_w], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    g: &ConvGeom,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, _, _, _) = x.dims4()?;
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * p;
    let mut dx = vec![0.0; n * in_plane];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.out_c];
    let mut cols = vec![0.0; rows * p];
    let mut dcols = vec![0.0; rows * p];
    for b in 0..n {
        let dyb = &dy.data()[b * out_plane..(b + 1) * out_plane];
        for (oc, chunk) in dyb.chunks(p).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[b * in_plane..(b + 1) * in_plane], g, &mut cols);
        gemm(g.out_c, p, rows, dyb, false, &cols, true, 1.0, &mut dk);
        gemm(rows, g.out_c, p, kernel.data(), true, dyb, false, 0.0, &mut dcols);
        col2im(&dcols, g, &mut dx[b * in_plane..(b + 1) * in_plane]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.out_c], db)?,
    ))
}

/// Geometry of the convolution whose adjoint is the transposed convolution
/// of `y` with `kernel` at `stride`. The transposed output has `stride ×`
/// the spatial extents of `y` and `kernel.shape()[1]` channels.
pub fn tconv_geom_for(y: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    let (_, c, h, w) = y.dims4()?;
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(Error::Shape(format!("kernel must be 4-D, got {ks:?}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if ks[0] != c {
        return Err(Error::Shape(format!(
            "transposed kernel expects {} input channels, input has {c}",
            ks[0]
        )));
    }
    let g = ConvGeom::new(ks, ks[1], h * stride, w * stride, stride, Padding::Same)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok(g)
}

pub fn tconv2d_forward(y: &Tensor, kernel: &Tensor, bias: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let (n, _, _, _) = y.dims4()?;
    check_bias(bias, g.in_c)?;
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_plane = g.out_c * p;
    let hw = g.in_h * g.in_w;
    let out_plane = g.in_c * hw;
    let mut out = vec![0.0; n * out_plane];
    let mut cols = vec![0.0; rows * p];
    for b in 0..n {
        gemm(rows, g.out_c, p, kernel.data(), true, &y.data()[b * in_plane..(b + 1) * in_plane], false, 0.0, &mut cols);
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        col2im(&cols, g, dst);
        for (c, chunk) in dst.chunks_mut(hw).enumerate() {
            let bc = bias.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
    Tensor::new(vec![n, g.in_c, g.in_h, g.in_w], out)
}

/// Gradients of a transposed convolution with respect to its input, kernel
/// and bias, given the upstream gradient `dz` of its output.
pub fn tconv2d_backward(
    y: &Tensor,
    kernel: &Tensor,
    dz: &Tensor,
    g: &ConvGeom,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, _, _, _) = y.dims4()?;
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_plane = g.out_c * p;
    let hw = g.in_h * g.in_w;
    let out_plane = g.in_c * hw;
    let mut dy = vec![0.0; n * in_plane];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.in_c];
    let mut cols = vec![0.0; rows * p];
    for b in 0..n {
        let dzb = &dz.data()[b * out_plane..(b + 1) * out_plane];
        for (c, chunk) in dzb.chunks(hw).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
        im2col(dzb, g, &mut cols);
        gemm(g.out_c, rows, p, kernel.data(), false, &cols, false, 0.0, &mut dy[b * in_plane..(b + 1) * in_plane]);
        gemm(g.out_c, p, rows, &y.data()[b * in_plane..(b + 1) * in_plane], false, &cols, true, 1.0, &mut dk);
    }
    Ok((
        Tensor::new(y.shape().to_vec(), dy)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.in_c], db)?,
    ))
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index that won. Ties go to the first element in
/// row-major window order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even extents, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub(crate) fn check_alpha(alpha: &Tensor, channels: usize) -> Result<()> {
    if alpha.shape() != [channels] {
        return Err(Error::Shape(format!(
            "prelu alpha shape {:?}, expected [{channels}]",
            alpha.shape()
        )));
    }
    if let Some(a) = alpha.data().iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::InvalidArgument(format!("prelu alpha {a} outside (0, 1)")));
    }
    Ok(())
}

#[inline]
pub fn prelu_scalar(x: f64, alpha: f64) -> f64 {
    x.max(0.0) + alpha * x.min(0.0)
}

pub fn prelu_forward(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    check_alpha(alpha, c)?;
    let hw = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = alpha.data()[i % c];
        chunk.iter_mut().for_each(|v| *v = prelu_scalar(*v, a));
    }
    Ok(out)
}

/// Per-channel moments over batch and spatial axes (biased variance).
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in x.data().chunks(hw).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in x.data().chunks(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::new(&[1, 1, 3, 3], 1, 8, 8, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (8, 1));
        let g = ConvGeom::new(&[1, 1, 3, 3], 1, 8, 8, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 0));
        let g = ConvGeom::new(&[1, 1, 2, 2], 1, 8, 8, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 0));
        let g = ConvGeom::new(&[1, 1, 3, 3], 1, 8, 8, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.pad_top), (6, 0));
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(
            ConvGeom::new(&[1, 2, 3, 3], 1, 8, 8, 1, Padding::Same),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ConvGeom::new(&[1, 1, 3, 3], 1, 8, 8, 0, Padding::Same),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ConvGeom::new(&[1, 1, 3, 3], 1, 2, 2, 1, Padding::Valid).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

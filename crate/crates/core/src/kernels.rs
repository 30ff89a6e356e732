//! Forward and backward kernels for the linear operators.
//!
//! All reductions run in a fixed order so repeated calls are bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dot product with four interleaved accumulators (fixed reduction order).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api != 0.0 {
                axpy(api, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Matrix product of `a[M×K]` and `b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `C = A·B`: `(dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let [m, k] = a.dims2("matmul_backward")?;
    let [_, n] = b.dims2("matmul_backward")?;
    let mut da = vec![0.0; m * k];
    // dA[m×k] = dC[m×n] · B[k×n]ᵀ
    gemm_nt(m, n, k, dc.data(), b.data(), &mut da);
    let mut db = vec![0.0; k * n];
    gemm_tn(k, m, n, a.data(), dc.data(), &mut db);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

/// Fully connected layer: `x[B×I] · w[O×I]ᵀ + bias[O]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, i] = x.dims2("linear")?;
    let [o, i2] = weight.dims2("linear")?;
    if i != i2 || bias.len() != o {
        return Err(Error::dim("linear", x.shape(), weight.shape()));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm_nt(b, i, o, x.data(), weight.data(), &mut out);
    Tensor::new(vec![b, o], out)
}

/// Gradients of [`linear`]: `(dx, dweight, dbias)`; `dx` is skipped when
/// `need_input` is false.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let [b, i] = x.dims2("linear_backward")?;
    let [o, _] = weight.dims2("linear_backward")?;
    let dx = if need_input {
        let mut dx = vec![0.0; b * i];
        gemm_nn(b, o, i, dout.data(), weight.data(), &mut dx);
        Some(Tensor::new(vec![b, i], dx)?)
    } else {
        None
    };
    let mut dw = vec![0.0; o * i];
    gemm_tn(o, b, i, dout.data(), x.data(), &mut dw);
    let mut db = vec![0.0; o];
    for row in dout.data().chunks_exact(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, Tensor::new(vec![o, i], dw)?, Tensor::new(vec![o], db)?))
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("conv2d stride and kernel must be positive".into()));
        }
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        if span_h < kernel || span_w < kernel {
            return Err(Error::Config(format!(
                "conv2d kernel {kernel} larger than padded input {span_h}×{span_w}"
            )));
        }
        if (span_h - kernel) % stride != 0 || (span_w - kernel) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not integral for input {height}×{width}, \
                 kernel {kernel}, stride {stride}, pad {pad}"
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            filters,
            kernel,
            stride,
            pad,
            out_height: (span_h - kernel) / stride + 1,
            out_width: (span_w - kernel) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.filters * self.out_positions()
    }

    /// Maps an output coordinate plus kernel offset to an input coordinate,
    /// or `None` if it falls in the padding.
    #[inline]
    fn source(&self, out: usize, offset: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + offset) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output indices (flattened `F×H'×W'`) that read input element `index`
    /// (flattened `C×H×W`).
    pub fn receivers(&self, index: usize) -> Vec<usize> {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for oy in 0..self.out_height {
            for ky in 0..self.kernel {
                if self.source(oy, ky, self.height) == Some(y) {
                    rows.push(oy);
                    break;
                }
            }
        }
        for ox in 0..self.out_width {
            for kx in 0..self.kernel {
                if self.source(ox, kx, self.width) == Some(x) {
                    cols.push(ox);
                    break;
                }
            }
        }
        let mut out = Vec::with_capacity(self.filters * rows.len() * cols.len());
        for f in 0..self.filters {
            for &oy in &rows {
                for &ox in &cols {
                    out.push((f * self.out_height + oy) * self.out_width + ox);
                }
            }
        }
        out
    }

    fn im2col(&self, input: &[f64], col: &mut [f64]) {
        let p = self.out_positions();
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oy in 0..self.out_height {
                        let sy = self.source(oy, ky, self.height);
                        for ox in 0..self.out_width {
                            dst[oy * self.out_width + ox] = match (sy, self.source(ox, kx, self.width)) {
                                (Some(y), Some(x)) => input[(c * self.height + y) * self.width + x],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dinput: &mut [f64]) {
        let p = self.out_positions();
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &col[r * p..(r + 1) * p];
                    for oy in 0..self.out_height {
                        let Some(y) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_width {
                            if let Some(x) = self.source(ox, kx, self.width) {
                                dinput[(c * self.height + y) * self.width + x] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits an image tensor into `(batch, C, H, W, batched)`.
fn image_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0, 0])),
    }
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<(usize, bool, ConvGeometry)> {
    let (b, c, h, w, batched) = image_dims(input, "conv2d")?;
    let &[f, kc, kh, kw] = kernels.shape() else {
        return Err(Error::dim("conv2d", input.shape(), kernels.shape()));
    };
    if kc != c || kh != kw {
        return Err(Error::dim("conv2d", input.shape(), kernels.shape()));
    }
    Ok((b, batched, ConvGeometry::new((c, h, w), f, kh, stride, pad)?))
}

/// Cross-correlation of `C×H×W` (or `B×C×H×W`) input with `F×C×k×k`
/// kernels. No kernel flip.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_bias(input, kernels, None, stride, pad)
}

/// [`conv2d`] plus a per-filter bias.
pub fn conv2d_bias(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, batched, g) = conv_geometry(input, kernels, stride, pad)?;
    if let Some(bias) = bias {
        if bias.len() != g.filters {
            return Err(Error::dim("conv2d bias", bias.shape(), &[g.filters]));
        }
    }
    let p = g.out_positions();
    let mut col = vec![0.0; g.patch_len() * p];
    let mut out = vec![0.0; b * g.output_len()];
    for (sample, dst) in input
        .data()
        .chunks_exact(g.input_len())
        .zip(out.chunks_exact_mut(g.output_len()))
    {
        g.im2col(sample, &mut col);
        if let Some(bias) = bias {
            for (f, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(bias.data()[f]);
            }
        }
        gemm_nn(g.filters, g.patch_len(), p, kernels.data(), &col, dst);
    }
    let shape = if batched {
        vec![b, g.filters, g.out_height, g.out_width]
    } else {
        vec![g.filters, g.out_height, g.out_width]
    };
    Tensor::new(shape, out)
}

/// Gradients of [`conv2d_bias`]: `(dinput, dkernels, dbias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (_, _, g) = conv_geometry(input, kernels, stride, pad)?;
    let p = g.out_positions();
    let r = g.patch_len();
    let mut col = vec![0.0; r * p];
    let mut dcol = vec![0.0; r * p];
    let mut dk = vec![0.0; kernels.len()];
    let mut db = vec![0.0; g.filters];
    let mut dinput = need_input.then(|| vec![0.0; input.len()]);
    for (s, (sample, dsample)) in input
        .data()
        .chunks_exact(g.input_len())
        .zip(dout.data().chunks_exact(g.output_len()))
        .enumerate()
    {
        g.im2col(sample, &mut col);
        gemm_nt(g.filters, p, r, dsample, &col, &mut dk);
        for (f, row) in dsample.chunks_exact(p).enumerate() {
            db[f] += row.iter().sum::<f64>();
        }
        if let Some(dinput) = dinput.as_mut() {
            dcol.fill(0.0);
            gemm_tn(r, g.filters, p, kernels.data(), dsample, &mut dcol);
            let len = g.input_len();
            g.col2im(&dcol, &mut dinput[s * len..(s + 1) * len]);
        }
    }
    Ok((
        dinput.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        Tensor::new(kernels.shape().to_vec(), dk)?,
        Tensor::new(vec![g.filters], db)?,
    ))
}

fn pool_dims(input: &Tensor, k: usize, op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    let dims = image_dims(input, op)?;
    let (_, _, h, w, _) = dims;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Config(format!("{op} window {k} does not divide input {h}×{w}")));
    }
    Ok(dims)
}

fn pooled_shape(input: &Tensor, k: usize) -> Vec<usize> {
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] /= k;
    shape[n - 1] /= k;
    shape
}

/// Mean over non-overlapping `k×k` windows.
pub fn avgpool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w, _) = pool_dims(input, k, "avgpool2d")?;
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let x = input.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = s * scale;
            }
        }
    }
    Tensor::new(pooled_shape(input, k), out)
}

/// Gradient of [`avgpool2d`]: each input cell receives `dout / k²`.
pub fn avgpool2d_backward(input_shape: &[usize], dout: &Tensor, k: usize) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (b, c, h, w, _) = pool_dims(&probe, k, "avgpool2d")?;
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let g = dout.data();
    let mut dx = probe.into_data();
    for plane in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                dx[(plane * h + y) * w + x] = g[(plane * oh + y / k) * ow + x / k] * scale;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Max over non-overlapping `k×k` windows; also returns the flat input
/// index chosen for each output (first maximum wins).
pub fn maxpool2d(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w, _) = pool_dims(input, k, "maxpool2d")?;
    let (oh, ow) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (plane * h + oy * k) * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (plane * h + oy * k + dy) * w + ox * k + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(pooled_shape(input, k), out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], dout: &Tensor, argmax: &[usize]) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        d[i] += g;
    }
    Ok(dx)
}

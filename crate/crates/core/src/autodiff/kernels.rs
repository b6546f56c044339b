//! Numeric kernels behind the graph ops. Everything here is plain slice arithmetic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sum of products with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects 4-d input and weight, got {x:?} and {w:?}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Shape("conv2d stride and groups must be positive".into()));
        }
        let (batch, in_channels, height, width) = (x[0], x[1], x[2], x[3]);
        let (out_channels, in_per_group, kh, kw) = (w[0], w[1], w[2], w[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d supports square kernels only, got {kh}x{kw}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 || in_channels / groups != in_per_group {
            return Err(Error::Shape(format!(
                "conv2d input {x:?} incompatible with weight {w:?} for {groups} group(s)"
            )));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d kernel {kh} larger than padded input {x:?}")));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            pad,
            groups,
            out_height: (height + 2 * pad - kh) / stride + 1,
            out_width: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_plane() * self.patch_len()) as u64
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Unfolds the channels of group `g` of one sample into a `[patch_len, out_plane]` matrix.
fn im2col(x: &[f64], geo: &ConvGeometry, g: usize, cols: &mut [f64]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.pad as isize);
    let (ho, wo) = (geo.out_height, geo.out_width);
    let plane = geo.in_plane();
    for c in 0..geo.in_per_group() {
        let src = &x[(g * geo.in_per_group() + c) * plane..][..plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= geo.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * geo.width..][..geo.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= geo.width as isize { 0.0 } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto the sample gradient.
fn col2im(cols: &[f64], geo: &ConvGeometry, g: usize, dx: &mut [f64]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.pad as isize);
    let (ho, wo) = (geo.out_height, geo.out_width);
    let plane = geo.in_plane();
    for c in 0..geo.in_per_group() {
        let dst = &mut dx[(g * geo.in_per_group() + c) * plane..][..plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let line = &mut dst[iy as usize * geo.width..][..geo.width];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < geo.width as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geo: &ConvGeometry) -> Tensor {
    let (cog, kl, l) = (geo.out_per_group(), geo.patch_len(), geo.out_plane());
    let in_sample = geo.in_channels * geo.in_plane();
    let out_sample = geo.out_channels * l;
    let mut out = vec![0.0; geo.batch * out_sample];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kl * l] };
    let wd = w.data();
    for n in 0..geo.batch {
        let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
        let os = &mut out[n * out_sample..(n + 1) * out_sample];
        for g in 0..geo.groups {
            let cols_ref: &[f64] = if geo.is_pointwise() {
                &xs[g * kl * l..(g + 1) * kl * l]
            } else {
                im2col(xs, geo, g, &mut cols);
                &cols
            };
            for co in 0..cog {
                let oc = g * cog + co;
                let orow = &mut os[oc * l..(oc + 1) * l];
                if let Some(b) = b {
                    orow.fill(b.data()[oc]);
                }
                let wrow = &wd[oc * kl..(oc + 1) * kl];
                for (r, &a) in wrow.iter().enumerate() {
                    if a != 0.0 {
                        axpy(a, &cols_ref[r * l..(r + 1) * l], orow);
                    }
                }
            }
        }
    }
    Tensor::from_parts(geo.output_shape(), out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geo: &ConvGeometry,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cog, kl, l) = (geo.out_per_group(), geo.patch_len(), geo.out_plane());
    let in_sample = geo.in_channels * geo.in_plane();
    let out_sample = geo.out_channels * l;
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; geo.out_channels];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kl * l] };
    let mut dcols = vec![0.0; kl * l];
    let wd = w.data();
    for n in 0..geo.batch {
        let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
        let dys = &dy.data()[n * out_sample..(n + 1) * out_sample];
        for g in 0..geo.groups {
            let cols_ref: &[f64] = if geo.is_pointwise() {
                &xs[g * kl * l..(g + 1) * kl * l]
            } else {
                im2col(xs, geo, g, &mut cols);
                &cols
            };
            if need_dx {
                dcols.fill(0.0);
            }
            for co in 0..cog {
                let oc = g * cog + co;
                let drow = &dys[oc * l..(oc + 1) * l];
                db[oc] += drow.iter().sum::<f64>();
                let dwrow = &mut dw[oc * kl..(oc + 1) * kl];
                for (r, dwr) in dwrow.iter_mut().enumerate() {
                    *dwr += dot(drow, &cols_ref[r * l..(r + 1) * l]);
                }
                if need_dx {
                    let wrow = &wd[oc * kl..(oc + 1) * kl];
                    for (r, &a) in wrow.iter().enumerate() {
                        if a != 0.0 {
                            axpy(a, drow, &mut dcols[r * l..(r + 1) * l]);
                        }
                    }
                }
            }
            if need_dx {
                let dxs = &mut dx[n * in_sample..(n + 1) * in_sample];
                if geo.is_pointwise() {
                    let seg = &mut dxs[g * kl * l..(g + 1) * kl * l];
                    for (d, v) in seg.iter_mut().zip(&dcols) {
                        *d += v;
                    }
                } else {
                    col2im(&dcols, geo, g, dxs);
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx));
    (
        dx,
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![geo.out_channels], db),
    )
}

/// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = vec![0.0; nc * 4 * h * w];
    for p in 0..nc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out)
}

pub fn upsample2_backward(dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Non-overlapping `k x k` average pooling of `[N, C, H, W]`.
pub fn avgpool_forward(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho * k {
            for xx in 0..wo * k {
                out[p * ho * wo + (y / k) * wo + xx / k] += src[y * w + xx] * inv;
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], ho, wo], out)
}

pub fn avgpool_backward(dy: &Tensor, in_shape: &[usize], k: usize) -> Tensor {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..ho * k {
            for xx in 0..wo * k {
                dx[p * h * w + y * w + xx] = dy.data()[p * ho * wo + (y / k) * wo + xx / k] * inv;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// `y[n, o] = Σ_i x[n, i] w[o, i] + b[o]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xr = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            out[i * dout + o] = bias + dot(xr, &w.data()[o * din..(o + 1) * din]);
        }
    }
    Tensor::from_parts(vec![n, dout], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for i in 0..n {
        let xr = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let g = dy.data()[i * dout + o];
            db[o] += g;
            axpy(g, xr, &mut dw[o * din..(o + 1) * din]);
            axpy(g, &w.data()[o * din..(o + 1) * din], &mut dx[i * din..(i + 1) * din]);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![dout], db),
    )
}

/// Row-wise log-softmax over the last dimension of a 2-d tensor.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Output shape of numpy-style broadcasting between two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out.push(match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        });
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` that broadcasts to it.
pub fn broadcast_indices(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        let oi = i + rank - in_shape.len();
        strides[oi] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

//! Dense NHWC tensors and the handful of kernels the network needs.

use crate::error::{Error, Result};

/// A batch of feature maps stored channel-last: `[batch, height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of length {} does not fit shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Elements per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(n, y, x, c);
        self.data[i] = v;
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies out a sub-batch `[start, start + len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor {
        let il = self.item_len();
        Tensor {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * il..(start + len) * il].to_vec(),
        }
    }

    /// Gathers the listed batch items into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let il = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * il);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[..3], b.shape[..3]);
        let (ca, cb) = (a.channels(), b.channels());
        let pixels = a.shape[0] * a.shape[1] * a.shape[2];
        let mut data = Vec::with_capacity(pixels * (ca + cb));
        for p in 0..pixels {
            data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        Tensor {
            shape: [a.shape[0], a.shape[1], a.shape[2], ca + cb],
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let c = self.channels();
        assert!(first <= c);
        let second = c - first;
        let pixels = self.shape[0] * self.shape[1] * self.shape[2];
        let mut a = Vec::with_capacity(pixels * first);
        let mut b = Vec::with_capacity(pixels * second);
        for p in 0..pixels {
            a.extend_from_slice(&self.data[p * c..p * c + first]);
            b.extend_from_slice(&self.data[p * c + first..(p + 1) * c]);
        }
        let [n, h, w, _] = self.shape;
        (
            Tensor { shape: [n, h, w, first], data: a },
            Tensor { shape: [n, h, w, second], data: b },
        )
    }
}

/// Output extent of a convolution or pooling window along one axis.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one image into a `[out_h * out_w, k * k * c]` patch matrix.
pub(crate) fn im2col(
    img: &[f64],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let row_len = k * k * c;
    let span = k * c;
    debug_assert_eq!(col.len(), oh * ow * row_len);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            let x0 = (ox * stride) as isize - pad as isize;
            let inside_x = x0 >= 0 && x0 as usize + k <= w;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let dst_row = &mut row[ky * span..(ky + 1) * span];
                if iy < 0 || iy >= h as isize {
                    dst_row.fill(0.0);
                    continue;
                }
                let line = iy as usize * w;
                if inside_x {
                    let src = (line + x0 as usize) * c;
                    dst_row.copy_from_slice(&img[src..src + span]);
                    continue;
                }
                for kx in 0..k {
                    let ix = x0 + kx as isize;
                    let dst = &mut dst_row[kx * c..(kx + 1) * c];
                    if ix < 0 || ix >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (line + ix as usize) * c;
                        dst.copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Scatters a patch matrix back onto an image, accumulating overlaps.
pub(crate) fn col2im(
    col: &[f64],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    img: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let row_len = k * k * c;
    let span = k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &col[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            let x0 = (ox * stride) as isize - pad as isize;
            let inside_x = x0 >= 0 && x0 as usize + k <= w;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let line = iy as usize * w;
                let src_row = &row[ky * span..(ky + 1) * span];
                if inside_x {
                    let dst = (line + x0 as usize) * c;
                    for (d, s) in img[dst..dst + span].iter_mut().zip(src_row) {
                        *d += s;
                    }
                    continue;
                }
                for kx in 0..k {
                    let ix = x0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (line + ix as usize) * c;
                    for (d, s) in img[dst..dst + c].iter_mut().zip(&src_row[kx * c..(kx + 1) * c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution to a single output channel, computed directly.
///
/// `kernel` is laid out `[k, k, c]`. Returns a `[n, h, w, 1]` tensor.
pub(crate) fn conv_to_scalar(x: &Tensor, kernel: &[f64], k: usize, bias: f64) -> Tensor {
    let [n, h, w, c] = x.shape();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros([n, h, w, 1]);
    for b in 0..n {
        let img = x.item(b);
        let o = out.item_mut(b);
        for y in 0..h {
            let ky0 = (r - y as isize).max(0) as usize;
            let ky1 = (h as isize - y as isize + r).min(k as isize) as usize;
            for xx in 0..w {
                let kx0 = (r - xx as isize).max(0) as usize;
                let kx1 = (w as isize - xx as isize + r).min(k as isize) as usize;
                let mut acc = bias;
                for ky in ky0..ky1 {
                    let iy = (y as isize + ky as isize - r) as usize;
                    let ix0 = (xx as isize + kx0 as isize - r) as usize;
                    let len = (kx1 - kx0) * c;
                    let src = &img[(iy * w + ix0) * c..(iy * w + ix0) * c + len];
                    let wk = &kernel[(ky * k + kx0) * c..(ky * k + kx0) * c + len];
                    acc += src.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
                }
                o[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Backward of [`conv_to_scalar`]: accumulates the kernel gradient into
/// `dkernel` and returns the input gradient.
pub(crate) fn conv_to_scalar_backward(
    x: &Tensor,
    kernel: &[f64],
    k: usize,
    dy: &Tensor,
    dkernel: &mut [f64],
) -> Tensor {
    let [n, h, w, c] = x.shape();
    let r = (k / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..n {
        let img = x.item(b);
        let g = dy.item(b);
        let d = dx.item_mut(b);
        for y in 0..h {
            let ky0 = (r - y as isize).max(0) as usize;
            let ky1 = (h as isize - y as isize + r).min(k as isize) as usize;
            for xx in 0..w {
                let gv = g[y * w + xx];
                if gv == 0.0 {
                    continue;
                }
                let kx0 = (r - xx as isize).max(0) as usize;
                let kx1 = (w as isize - xx as isize + r).min(k as isize) as usize;
                for ky in ky0..ky1 {
                    let iy = (y as isize + ky as isize - r) as usize;
                    let ix0 = (xx as isize + kx0 as isize - r) as usize;
                    let len = (kx1 - kx0) * c;
                    let base = (iy * w + ix0) * c;
                    let kb = (ky * k + kx0) * c;
                    for j in 0..len {
                        dkernel[kb + j] += gv * img[base + j];
                        d[base + j] += gv * kernel[kb + j];
                    }
                }
            }
        }
    }
    dx
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given the strides.
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

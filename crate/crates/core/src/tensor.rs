//! Dense row-major `f64` tensors and the raw numeric kernels the autograd
//! tape is built on.
//!
//! Feature maps are stored channel-major as `[C, H, W]`; token matrices used
//! by attention are the same buffers viewed as `[C, H*W]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> (usize, usize, usize) {
        match *self.shape.as_slice() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => panic!("expected a 3-d feature map, got shape {:?}", self.shape),
        }
    }

    /// Interprets the tensor as a matrix, folding trailing dims into columns.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channel slice `[start, start + len)` of a `[C, H, W]` map.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let (c, h, w) = self.dims3();
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        Tensor::new(&[len, h, w], self.data[start * plane..(start + len) * plane].to_vec())
    }

    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (_, h, w) = parts[0].dims3();
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            let (pc, ph, pw) = p.dims3();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[c, h, w], data)
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`; a transposed operand is stored
/// in its untransposed layout.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.out_size();
    let k = g.kernel;
    let n = oh * ow;
    let mut cols = vec![0.0; g.col_rows() * n];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = g.out_size();
    let k = g.kernel;
    let n = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Square-kernel 2-d convolution (cross-correlation) of a `[Cin, H, W]` map.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = x.dims3();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
    assert_eq!(ws[1], cin, "conv input channels");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let geo = ConvGeometry {
        in_channels: cin,
        height: h,
        width: w,
        kernel: ws[2],
        stride,
        pad,
    };
    let cout = ws[0];
    let (oh, ow) = geo.out_size();
    let n = oh * ow;
    let mut out = vec![0.0; cout * n];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if geo.is_pointwise() {
        gemm(cout, cin, n, weight.data(), false, x.data(), false, beta, &mut out);
    } else {
        let cols = im2col(x.data(), &geo);
        gemm(
            cout,
            geo.col_rows(),
            n,
            weight.data(),
            false,
            &cols,
            false,
            beta,
            &mut out,
        );
    }
    Tensor::new(&[cout, oh, ow], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, h, w) = x.dims3();
    let ws = weight.shape();
    let geo = ConvGeometry {
        in_channels: cin,
        height: h,
        width: w,
        kernel: ws[2],
        stride,
        pad,
    };
    let cout = ws[0];
    let (oh, ow) = geo.out_size();
    let n = oh * ow;
    let kk = geo.col_rows();
    let db: Vec<f64> = (0..cout).map(|o| dy.data()[o * n..(o + 1) * n].iter().sum()).collect();
    let mut dw = vec![0.0; cout * kk];
    let dx = if geo.is_pointwise() {
        gemm(cout, n, kk, dy.data(), false, x.data(), true, 0.0, &mut dw);
        need_dx.then(|| {
            let mut dx = vec![0.0; cin * n];
            gemm(cin, cout, n, weight.data(), true, dy.data(), false, 0.0, &mut dx);
            Tensor::new(&[cin, h, w], dx)
        })
    } else {
        let cols = im2col(x.data(), &geo);
        gemm(cout, n, kk, dy.data(), false, &cols, true, 0.0, &mut dw);
        need_dx.then(|| {
            let mut dcols = vec![0.0; kk * n];
            gemm(kk, cout, n, weight.data(), true, dy.data(), false, 0.0, &mut dcols);
            let mut dx = vec![0.0; cin * h * w];
            col2im_add(&dcols, &geo, &mut dx);
            Tensor::new(&[cin, h, w], dx)
        })
    };
    (dx, Tensor::new(ws, dw), Tensor::new(&[cout], db))
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every channel of a `[C, H, W]` map (half-pixel
/// centres, edge clamped).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    if (h, w) == (out_h, out_w) {
        return x.clone().reshape(&[c, h, w]);
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                dst[oy * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub(crate) fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, out_h, out_w) = dy.dims3();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let g = &dy.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let d = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                d[a.lo * in_w + b.lo] += top * (1.0 - b.frac);
                d[a.lo * in_w + b.hi] += top * b.frac;
                d[a.hi * in_w + b.lo] += bot * (1.0 - b.frac);
                d[a.hi * in_w + b.hi] += bot * b.frac;
            }
        }
    }
    Tensor::new(&[c, in_h, in_w], dx)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)).take(r) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

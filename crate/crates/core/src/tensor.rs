//! Dense row-major `f64` tensors and the pure forward kernels used by the
//! autodiff graph.

use std::fmt;

use crate::error::TensorError;

/// Dense n-dimensional array of `f64` in row-major order.
///
/// A scalar has an empty shape and exactly one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive: {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one element");
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a tensor of the given shape by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive: {shape:?}");
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|x| x * factor)
}

/// `[m×n] · [n×p] → [m×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, n, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * p];
    gemm_nn(&a.data, &b.data, &mut out, m, n, p);
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mut i = 0;
    // Four output rows share each pass over a row of `b`.
    while i + 4 <= m {
        let (r0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
        let (r1, rest) = rest.split_at_mut(p);
        let (r2, r3) = rest.split_at_mut(p);
        for k in 0..n {
            let (a0, a1, a2, a3) = (a[i * n + k], a[(i + 1) * n + k], a[(i + 2) * n + k], a[(i + 3) * n + k]);
            let brow = &b[k * p..(k + 1) * p];
            let rows = r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut().zip(r3.iter_mut()));
            for (((o0, o1), (o2, o3)), &bv) in rows.zip(brow) {
                *o0 += a0 * bv;
                *o1 += a1 * bv;
                *o2 += a2 * bv;
                *o3 += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×p] · b[n×p]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mut i = 0;
    // Four rows of `a` against each row of `b`, four lanes per dot product.
    while i + 4 <= m {
        let rows = [&a[i * p..(i + 1) * p], &a[(i + 1) * p..(i + 2) * p], &a[(i + 2) * p..(i + 3) * p], &a[(i + 3) * p..(i + 4) * p]];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = [[0.0f64; 2]; 4];
            let body = p - p % 2;
            let pairs = rows[0][..body]
                .chunks_exact(2)
                .zip(rows[1][..body].chunks_exact(2))
                .zip(rows[2][..body].chunks_exact(2).zip(rows[3][..body].chunks_exact(2)))
                .zip(brow[..body].chunks_exact(2));
            for (((x0, x1), (x2, x3)), y) in pairs {
                for l in 0..2 {
                    acc[0][l] += x0[l] * y[l];
                    acc[1][l] += x1[l] * y[l];
                    acc[2][l] += x2[l] * y[l];
                    acc[3][l] += x3[l] * y[l];
                }
            }
            for (r, row) in rows.iter().enumerate() {
                let tail: f64 = (body..p).map(|q| row[q] * brow[q]).sum();
                out[(i + r) * n + j] += (acc[r][0] + acc[r][1]) + tail;
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            out[i * n + j] += dot4(arow, &b[j * p..(j + 1) * p]);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[n×p] += a[m×n]ᵀ · b[m×p]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mut i = 0;
    // Four rows of `b` accumulate into each output row in one pass.
    while i + 4 <= m {
        let (b0, b1, b2, b3) =
            (&b[i * p..(i + 1) * p], &b[(i + 1) * p..(i + 2) * p], &b[(i + 2) * p..(i + 3) * p], &b[(i + 3) * p..(i + 4) * p]);
        for k in 0..n {
            let (a0, a1, a2, a3) = (a[i * n + k], a[(i + 1) * n + k], a[(i + 2) * n + k], a[(i + 3) * n + k]);
            let orow = &mut out[k * p..(k + 1) * p];
            for ((o, (&x0, &x1)), (&x2, &x3)) in orow.iter_mut().zip(b0.iter().zip(b1)).zip(b2.iter().zip(b3)) {
                *o += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let brow = &b[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Adds `bias` along `axis`: `bias.len() == x.shape[axis]`.
pub fn bias_add(x: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if bias.rank() != 1 || axis >= x.rank() || x.shape[axis] != bias.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "bias_add",
            left: x.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    let inner: usize = x.shape[axis + 1..].iter().product();
    let extent = x.shape[axis];
    let mut data = x.data.clone();
    for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
        let b = bias.data[chunk_idx % extent];
        for v in chunk {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Convolution geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (batch, c, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: input.to_vec(),
                    right: kernels.to_vec(),
                })
            }
        };
        let [f, kc, kh, kw] = *kernels else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        let padded_h = h + 2 * padding;
        let padded_w = w + 2 * padding;
        if kh > padded_h || kw > padded_w {
            return Err(TensorError::DegenerateOutput {
                op: "conv2d",
                input: input.to_vec(),
                kernel: kernels.to_vec(),
            });
        }
        Ok(ConvGeom {
            batch,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.filters, self.out_h, self.out_w]
        } else {
            vec![self.filters, self.out_h, self.out_w]
        }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn ox_range(&self, kj: usize) -> (usize, usize) {
        let (p, s) = (self.padding, self.stride);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj { ((self.width + p - kj - 1) / s + 1).min(self.out_w) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfolds one image `[C×H×W]` into `[C·kh·kw × H'·W']`.
    fn im2col_into(&self, image: &[f64], out: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.ox_range(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + iy as usize) * self.width;
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let ix0 = lo + kj - self.padding;
                            d[lo..hi].copy_from_slice(&image[src_row + ix0..src_row + ix0 + (hi - lo)]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = image[src_row + ox * self.stride + kj - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `[C·kh·kw × H'·W']` back into an image gradient, accumulating overlaps.
    pub fn col2im(&self, cols_data: &[f64], image_grad: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            image_grad[dst_row + ix as usize] += src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.filters * self.out_h * self.out_w
    }

    /// Unfolded columns of every image in the batch, concatenated.
    pub fn unfold(&self, input: &[f64]) -> Vec<f64> {
        let per = self.col_rows() * self.col_cols();
        let mut out = vec![0.0; self.batch * per];
        for (n, dst) in out.chunks_exact_mut(per).enumerate() {
            self.im2col_into(&input[n * self.image_len()..(n + 1) * self.image_len()], dst);
        }
        out
    }

    pub fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        self.forward_unfolded(&self.unfold(input), kernels)
    }

    pub fn forward_unfolded(&self, unfolded: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        let mut out = vec![0.0; self.batch * self.out_len()];
        for (n, dst) in out.chunks_exact_mut(self.out_len()).enumerate() {
            gemm_nn(kernels, &unfolded[n * rows * cols..(n + 1) * rows * cols], dst, self.filters, rows, cols);
        }
        out
    }

    /// Returns `(d_input, d_kernels)`; `d_input` only when `need_input`.
    pub fn backward_unfolded(
        &self,
        unfolded: &[f64],
        kernels: &[f64],
        d_out: &[f64],
        need_input: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>) {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        let mut d_input = vec![0.0; if need_input { self.batch * self.image_len() } else { 0 }];
        let mut d_kernels = vec![0.0; self.filters * rows];
        let mut d_cols = vec![0.0; if need_input { rows * cols } else { 0 }];
        for n in 0..self.batch {
            let g = &d_out[n * self.out_len()..(n + 1) * self.out_len()];
            gemm_nt(g, &unfolded[n * rows * cols..(n + 1) * rows * cols], &mut d_kernels, self.filters, rows, cols);
            if need_input {
                d_cols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(kernels, g, &mut d_cols, self.filters, rows, cols);
                self.col2im(&d_cols, &mut d_input[n * self.image_len()..(n + 1) * self.image_len()]);
            }
        }
        (need_input.then_some(d_input), d_kernels)
    }
}

/// 2-D convolution with zero padding.
///
/// `input` is `[C×H×W]` or batched `[N×C×H×W]`; `kernels` is `[F×C×kh×kw]`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let geom = ConvGeom::new(&input.shape, &kernels.shape, stride, padding)?;
    let out = geom.forward(&input.data, &kernels.data);
    Ok(Tensor::from_parts(geom.out_shape(input.rank() == 4), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalized over the last axis.
    Softmax,
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over `len`-sized groups, where consecutive group members sit
/// `stride` apart (stride 1 means the last axis).
pub(crate) fn softmax_strided(data: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|k| data[base + k * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
    out
}

pub fn apply_activation(x: &Tensor, kind: Activation) -> Result<Tensor, TensorError> {
    if !x.all_finite() {
        return Err(TensorError::NonFinite { op: "activation" });
    }
    Ok(match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Softmax => {
            let len = *x.shape.last().unwrap_or(&1);
            let outer = x.len() / len;
            Tensor::from_parts(x.shape.clone(), softmax_strided(&x.data, outer, len, 1))
        }
    })
}

/// Mean over spatial axes: `[C×H×W] → [C]`, `[N×C×H×W] → [N×C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, TensorError> {
    let (out_shape, spatial) = match *x.shape.as_slice() {
        [c, h, w] => (vec![c], h * w),
        [n, c, h, w] => (vec![n, c], h * w),
        _ => return Err(TensorError::RankMismatch { op: "global_avg_pool", expected: 3, shape: x.shape.clone() }),
    };
    let data = x.data.chunks(spatial).map(|c| c.iter().sum::<f64>() / spatial as f64).collect();
    Ok(Tensor::from_parts(out_shape, data))
}

/// Nearest-neighbour spatial upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    if factor == 0 {
        return Err(TensorError::InvalidArgument("upsample factor must be at least 1".into()));
    }
    let r = x.rank();
    if r != 3 && r != 4 {
        return Err(TensorError::RankMismatch { op: "upsample_nearest", expected: 3, shape: x.shape.clone() });
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let planes = x.len() / (h * w);
    let (oh, ow) = (h * factor, w * factor);
    let mut data = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                data[(p * oh + oy) * ow + ox] = x.data[(p * h + oy / factor) * w + ox / factor];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, data))
}

/// Layout of a class axis inside logits: `outer × classes × inner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ClassLayout {
    pub outer: usize,
    pub classes: usize,
    pub inner: usize,
}

impl ClassLayout {
    /// `[B×K]` has classes on axis 1, `[K×H×W]` on axis 0, `[N×K×H×W]` on axis 1.
    pub fn of(shape: &[usize]) -> Result<Self, TensorError> {
        let axis = match shape.len() {
            2 | 4 => 1,
            3 => 0,
            _ => {
                return Err(TensorError::RankMismatch { op: "cross_entropy", expected: 2, shape: shape.to_vec() })
            }
        };
        Ok(ClassLayout {
            outer: shape[..axis].iter().product(),
            classes: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat offset of class 0 for label position `pos`.
    pub fn base(&self, pos: usize) -> usize {
        let (o, i) = (pos / self.inner, pos % self.inner);
        o * self.classes * self.inner + i
    }
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`) along
/// the class axis, computed via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, TensorError> {
    let layout = ClassLayout::of(&logits.shape)?;
    check_labels(&layout, labels)?;
    let mut total = 0.0;
    for (pos, &label) in labels.iter().enumerate() {
        let base = layout.base(pos);
        let at = |k: usize| logits.data[base + k * layout.inner];
        let max = (0..layout.classes).map(at).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..layout.classes).map(|k| (at(k) - max).exp()).sum::<f64>().ln();
        total += lse - at(label);
    }
    Ok(total / labels.len() as f64)
}

pub(crate) fn check_labels(layout: &ClassLayout, labels: &[usize]) -> Result<(), TensorError> {
    if labels.len() != layout.count() {
        return Err(TensorError::LabelCount { expected: layout.count(), found: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= layout.classes) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: layout.classes });
    }
    Ok(())
}

/// Mean binary cross-entropy of sigmoid(`logits`) against `targets` in [0,1].
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64, TensorError> {
    same_shape("bce_with_logits", logits, targets)?;
    let total: f64 = logits
        .data
        .iter()
        .zip(&targets.data)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_values() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn conv_pointwise_scaling() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_window_sum() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn conv_strided_padded_shape() {
        // floor((5 + 2 - 3) / 2) + 1 = 3
        let x = Tensor::ones(&[1, 5, 5]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv_rejects_degenerate_output() {
        let x = Tensor::ones(&[1, 2, 2]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(TensorError::DegenerateOutput { .. })));
        assert!(conv2d(&x, &k, 0, 1).is_err());
    }

    #[test]
    fn batched_conv_matches_per_image() {
        let x = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let batched = conv2d(&x, &k, 1, 1).unwrap();
        for n in 0..2 {
            let img = Tensor::new(vec![2, 4, 4], x.data()[n * 32..(n + 1) * 32].to_vec()).unwrap();
            let single = conv2d(&img, &k, 1, 1).unwrap();
            assert_eq!(single.data(), &batched.data()[n * 48..(n + 1) * 48]);
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = apply_activation(&Tensor::from_vec(vec![0.0]), Activation::Sigmoid).unwrap();
        assert_eq!(s.data(), &[0.5]);
        let big = Tensor::from_vec(vec![1000.0, 1000.0]);
        let p = apply_activation(&big, Activation::Softmax).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn activation_rejects_nan() {
        let x = Tensor::from_vec(vec![f64::NAN]);
        assert!(matches!(apply_activation(&x, Activation::Relu), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        let x = Tensor::from_vec(vec![-800.0, 800.0]);
        let s = apply_activation(&x, Activation::Sigmoid).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data()[1], 1.0);
    }

    #[test]
    fn cross_entropy_values() {
        let confident = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-4);
        let flat = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!((cross_entropy(&flat, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let three = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&three, &[5]),
            Err(TensorError::LabelOutOfRange { label: 5, classes: 3 })
        ));
    }

    #[test]
    fn pixel_cross_entropy_uses_leading_class_axis() {
        // K=2 over a 1×2 image: pixel 0 favours class 1, pixel 1 favours class 0.
        let logits = Tensor::new(vec![2, 1, 2], vec![0.0, 50.0, 50.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[1, 0]).unwrap() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1]).unwrap() > 10.0);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = Tensor::from_vec(vec![0.3, -1.2]);
        let y = Tensor::from_vec(vec![1.0, 0.0]);
        let direct = -(sigmoid_scalar(0.3).ln() + (1.0 - sigmoid_scalar(-1.2)).ln()) / 2.0;
        assert!((bce_with_logits(&z, &y).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn upsample_and_pool_shapes() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[2, 6, 6]);
        assert_eq!(up.data()[0..2], [0.0, 0.0]);
        let pooled = global_avg_pool(&up).unwrap();
        assert_eq!(pooled.shape(), &[2]);
        assert!((pooled.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}

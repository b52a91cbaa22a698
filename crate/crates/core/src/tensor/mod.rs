//! Dense row-major tensors and the numerical primitives built on them.
//!
//! Images, feature maps and masks use channel-last `(H, W, C)` layout so that
//! the feature vector of a pixel is a contiguous slice.

mod conv;

pub use conv::{conv2d, conv2d_backward, conv_output_size, ConvGeometry};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Elementwise operation tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Ln,
    Exp,
}

/// Right-hand operand of [`elementwise`]. Unary ops take `Rhs::None`.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
    None,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
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

    /// Interprets the tensor as `(H, W, C)`. Rank-2 tensors are `(H, W, 1)`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            [h, w] => Ok((h, w, 1)),
            _ => Err(Error::shape(format!(
                "expected an H×W×C tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, shapes must match in element count.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn elementwise(op: ElemOp, a: &Tensor, rhs: Rhs<'_>) -> Result<Tensor> {
    let binary = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
        match rhs {
            Rhs::Tensor(b) => a.zip_map(b, f),
            Rhs::Scalar(c) => Ok(a.map(|v| f(v, c))),
            Rhs::None => Err(Error::invalid(format!("{op:?} needs a right operand"))),
        }
    };
    let out = match op {
        ElemOp::Add => binary(|x, y| x + y)?,
        ElemOp::Sub => binary(|x, y| x - y)?,
        ElemOp::Mul => binary(|x, y| x * y)?,
        ElemOp::Div => {
            let zero = match rhs {
                Rhs::Tensor(b) => b.data.iter().any(|&v| v == 0.0),
                Rhs::Scalar(c) => c == 0.0,
                Rhs::None => false,
            };
            if zero {
                return Err(Error::DivisionByZero);
            }
            binary(|x, y| x / y)?
        }
        ElemOp::Relu => a.map(|v| v.max(0.0)),
        ElemOp::Ln => a.map(f64::ln),
        ElemOp::Exp => a.map(f64::exp),
    };
    if !out.all_finite() {
        return Err(Error::NonFinite("elementwise"));
    }
    Ok(out)
}

/// Softmax over the last (channel) axis, with max subtraction.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape.last().unwrap_or(&0);
    if c == 0 {
        return Err(Error::shape("empty channel dimension"));
    }
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(c) {
        softmax_in_place(px);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for e in v.iter_mut() {
        *e = (*e - m).exp();
        z += *e;
    }
    for e in v.iter_mut() {
        *e /= z;
    }
}

/// Source taps of one output coordinate for 2× bilinear upsampling with
/// half-pixel centres: `(lo, hi, weight_of_hi)`.
#[inline]
fn upsample_taps(dst: usize, n: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / 2.0 - 0.5;
    let src = src.max(0.0);
    let lo = (src.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, src - lo as f64)
}

pub fn bilinear_upsample2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let o = (oy * ow + ox) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[o + ch] += wt * x.data[base + ch];
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Adjoint of [`bilinear_upsample2x`]: maps a `2H×2W×C` gradient to `H×W×C`.
pub fn bilinear_upsample2x_adjoint(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (oh, ow, c) = grad.hwc()?;
    if oh != 2 * h || ow != 2 * w {
        return Err(Error::shape("upsample adjoint size"));
    }
    let mut out = vec![0.0; h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let o = (oy * ow + ox) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[base + ch] += wt * grad.data[o + ch];
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Concatenates `H×W×Cᵢ` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of nothing"))?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(format!(
                "concat spatial mismatch {:?} vs {:?}",
                first.shape, p.shape
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[px * pc..(px + 1) * pc]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Channels `start..start + len` of an `H×W×C` tensor.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if len == 0 || start + len > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} of {c}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(h * w * len);
    for px in x.data.chunks_exact(c) {
        out.extend_from_slice(&px[start..start + len]);
    }
    Tensor::new(vec![h, w, len], out)
}

/// Area-average downsampling by an integer factor.
pub fn area_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} is not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow * c];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / factor) * ow + xx / factor) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                out[o + ch] += x.data[i + ch] * norm;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

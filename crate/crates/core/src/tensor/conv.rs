//! 2-D cross-correlation over channel-last tensors via im2col + GEMM.

use super::Tensor;
use crate::error::{Error, Result};

/// Square-kernel convolution geometry with "same"-style zero padding
/// `dilation * (k - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            dilation,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

pub fn conv_output_size(n: usize, g: ConvGeometry) -> usize {
    (n + 2 * g.padding() - g.dilation * (g.kernel - 1) - 1) / g.stride + 1
}

struct Dims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    /// Rows of the unfolded weight matrix, `k * k * cin`.
    kk: usize,
}

fn check(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Dims> {
    let (h, w, cin) = x.hwc()?;
    let &[k0, k1, wcin, cout] = weight.shape() else {
        return Err(Error::shape(format!(
            "conv weight must be k×k×Cin×Cout, got {:?}",
            weight.shape()
        )));
    };
    if k0 != g.kernel || k1 != g.kernel {
        return Err(Error::shape(format!(
            "kernel {k0}×{k1} does not match geometry {}",
            g.kernel
        )));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "channel mismatch: input has {cin}, kernel expects {wcin}"
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    if g.dilation == 0 || g.stride == 0 || g.kernel % 2 == 0 {
        return Err(Error::invalid(format!("unsupported conv geometry {g:?}")));
    }
    Ok(Dims {
        h,
        w,
        cin,
        cout,
        oh: conv_output_size(h, g),
        ow: conv_output_size(w, g),
        kk: g.kernel * g.kernel * cin,
    })
}

fn is_pointwise(g: ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1
}

fn im2col(x: &[f64], d: &Dims, g: ConvGeometry) -> Vec<f64> {
    let pad = g.padding() as isize;
    let mut col = vec![0.0; d.oh * d.ow * d.kk];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &mut col[(oy * d.ow + ox) * d.kk..][..d.kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let src = (iy as usize * d.w + ix as usize) * d.cin;
                    let dst = (ky * g.kernel + kx) * d.cin;
                    row[dst..dst + d.cin].copy_from_slice(&x[src..src + d.cin]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], d: &Dims, g: ConvGeometry) -> Vec<f64> {
    let pad = g.padding() as isize;
    let mut x = vec![0.0; d.h * d.w * d.cin];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &col[(oy * d.ow + ox) * d.kk..][..d.kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * d.w + ix as usize) * d.cin;
                    let src = (ky * g.kernel + kx) * d.cin;
                    for (a, b) in x[dst..dst + d.cin].iter_mut().zip(&row[src..src + d.cin]) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}

/// `C = A·B` (+ `C` when `accumulate`), all row-major, with explicit strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover every strided index
    // `(m-1)*rs + (k-1)*cs` of the respective operand; `c` is m×n contiguous.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let d = check(x, weight, bias, g)?;
    let rows = d.oh * d.ow;
    let mut out = Vec::with_capacity(rows * d.cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    let owned;
    let col: &[f64] = if is_pointwise(g) {
        x.data()
    } else {
        owned = im2col(x.data(), &d, g);
        &owned
    };
    gemm(
        rows,
        d.kk,
        d.cout,
        col,
        (d.kk, 1),
        weight.data(),
        (d.cout, 1),
        &mut out,
        true,
    );
    Tensor::new(vec![d.oh, d.ow, d.cout], out)
}

/// Gradients `(d_input, d_weight, d_bias)` of [`conv2d`] given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: ConvGeometry,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = check(x, weight, bias, g)?;
    let rows = d.oh * d.ow;
    if grad_out.len() != rows * d.cout {
        return Err(Error::shape("conv output gradient size"));
    }
    let dy = grad_out.data();

    let mut db = vec![0.0; d.cout];
    for r in dy.chunks_exact(d.cout) {
        for (a, b) in db.iter_mut().zip(r) {
            *a += b;
        }
    }

    let owned;
    let col: &[f64] = if is_pointwise(g) {
        x.data()
    } else {
        owned = im2col(x.data(), &d, g);
        &owned
    };
    let mut dw = vec![0.0; d.kk * d.cout];
    gemm(d.kk, rows, d.cout, col, (1, d.kk), dy, (d.cout, 1), &mut dw, false);

    let dx = if need_input_grad {
        let mut dcol = vec![0.0; rows * d.kk];
        gemm(
            rows,
            d.cout,
            d.kk,
            dy,
            (d.cout, 1),
            weight.data(),
            (1, d.cout),
            &mut dcol,
            false,
        );
        let dx = if is_pointwise(g) {
            dcol
        } else {
            col2im(&dcol, &d, g)
        };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(bias.shape().to_vec(), db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
        let (h, wd, cin) = x.hwc().unwrap();
        let cout = w.shape()[3];
        let (oh, ow) = (conv_output_size(h, g), conv_output_size(wd, g));
        let pad = g.padding() as isize;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                            let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                    * w.data()[((ky * g.kernel + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| i as f64);
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[2]), ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::from_fn(&[5, 5, 3], |i| i as f64);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[3, 3, 3, 2]),
            &Tensor::new(vec![2], vec![0.5, -2.0]).unwrap(),
            ConvGeometry::new(3, 1, 1),
        )
        .unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.5, -2.0]);
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, dil) in [(1, 1), (1, 2), (2, 1), (1, 4), (2, 2)] {
            let g = ConvGeometry::new(3, stride, dil);
            let x = random(&mut rng, &[5, 5, 3]);
            let w = random(&mut rng, &[3, 3, 3, 4]);
            let b = random(&mut rng, &[4]);
            let y = conv2d(&x, &w, &b, g).unwrap();
            let o = conv_oracle(&x, &w, &b, g);
            assert_eq!(y.shape(), o.shape());
            assert!(y.max_abs_diff(&o) <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch() {
        let err = conv2d(
            &Tensor::zeros(&[4, 4, 2]),
            &Tensor::zeros(&[3, 3, 3, 1]),
            &Tensor::zeros(&[1]),
            ConvGeometry::new(3, 1, 1),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, stride, dil) in [(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1)] {
            let g = ConvGeometry::new(k, stride, dil);
            let x = random(&mut rng, &[6, 5, 2]);
            let w = random(&mut rng, &[k, k, 2, 3]);
            let b = Tensor::zeros(&[3]);
            let y = conv2d(&x, &w, &b, g).unwrap();
            let gy = random(&mut rng, y.shape());
            let (dx, dw, _) = conv2d_backward(&x, &w, &b, g, &gy, true).unwrap();
            let dx = dx.unwrap();
            // <conv(x; w), gy> is bilinear in (x, w): equals <x, dx> and <w, dw>.
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "{lhs} {via_x}");
            assert!((lhs - via_w).abs() < 1e-10, "{lhs} {via_w}");
        }
    }
}

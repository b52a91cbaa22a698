//! Forward and backward rules for every [`OpTag`].

use super::{sigmoid, softplus, OpTag};
use crate::error::{Error, Result};
use crate::tensor::{
    self, bilinear_upsample2x, bilinear_upsample2x_adjoint, channel_softmax, conv2d,
    conv2d_backward, elementwise, ElemOp, Rhs, Tensor,
};

fn arity(op: &OpTag, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(format!(
            "{op:?} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

pub(crate) fn forward(op: &OpTag, inputs: &[&Tensor]) -> Result<Tensor> {
    use OpTag::*;
    match op {
        Add | Sub | Mul | Div => {
            arity(op, inputs, 2)?;
            let e = match op {
                Add => ElemOp::Add,
                Sub => ElemOp::Sub,
                Mul => ElemOp::Mul,
                _ => ElemOp::Div,
            };
            elementwise(e, inputs[0], Rhs::Tensor(inputs[1]))
        }
        AddScalar(c) => {
            arity(op, inputs, 1)?;
            elementwise(ElemOp::Add, inputs[0], Rhs::Scalar(*c))
        }
        MulScalar(c) => {
            arity(op, inputs, 1)?;
            elementwise(ElemOp::Mul, inputs[0], Rhs::Scalar(*c))
        }
        Relu | Ln | Exp => {
            arity(op, inputs, 1)?;
            let e = match op {
                Relu => ElemOp::Relu,
                Ln => ElemOp::Ln,
                _ => ElemOp::Exp,
            };
            elementwise(e, inputs[0], Rhs::None)
        }
        Softplus => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].map(softplus))
        }
        ChannelSoftmax => {
            arity(op, inputs, 1)?;
            channel_softmax(inputs[0])
        }
        Sum => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Mean => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum() / inputs[0].len() as f64))
        }
        Conv2d(g) => {
            arity(op, inputs, 3)?;
            conv2d(inputs[0], inputs[1], inputs[2], *g)
        }
        Upsample2x => {
            arity(op, inputs, 1)?;
            bilinear_upsample2x(inputs[0])
        }
        Concat => tensor::concat_channels(inputs),
        SliceChannels { start, len } => {
            arity(op, inputs, 1)?;
            tensor::slice_channels(inputs[0], *start, *len)
        }
        SelectRow(r) => {
            arity(op, inputs, 1)?;
            let &[rows, cols] = inputs[0].shape() else {
                return Err(Error::shape("SelectRow needs a matrix"));
            };
            if *r >= rows {
                return Err(Error::shape(format!("row {r} of {rows}")));
            }
            Tensor::new(vec![cols], inputs[0].data()[r * cols..(r + 1) * cols].to_vec())
        }
        WeightedMoments => {
            arity(op, inputs, 3)?;
            weighted_moments(inputs[0], inputs[1], inputs[2])
        }
        Scores => {
            if inputs.len() < 2 {
                return Err(Error::invalid("Scores needs features and at least one component"));
            }
            scores(inputs[0], &inputs[1..])
        }
        EmaBlend(lambda) => {
            arity(op, inputs, 2)?;
            if !(0.0..=1.0).contains(lambda) {
                return Err(Error::invalid(format!("learning rate {lambda} outside [0, 1]")));
            }
            inputs[0].zip_map(inputs[1], |p, f| (1.0 - lambda) * p + lambda * f)
        }
        StopGradient => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].clone())
        }
        CrossEntropy(target) => {
            arity(op, inputs, 1)?;
            cross_entropy(inputs[0], target)
        }
        Aggregate { eps } => {
            if inputs.is_empty() {
                return Err(Error::invalid("aggregation needs at least one object"));
            }
            aggregate(inputs, *eps)
        }
    }
}

/// Per-op input gradients. Entries for inputs with `wanted[i] == false` may be `None`.
pub(crate) fn backward(
    op: &OpTag,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    wanted: &[bool],
    fault: bool,
) -> Result<Vec<Option<Tensor>>> {
    use OpTag::*;
    let r = match op {
        Add => vec![Some(g.clone()), Some(g.clone())],
        Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Mul => vec![
            Some(g.zip_map(inputs[1], |g, b| g * b)?),
            Some(g.zip_map(inputs[0], |g, a| g * a)?),
        ],
        Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = g.zip_map(b, |g, b| g / b)?;
            let gb = Tensor::from_fn(a.shape(), |i| {
                let bi = b.data()[i];
                -g.data()[i] * a.data()[i] / (bi * bi)
            });
            vec![Some(ga), Some(gb)]
        }
        AddScalar(_) => vec![Some(g.clone())],
        MulScalar(c) => vec![Some(g.scale(*c))],
        Relu => vec![Some(g.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?)],
        Ln => vec![Some(g.zip_map(inputs[0], |g, x| g / x)?)],
        Exp => vec![Some(g.zip_map(out, |g, y| g * y)?)],
        Softplus => vec![Some(g.zip_map(inputs[0], |g, x| g * sigmoid(x))?)],
        ChannelSoftmax => {
            let c = *out.shape().last().expect("softmax output has channels");
            let mut gx = Vec::with_capacity(out.len());
            for (y, gy) in out.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                gx.extend(y.iter().zip(gy).map(|(y, gy)| y * (gy - dot)));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Sum => vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))],
        Mean => {
            let n = inputs[0].len() as f64;
            vec![Some(Tensor::full(inputs[0].shape(), g.data()[0] / n))]
        }
        Conv2d(geom) => {
            let (dx, dw, db) =
                conv2d_backward(inputs[0], inputs[1], inputs[2], *geom, g, wanted[0])?;
            vec![dx, Some(dw), Some(db)]
        }
        Upsample2x => {
            let (h, w, _) = inputs[0].hwc()?;
            vec![Some(bilinear_upsample2x_adjoint(g, h, w)?.reshape(inputs[0].shape())?)]
        }
        Concat => {
            let (_, _, total) = out.hwc()?;
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for (inp, &want) in inputs.iter().zip(wanted) {
                let (_, _, c) = inp.hwc()?;
                if want {
                    let mut d = Vec::with_capacity(inp.len());
                    for px in g.data().chunks_exact(total) {
                        d.extend_from_slice(&px[offset..offset + c]);
                    }
                    res.push(Some(Tensor::new(inp.shape().to_vec(), d)?));
                } else {
                    res.push(None);
                }
                offset += c;
            }
            res
        }
        SliceChannels { start, len } => {
            let (_, _, c) = inputs[0].hwc()?;
            let mut d = vec![0.0; inputs[0].len()];
            for (dst, src) in d.chunks_exact_mut(c).zip(g.data().chunks_exact(*len)) {
                dst[*start..start + len].copy_from_slice(src);
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)]
        }
        SelectRow(r) => {
            let cols = inputs[0].shape()[1];
            let mut d = Tensor::zeros(inputs[0].shape());
            d.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.data());
            vec![Some(d)]
        }
        WeightedMoments => weighted_moments_backward(inputs[0], inputs[1], inputs[2], out, g)?,
        Scores => scores_backward(inputs[0], &inputs[1..], g, wanted, fault)?,
        EmaBlend(lambda) => vec![Some(g.scale(1.0 - lambda)), Some(g.scale(*lambda))],
        StopGradient => vec![None],
        CrossEntropy(target) => vec![Some(cross_entropy_backward(inputs[0], target, g)?)],
        Aggregate { eps } => aggregate_backward(inputs, out, g, *eps)?,
    };
    Ok(r)
}

fn moments_dims(x: &Tensor, alpha: &Tensor, r: &Tensor) -> Result<(usize, usize)> {
    let (h, w, d) = x.hwc()?;
    if alpha.len() != h * w {
        return Err(Error::shape(format!(
            "assignment map {:?} does not cover features {:?}",
            alpha.shape(),
            x.shape()
        )));
    }
    if r.len() != d {
        return Err(Error::shape(format!(
            "regularizer has {} entries for {d}-dimensional features",
            r.len()
        )));
    }
    Ok((h * w, d))
}

/// Assignment-weighted mean and regularized diagonal variance.
pub(crate) fn weighted_moments(x: &Tensor, alpha: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (n, d) = moments_dims(x, alpha, r)?;
    let a = alpha.data();
    if a.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("negative assignment weight"));
    }
    let mass: f64 = a.iter().sum();
    if mass <= 0.0 {
        return Err(Error::invalid("assignment mass is zero"));
    }
    let xs = x.data();
    let mut mean = vec![0.0; d];
    for p in 0..n {
        let ap = a[p];
        if ap == 0.0 {
            continue;
        }
        for (m, &v) in mean.iter_mut().zip(&xs[p * d..(p + 1) * d]) {
            *m += ap * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut var = vec![0.0; d];
    for p in 0..n {
        let ap = a[p];
        if ap == 0.0 {
            continue;
        }
        for ((s, &v), &m) in var.iter_mut().zip(&xs[p * d..(p + 1) * d]).zip(&mean) {
            let e = v - m;
            *s += ap * e * e;
        }
    }
    for (s, &rv) in var.iter_mut().zip(r.data()) {
        *s = *s / mass + rv;
    }
    mean.extend(var);
    Tensor::new(vec![2, d], mean)
}

fn weighted_moments_backward(
    x: &Tensor,
    alpha: &Tensor,
    r: &Tensor,
    out: &Tensor,
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let (_, _, d) = x.hwc()?;
    let a = alpha.data();
    let xs = x.data();
    let mass: f64 = a.iter().sum();
    let (mean, var) = out.data().split_at(d);
    let (g_mean, g_var) = g.data().split_at(d);
    // Unregularized weighted spread per dimension.
    let spread: Vec<f64> = var.iter().zip(r.data()).map(|(v, r)| v - r).collect();
    let mut gx = vec![0.0; xs.len()];
    let mut ga = vec![0.0; a.len()];
    for (p, &ap) in a.iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..d {
            let e = xs[p * d + j] - mean[j];
            gx[p * d + j] = ap * (g_mean[j] + 2.0 * e * g_var[j]) / mass;
            acc += g_mean[j] * e + g_var[j] * (e * e - spread[j]);
        }
        ga[p] = acc / mass;
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), gx)?),
        Some(Tensor::new(alpha.shape().to_vec(), ga)?),
        Some(Tensor::new(r.shape().to_vec(), g_var.to_vec())?),
    ])
}

fn component_rows(comp: &Tensor, d: usize) -> Result<(&[f64], &[f64])> {
    if comp.shape() != [2, d] {
        return Err(Error::shape(format!(
            "mixture component must be 2×{d}, got {:?}",
            comp.shape()
        )));
    }
    Ok(comp.data().split_at(d))
}

/// Per-pixel, per-component Gaussian log-density with constants dropped.
pub(crate) fn scores(x: &Tensor, comps: &[&Tensor]) -> Result<Tensor> {
    let (h, w, d) = x.hwc()?;
    let k = comps.len();
    let mut out = vec![0.0; h * w * k];
    for (ki, comp) in comps.iter().enumerate() {
        let (mean, var) = component_rows(comp, d)?;
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("zero variance entry"));
        }
        let log_det: f64 = var.iter().map(|v| v.ln()).sum();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
        for (p, px) in x.data().chunks_exact(d).enumerate() {
            let mut maha = 0.0;
            for j in 0..d {
                let e = px[j] - mean[j];
                maha += e * e * inv[j];
            }
            out[p * k + ki] = -0.5 * (log_det + maha);
        }
    }
    Tensor::new(vec![h, w, k], out)
}

fn scores_backward(
    x: &Tensor,
    comps: &[&Tensor],
    g: &Tensor,
    wanted: &[bool],
    fault: bool,
) -> Result<Vec<Option<Tensor>>> {
    let (_, _, d) = x.hwc()?;
    let k = comps.len();
    let mut gx = vec![0.0; x.len()];
    let mut res = Vec::with_capacity(k + 1);
    res.push(None);
    for (ki, comp) in comps.iter().enumerate() {
        let (mean, var) = component_rows(comp, d)?;
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
        let mut gm = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let mut gsum = 0.0;
        for (p, px) in x.data().chunks_exact(d).enumerate() {
            let gp = g.data()[p * k + ki];
            if gp == 0.0 {
                continue;
            }
            gsum += gp;
            for j in 0..d {
                let z = (px[j] - mean[j]) * inv[j];
                gx[p * d + j] -= gp * z;
                gm[j] += gp * z;
                gv[j] += 0.5 * gp * z * z;
            }
        }
        for j in 0..d {
            gv[j] -= 0.5 * gsum * inv[j];
        }
        if wanted[ki + 1] {
            gm.extend(gv);
            res.push(Some(Tensor::new(vec![2, d], gm)?));
        } else {
            res.push(None);
        }
    }
    if fault {
        gx.iter_mut().for_each(|v| *v *= 1.5);
    }
    res[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
    Ok(res)
}

fn ce_dims(logits: &Tensor, target: &Tensor) -> Result<usize> {
    let (h, w, c) = logits.hwc()?;
    if c != 2 || target.len() != h * w {
        return Err(Error::shape(format!(
            "cross-entropy needs H×W×2 logits and an H×W target, got {:?} and {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    Ok(h * w)
}

fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = ce_dims(logits, target)?;
    let mut total = 0.0;
    for (l, &t) in logits.data().chunks_exact(2).zip(target.data()) {
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        // Soft targets allowed: t is the foreground probability.
        total += lse - (1.0 - t) * l[0] - t * l[1];
    }
    Ok(Tensor::scalar(total / n as f64))
}

fn cross_entropy_backward(logits: &Tensor, target: &Tensor, g: &Tensor) -> Result<Tensor> {
    let n = ce_dims(logits, target)?;
    let scale = g.data()[0] / n as f64;
    let mut d = Vec::with_capacity(logits.len());
    for (l, &t) in logits.data().chunks_exact(2).zip(target.data()) {
        let mut p = [l[0], l[1]];
        tensor::softmax_in_place(&mut p);
        d.push(scale * (p[0] - (1.0 - t)));
        d.push(scale * (p[1] - t));
    }
    Tensor::new(logits.shape().to_vec(), d)
}

fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn sorted_product(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().product()
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Softmax aggregation. Reductions over objects are done on sorted values so
/// that the result does not depend on object order.
pub(crate) fn aggregate(inputs: &[&Tensor], eps: f64) -> Result<Tensor> {
    let (h, w, c) = inputs[0].hwc()?;
    if c != 1 || inputs.iter().any(|t| t.shape() != inputs[0].shape()) {
        return Err(Error::shape("aggregation needs equally shaped H×W×1 masks"));
    }
    let m = inputs.len();
    let mut out = vec![0.0; h * w * (m + 1)];
    let mut scratch = vec![0.0; m + 1];
    let mut logits = vec![0.0; m + 1];
    for p in 0..h * w {
        for (j, t) in inputs.iter().enumerate() {
            scratch[j] = 1.0 - t.data()[p].clamp(eps, 1.0 - eps);
        }
        let bg = sorted_product(&mut scratch[..m]);
        logits[0] = logit(bg);
        for (j, t) in inputs.iter().enumerate() {
            logits[j + 1] = logit(t.data()[p].clamp(eps, 1.0 - eps));
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (s, &l) in scratch.iter_mut().zip(&logits) {
            *s = (l - mx).exp();
        }
        let exps: Vec<f64> = scratch.clone();
        let z = sorted_sum(&mut scratch);
        for (j, e) in exps.iter().enumerate() {
            out[p * (m + 1) + j] = e / z;
        }
    }
    Tensor::new(vec![h, w, m + 1], out)
}

fn aggregate_backward(
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Result<Vec<Option<Tensor>>> {
    let m = inputs.len();
    let n = inputs[0].len();
    let mut grads = vec![vec![0.0; n]; m];
    let mut ones_minus = vec![0.0; m];
    for p in 0..n {
        let o = &out.data()[p * (m + 1)..(p + 1) * (m + 1)];
        let go = &g.data()[p * (m + 1)..(p + 1) * (m + 1)];
        let dot: f64 = o.iter().zip(go).map(|(a, b)| a * b).sum();
        for (j, t) in inputs.iter().enumerate() {
            ones_minus[j] = 1.0 - t.data()[p].clamp(eps, 1.0 - eps);
        }
        let bg = sorted_product(&mut ones_minus.clone());
        let g_bg_logit = o[0] * (go[0] - dot);
        let g_bg = g_bg_logit * (1.0 / bg + 1.0 / (1.0 - bg));
        for (j, t) in inputs.iter().enumerate() {
            let raw = t.data()[p];
            if raw <= eps || raw >= 1.0 - eps {
                continue;
            }
            let q = raw;
            let g_logit = o[j + 1] * (go[j + 1] - dot);
            grads[j][p] = g_logit * (1.0 / q + 1.0 / (1.0 - q)) - g_bg * bg / (1.0 - q);
        }
    }
    grads
        .into_iter()
        .zip(inputs)
        .map(|(d, t)| Tensor::new(t.shape().to_vec(), d).map(Some))
        .collect()
}

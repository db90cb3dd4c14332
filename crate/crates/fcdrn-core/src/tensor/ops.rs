//! Forward operators and their backward rules.
//!
//! Every operator takes an optional tape (`Tp`). Recording happens only
//! when a tape is present and at least one input requires gradients;
//! eval-mode forward passes pay no tracking cost.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{tracking, Scalar, Shape, Tensor, Tp};
use crate::error::{Error, Result};

/// Output spatial dims of a convolution; errors when non-positive.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let eff = dilation * (k - 1) + 1;
    let oh = (h + 2 * pad).checked_sub(eff).map(|v| v / stride + 1);
    let ow = (w + 2 * pad).checked_sub(eff).map(|v| v / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::shape(format!(
            "convolution output is empty for input {h}x{w}, kernel {k}, stride {stride}, dilation {dilation}, pad {pad}"
        ))),
    }
}

/// Zero padding that preserves spatial dims at stride 1 for odd kernels.
pub fn same_padding(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
    row_stride: usize,
    col_off: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * row_stride + col_off..row * row_stride + col_off + ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if k == 1 && dilation == 1 && pad == 0 && stride == 1 {
                        drow.copy_from_slice(srow);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        *d = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { S::zero() };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    xapad: &mut [S],
    row_stride: usize,
    col_off: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = ci * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * row_stride + col_off..row * row_stride + col_off + ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xapad[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation plus bias. Weight layout is `[out, in, K, K]`,
/// bias `[1, out, 1, 1]`. Implemented as a whole-batch im2col followed
/// by one matrix product; `reference::conv2d_naive` is the loop oracle
/// for this kernel.
pub fn conv2d<S: Scalar>(
    tape: Tp<'_, S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.c != ws.c {
        return Err(Error::ChannelMismatch { expected: ws.c, got: xs.c });
    }
    if ws.h != ws.w {
        return Err(Error::shape(format!("non-square kernel {}x{}", ws.h, ws.w)));
    }
    if bias.numel() != ws.n {
        return Err(Error::shape(format!("bias length {} for {} output channels", bias.numel(), ws.n)));
    }
    let k = ws.h;
    let (oh, ow) = conv_out_dims(xs.h, xs.w, k, stride, dilation, pad)?;
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let ckk = xs.c * k * k;
    let ohw = oh * ow;
    let cols_w = xs.n * ohw;

    let mut out = vec![S::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut cols = vec![S::zero(); ckk * cols_w];
        for n in 0..xs.n {
            im2col(
                &xd[n * xs.c * xs.h * xs.w..],
                xs.c,
                xs.h,
                xs.w,
                k,
                stride,
                dilation,
                pad,
                oh,
                ow,
                &mut cols,
                cols_w,
                n * ohw,
            );
        }
        // one product for the whole batch: tmp[out, n*ohw]
        let mut tmp = vec![S::zero(); ws.n * cols_w];
        unsafe {
            S::gemm(
                ws.n,
                ckk,
                cols_w,
                S::one(),
                wd.as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                cols_w as isize,
                1,
                S::zero(),
                tmp.as_mut_ptr(),
                cols_w as isize,
                1,
            );
        }
        // scatter [out, n*ohw] into [n, out, ohw] and add bias
        for oc in 0..ws.n {
            let b = bd[oc];
            for n in 0..xs.n {
                let src = &tmp[oc * cols_w + n * ohw..oc * cols_w + (n + 1) * ohw];
                let dst = &mut out[(n * ws.n + oc) * ohw..(n * ws.n + oc + 1) * ohw];
                if b == S::zero() {
                    dst.copy_from_slice(src);
                } else {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + b;
                    }
                }
            }
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("conv2d".to_string()));
    }
    let y = Tensor::from_parts(out_shape, out);

    if tracking(tape, &[x, weight, bias]) {
        y.set_requires_grad(true);
        let (xi, wi, bi, yo) = (x.clone(), weight.clone(), bias.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let xs = xi.shape();
            let ws = wi.shape();
            let ckk = xs.c * k * k;
            let cols_w = xs.n * ohw;
            let need_x = xi.requires_grad();
            let need_w = wi.requires_grad();
            let need_b = bi.requires_grad();

            if need_b {
                let mut gb = bi.grad_mut();
                for n in 0..xs.n {
                    for oc in 0..ws.n {
                        let s: S = g[(n * ws.n + oc) * ohw..(n * ws.n + oc + 1) * ohw].iter().copied().sum();
                        gb[oc] += s;
                    }
                }
            }
            if !(need_w || need_x) {
                return;
            }
            // gather dY as [out, n*ohw]
            let mut gt = vec![S::zero(); ws.n * cols_w];
            for oc in 0..ws.n {
                for n in 0..xs.n {
                    gt[oc * cols_w + n * ohw..oc * cols_w + (n + 1) * ohw]
                        .copy_from_slice(&g[(n * ws.n + oc) * ohw..(n * ws.n + oc + 1) * ohw]);
                }
            }
            if need_w {
                let xd = xi.data();
                let mut cols = vec![S::zero(); ckk * cols_w];
                for n in 0..xs.n {
                    im2col(
                        &xd[n * xs.c * xs.h * xs.w..],
                        xs.c,
                        xs.h,
                        xs.w,
                        k,
                        stride,
                        dilation,
                        pad,
                        oh,
                        ow,
                        &mut cols,
                        cols_w,
                        n * ohw,
                    );
                }
                // dW[out, ckk] += gt[out, cols_w] x cols^T[cols_w, ckk]
                let mut gw = wi.grad_mut();
                unsafe {
                    S::gemm(
                        ws.n,
                        cols_w,
                        ckk,
                        S::one(),
                        gt.as_ptr(),
                        cols_w as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        cols_w as isize,
                        S::one(),
                        gw.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
            }
            if need_x {
                // dcols[ckk, cols_w] = W^T[ckk, out] x gt[out, cols_w]
                let mut dxcols = vec![S::zero(); ckk * cols_w];
                {
                    let wd = wi.data();
                    unsafe {
                        S::gemm(
                            ckk,
                            ws.n,
                            cols_w,
                            S::one(),
                            wd.as_ptr(),
                            1,
                            ckk as isize,
                            gt.as_ptr(),
                            cols_w as isize,
                            1,
                            S::zero(),
                            dxcols.as_mut_ptr(),
                            cols_w as isize,
                            1,
                        );
                    }
                }
                let mut gx = xi.grad_mut();
                for n in 0..xs.n {
                    col2im_add(
                        &dxcols,
                        xs.c,
                        xs.h,
                        xs.w,
                        k,
                        stride,
                        dilation,
                        pad,
                        oh,
                        ow,
                        &mut gx[n * xs.c * xs.h * xs.w..],
                        cols_w,
                        n * ohw,
                    );
                }
            }
        });
    }
    Ok(y)
}

/// 2x2 max pooling with stride 2; trailing odd row/column is dropped.
/// Returns the pooled tensor and flat argmax indices into the input.
pub fn maxpool2d<S: Scalar>(tape: Tp<'_, S>, x: &Tensor<S>) -> Result<(Tensor<S>, Rc<Vec<u32>>)> {
    let xs = x.shape();
    if xs.h < 2 || xs.w < 2 {
        return Err(Error::shape(format!("maxpool2d needs spatial dims >= 2, got {}", xs)));
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![S::zero(); out_shape.numel()];
    let mut arg = vec![0u32; out_shape.numel()];
    {
        let xd = x.data();
        let mut oi = 0usize;
        for n in 0..xs.n {
            for c in 0..xs.c {
                let plane = (n * xs.c + c) * xs.h * xs.w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = plane + (2 * oy) * xs.w + 2 * ox;
                        let mut best = base;
                        for &cand in &[base + 1, base + xs.w, base + xs.w + 1] {
                            if xd[cand] > xd[best] {
                                best = cand;
                            }
                        }
                        out[oi] = xd[best];
                        arg[oi] = best as u32;
                        oi += 1;
                    }
                }
            }
        }
    }
    let y = Tensor::from_parts(out_shape, out);
    let arg = Rc::new(arg);

    if tracking(tape, &[x]) {
        y.set_requires_grad(true);
        let (xi, yo, ai) = (x.clone(), y.clone(), Rc::clone(&arg));
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let mut gx = xi.grad_mut();
            for (gi, &idx) in g.iter().zip(ai.iter()) {
                gx[idx as usize] += *gi;
            }
        });
    }
    Ok((y, arg))
}

/// Nearest-neighbour upsampling: output pixel (y, x) copies input pixel
/// (floor(y*H/th), floor(x*W/tw)). Exact 2x repeat when target = 2*input.
pub fn upsample_nearest<S: Scalar>(tape: Tp<'_, S>, x: &Tensor<S>, th: usize, tw: usize) -> Result<Tensor<S>> {
    let xs = x.shape();
    if th < xs.h || tw < xs.w {
        return Err(Error::shape(format!("upsample target {th}x{tw} smaller than input {}x{}", xs.h, xs.w)));
    }
    let ys: Vec<u32> = (0..th).map(|y| (y * xs.h / th) as u32).collect();
    let xsrc: Vec<u32> = (0..tw).map(|x| (x * xs.w / tw) as u32).collect();
    let out_shape = Shape::new(xs.n, xs.c, th, tw);
    let mut out = vec![S::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let mut oi = 0usize;
        for n in 0..xs.n {
            for c in 0..xs.c {
                let plane = (n * xs.c + c) * xs.h * xs.w;
                for &iy in &ys {
                    let row = plane + iy as usize * xs.w;
                    for &ix in &xsrc {
                        out[oi] = xd[row + ix as usize];
                        oi += 1;
                    }
                }
            }
        }
    }
    let y = Tensor::from_parts(out_shape, out);

    if tracking(tape, &[x]) {
        y.set_requires_grad(true);
        let (xi, yo) = (x.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let xs = xi.shape();
            let mut gx = xi.grad_mut();
            let mut oi = 0usize;
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let plane = (n * xs.c + c) * xs.h * xs.w;
                    for &iy in &ys {
                        let row = plane + iy as usize * xs.w;
                        for &ix in &xsrc {
                            gx[row + ix as usize] += g[oi];
                            oi += 1;
                        }
                    }
                }
            }
        });
    }
    Ok(y)
}

/// Batch normalization over N, H, W per channel.
///
/// Train mode normalizes with batch statistics and updates the running
/// buffers in place with the given momentum; eval mode normalizes with
/// the running buffers. `running_mean`/`running_var` are state, not
/// trainable parameters.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<S: Scalar>(
    tape: Tp<'_, S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: f64,
    eps: f64,
    train: bool,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    if gamma.numel() != xs.c || beta.numel() != xs.c {
        return Err(Error::ChannelMismatch { expected: xs.c, got: gamma.numel() });
    }
    let m = xs.n * xs.h * xs.w;
    let hw = xs.h * xs.w;
    let epss = S::cast(eps);

    let (mean, var): (Vec<S>, Vec<S>) = if train {
        let xd = x.data();
        let mut mean = vec![S::zero(); xs.c];
        let mut var = vec![S::zero(); xs.c];
        let minv = S::cast(1.0 / m as f64);
        for c in 0..xs.c {
            let mut s = S::zero();
            for n in 0..xs.n {
                let sl = &xd[(n * xs.c + c) * hw..(n * xs.c + c + 1) * hw];
                s += sl.iter().copied().sum();
            }
            let mu = s * minv;
            let mut v = S::zero();
            for n in 0..xs.n {
                let sl = &xd[(n * xs.c + c) * hw..(n * xs.c + c + 1) * hw];
                for &e in sl {
                    let d = e - mu;
                    v += d * d;
                }
            }
            mean[c] = mu;
            var[c] = v * minv;
        }
        {
            let mom = S::cast(momentum);
            let keep = S::cast(1.0 - momentum);
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            for c in 0..xs.c {
                rm[c] = keep * rm[c] + mom * mean[c];
                rv[c] = keep * rv[c] + mom * var[c];
            }
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + epss).sqrt()).collect();
    let mut out = vec![S::zero(); xs.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let off = (n * xs.c + c) * hw;
                let (mu, is, ga, be) = (mean[c], inv_std[c], gd[c], bd[c]);
                for i in 0..hw {
                    out[off + i] = (xd[off + i] - mu) * is * ga + be;
                }
            }
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("batchnorm".to_string()));
    }
    let y = Tensor::from_parts(xs, out);

    if tracking(tape, &[x, gamma, beta]) {
        y.set_requires_grad(true);
        let (xi, gi_, bi, yo) = (x.clone(), gamma.clone(), beta.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let xs = xi.shape();
            let hw = xs.h * xs.w;
            let xd = xi.data();
            let gd = gi_.data();
            // Per-channel reductions over the batch.
            let mut sum_dy = vec![S::zero(); xs.c];
            let mut sum_dy_xhat = vec![S::zero(); xs.c];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let off = (n * xs.c + c) * hw;
                    let (mu, is) = (mean[c], inv_std[c]);
                    for i in 0..hw {
                        let dy = g[off + i];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * (xd[off + i] - mu) * is;
                    }
                }
            }
            if gi_.requires_grad() {
                gi_.add_to_grad(&sum_dy_xhat);
            }
            if bi.requires_grad() {
                bi.add_to_grad(&sum_dy);
            }
            if xi.requires_grad() {
                let mut gx = xi.grad_mut();
                let mf = S::cast(m as f64);
                let minv = S::one() / mf;
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let off = (n * xs.c + c) * hw;
                        let (mu, is, ga) = (mean[c], inv_std[c], gd[c]);
                        if train {
                            let k = ga * is * minv;
                            for i in 0..hw {
                                let xhat = (xd[off + i] - mu) * is;
                                gx[off + i] += k * (mf * g[off + i] - sum_dy[c] - xhat * sum_dy_xhat[c]);
                            }
                        } else {
                            let k = ga * is;
                            for i in 0..hw {
                                gx[off + i] += k * g[off + i];
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(y)
}

pub fn relu<S: Scalar>(tape: Tp<'_, S>, x: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    let y = Tensor::from_parts(x.shape(), out);
    if tracking(tape, &[x]) {
        y.set_requires_grad(true);
        let (xi, yo) = (x.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let xd = xi.data();
            let mut gx = xi.grad_mut();
            for i in 0..g.len() {
                if xd[i] > S::zero() {
                    gx[i] += g[i];
                }
            }
        });
    }
    y
}

/// Dropout granularity; the paper does not fix one, element-wise is the default.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum DropoutKind {
    Element,
    Channel,
}

/// Inverted dropout: zero with probability `p`, scale survivors by 1/(1-p).
/// Identity in eval mode or at p = 0.
pub fn dropout<S: Scalar>(
    tape: Tp<'_, S>,
    x: &Tensor<S>,
    p: f64,
    train: bool,
    kind: DropoutKind,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let xs = x.shape();
    let scale = S::cast(1.0 / (1.0 - p));
    let hw = xs.h * xs.w;
    let mask: Vec<S> = match kind {
        DropoutKind::Element => (0..xs.numel())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { scale })
            .collect(),
        DropoutKind::Channel => {
            let per: Vec<S> =
                (0..xs.n * xs.c).map(|_| if rng.gen::<f64>() < p { S::zero() } else { scale }).collect();
            let mut mask = vec![S::zero(); xs.numel()];
            for (nc, &f) in per.iter().enumerate() {
                mask[nc * hw..(nc + 1) * hw].fill(f);
            }
            mask
        }
    };
    let out: Vec<S> = x.data().iter().zip(&mask).map(|(&v, &f)| v * f).collect();
    let y = Tensor::from_parts(xs, out);
    if tracking(tape, &[x]) {
        y.set_requires_grad(true);
        let (xi, yo) = (x.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let mut gx = xi.grad_mut();
            for i in 0..g.len() {
                gx[i] += g[i] * mask[i];
            }
        });
    }
    Ok(y)
}

/// Element-wise sum of two equal-shape tensors.
pub fn add<S: Scalar>(tape: Tp<'_, S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("add of {} and {}", a.shape(), b.shape())));
    }
    let out: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let y = Tensor::from_parts(a.shape(), out);
    if tracking(tape, &[a, b]) {
        y.set_requires_grad(true);
        let (ai, bi, yo) = (a.clone(), b.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            if ai.requires_grad() {
                ai.add_to_grad(&g);
            }
            if bi.requires_grad() {
                bi.add_to_grad(&g);
            }
        });
    }
    Ok(y)
}

/// Concatenate along the channel axis, inputs in the given order.
pub fn concat_channels<S: Scalar>(tape: Tp<'_, S>, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat of zero tensors"));
    }
    let first = parts[0].shape();
    let mut c_total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(format!("concat of {} and {}", first, s)));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let hw = first.h * first.w;
    let mut out = vec![S::zero(); out_shape.numel()];
    for n in 0..first.n {
        let mut coff = 0usize;
        for p in parts {
            let pc = p.shape().c;
            let pd = p.data();
            out[(n * c_total + coff) * hw..(n * c_total + coff + pc) * hw]
                .copy_from_slice(&pd[n * pc * hw..(n + 1) * pc * hw]);
            coff += pc;
        }
    }
    let y = Tensor::from_parts(out_shape, out);
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    if tracking(tape, &refs) {
        y.set_requires_grad(true);
        let inputs: Vec<Tensor<S>> = parts.to_vec();
        let yo = y.clone();
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            for n in 0..first.n {
                let mut coff = 0usize;
                for p in &inputs {
                    let pc = p.shape().c;
                    if p.requires_grad() {
                        let mut gp = p.grad_mut();
                        let src = &g[(n * c_total + coff) * hw..(n * c_total + coff + pc) * hw];
                        for (d, s) in gp[n * pc * hw..(n + 1) * pc * hw].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    coff += pc;
                }
            }
        });
    }
    Ok(y)
}

/// Slice a channel range out of a tensor (no gradient tracking; test utility).
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, from: usize, to: usize) -> Result<Tensor<S>> {
    let xs = x.shape();
    if from >= to || to > xs.c {
        return Err(Error::invalid(format!("channel slice {from}..{to} of {} channels", xs.c)));
    }
    let hw = xs.h * xs.w;
    let c = to - from;
    let mut out = vec![S::zero(); xs.n * c * hw];
    let xd = x.data();
    for n in 0..xs.n {
        out[n * c * hw..(n + 1) * c * hw]
            .copy_from_slice(&xd[(n * xs.c + from) * hw..(n * xs.c + to) * hw]);
    }
    Tensor::from_vec(Shape::new(xs.n, c, xs.h, xs.w), out)
}

/// Sum of all elements as a scalar tensor.
pub fn sum_all<S: Scalar>(tape: Tp<'_, S>, x: &Tensor<S>) -> Tensor<S> {
    let s: S = x.data().iter().copied().sum();
    let y = Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![s]);
    if tracking(tape, &[x]) {
        y.set_requires_grad(true);
        let (xi, yo) = (x.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let gv = g[0];
            let mut gx = xi.grad_mut();
            for v in gx.iter_mut() {
                *v += gv;
            }
        });
    }
    y
}

/// Classification target for the segmentation loss.
pub enum Target<'a, S: Scalar> {
    /// Per-pixel class indices `[N*H*W]`; `void` pixels carry no loss.
    Hard { labels: &'a [u32], void: Option<u32> },
    /// Per-pixel target distribution with the same shape as the logits.
    Soft { probs: &'a Tensor<S>, valid: Option<&'a [bool]> },
}

/// Mean softmax cross-entropy over non-void pixels, stabilized by
/// max-subtraction. Accepts hard labels or soft target distributions.
pub fn softmax_cross_entropy<S: Scalar>(
    tape: Tp<'_, S>,
    logits: &Tensor<S>,
    target: Target<'_, S>,
) -> Result<Tensor<S>> {
    let ls = logits.shape();
    let k = ls.c;
    let npix = ls.n * ls.h * ls.w;
    let hw = ls.h * ls.w;

    enum Owned<S: Scalar> {
        Hard { labels: Rc<Vec<u32>>, void: Option<u32> },
        Soft { probs: Tensor<S>, valid: Option<Rc<Vec<bool>>> },
    }
    let owned = match target {
        Target::Hard { labels, void } => {
            if labels.len() != npix {
                return Err(Error::shape(format!(
                    "label map has {} entries for logits {}",
                    labels.len(),
                    ls
                )));
            }
            for &l in labels {
                let is_void = void == Some(l);
                if !is_void && l as usize >= k {
                    return Err(Error::data(format!("label {l} out of range for {k} classes")));
                }
            }
            Owned::Hard { labels: Rc::new(labels.to_vec()), void }
        }
        Target::Soft { probs, valid } => {
            if probs.shape() != ls {
                return Err(Error::shape(format!("soft target {} for logits {}", probs.shape(), ls)));
            }
            if let Some(v) = valid {
                if v.len() != npix {
                    return Err(Error::shape(format!("valid mask has {} entries for {npix} pixels", v.len())));
                }
            }
            Owned::Soft { probs: probs.clone(), valid: valid.map(|v| Rc::new(v.to_vec())) }
        }
    };

    // Pixel accounting shared by forward and backward.
    let pixel_index = move |n: usize, y: usize, x: usize| n * hw + y * ls.w + x;
    let mut total = 0.0f64;
    let mut valid_count = 0usize;
    {
        let ld = logits.data();
        for n in 0..ls.n {
            for y in 0..ls.h {
                for x in 0..ls.w {
                    let pix = pixel_index(n, y, x);
                    let is_valid = match &owned {
                        Owned::Hard { labels, void } => *void != Some(labels[pix]),
                        Owned::Soft { valid, .. } => valid.as_ref().map_or(true, |v| v[pix]),
                    };
                    if !is_valid {
                        continue;
                    }
                    valid_count += 1;
                    let mut mx = f64::NEG_INFINITY;
                    for c in 0..k {
                        mx = mx.max(ld[(n * k + c) * hw + y * ls.w + x].to_f64x());
                    }
                    let mut lse = 0.0f64;
                    for c in 0..k {
                        lse += (ld[(n * k + c) * hw + y * ls.w + x].to_f64x() - mx).exp();
                    }
                    let lse = mx + lse.ln();
                    match &owned {
                        Owned::Hard { labels, .. } => {
                            let l = labels[pix] as usize;
                            total += lse - ld[(n * k + l) * hw + y * ls.w + x].to_f64x();
                        }
                        Owned::Soft { probs, .. } => {
                            let pd = probs.data();
                            for c in 0..k {
                                let t = pd[(n * k + c) * hw + y * ls.w + x].to_f64x();
                                total += t * (lse - ld[(n * k + c) * hw + y * ls.w + x].to_f64x());
                            }
                        }
                    }
                }
            }
        }
    }
    let loss_val = if valid_count == 0 { 0.0 } else { total / valid_count as f64 };
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".to_string()));
    }
    let y = Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![S::cast(loss_val)]);

    if tracking(tape, &[logits]) && valid_count > 0 {
        y.set_requires_grad(true);
        let (li, yo) = (logits.clone(), y.clone());
        tape.unwrap().push(move || {
            let Some(g) = yo.grad() else { return };
            let gl = g[0].to_f64x() / valid_count as f64;
            let ld = li.data();
            let mut gx = li.grad_mut();
            let mut probs = vec![0.0f64; k];
            for n in 0..ls.n {
                for yy in 0..ls.h {
                    for xx in 0..ls.w {
                        let pix = pixel_index(n, yy, xx);
                        let (is_valid, tsum) = match &owned {
                            Owned::Hard { labels, void } => (*void != Some(labels[pix]), 1.0),
                            Owned::Soft { probs: p, valid } => {
                                let ok = valid.as_ref().map_or(true, |v| v[pix]);
                                let pd = p.data();
                                let ts: f64 =
                                    (0..k).map(|c| pd[(n * k + c) * hw + yy * ls.w + xx].to_f64x()).sum();
                                (ok, ts)
                            }
                        };
                        if !is_valid {
                            continue;
                        }
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..k {
                            mx = mx.max(ld[(n * k + c) * hw + yy * ls.w + xx].to_f64x());
                        }
                        let mut denom = 0.0f64;
                        for c in 0..k {
                            let e = (ld[(n * k + c) * hw + yy * ls.w + xx].to_f64x() - mx).exp();
                            probs[c] = e;
                            denom += e;
                        }
                        for c in 0..k {
                            let sm = probs[c] / denom;
                            let t = match &owned {
                                Owned::Hard { labels, .. } => {
                                    if labels[pix] as usize == c {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Owned::Soft { probs: p, .. } => p.data()[(n * k + c) * hw + yy * ls.w + xx].to_f64x(),
                            };
                            // d/dl of sum_c t_c (lse - l_c) = tsum * softmax - t
                            gx[(n * k + c) * hw + yy * ls.w + xx] += S::cast(gl * (tsum * sm - t));
                        }
                    }
                }
            }
        });
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t((1, 1, 5, 5), (0..25).map(|v| v as f64).collect());
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let weight = t((1, 1, 3, 3), w);
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(None, &x, &weight, &bias, 1, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_all_ones_border_counts() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 5, 5), 1.0);
        let weight = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(None, &x, &weight, &bias, 1, 1, 1).unwrap();
        let d = y.to_vec();
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[2], 6.0); // edge
        assert_eq!(d[12], 9.0); // interior
    }

    #[test]
    fn conv_dilation_keeps_same_size() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 7, 7), 1.0);
        let weight = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 0.5);
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(None, &x, &weight, &bias, 1, 2, same_padding(3, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 7, 7));
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let weight = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 3));
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(conv2d(None, &x, &weight, &bias, 1, 1, 1).is_err());
    }

    #[test]
    fn maxpool_basic_and_floor() {
        let (y, _) = maxpool2d(None, &t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);

        let x = t((1, 1, 5, 5), (0..25).map(|v| v as f64).collect());
        let (y, _) = maxpool2d(None, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        // last row/col (values 20..24 and col 4) never pooled
        assert_eq!(y.to_vec(), vec![6.0, 8.0, 16.0, 18.0]);

        assert!(maxpool2d(None, &t((1, 1, 1, 1), vec![0.0])).is_err());
    }

    #[test]
    fn upsample_repeat_and_fractional() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest(None, &x, 4, 4).unwrap();
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let y = upsample_nearest(None, &x, 3, 3).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
        // identity when target equals input
        let y = upsample_nearest(None, &x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(upsample_nearest(None, &x, 1, 2).is_err());
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let shape = Shape::new(4, 3, 2, 2);
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(shape, data).unwrap();
        let gamma = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let rm = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let rv = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
        let y = batchnorm(None, &x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, true).unwrap();
        let yd = y.to_vec();
        let hw = 4;
        for c in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|n| yd[(n * 3 + c) * hw..(n * 3 + c + 1) * hw].to_vec()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_matches_two_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let shape = Shape::new(3, 2, 3, 3);
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..5.0)).collect();
        let x = Tensor::from_vec(shape, data.clone()).unwrap();
        let gamma = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let rm = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let rv = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let y = batchnorm(None, &x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, true).unwrap();

        // independent two-pass statistics
        let hw = 9;
        for c in 0..2 {
            let vals: Vec<f64> =
                (0..3).flat_map(|n| data[(n * 2 + c) * hw..(n * 2 + c + 1) * hw].to_vec()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let yd = y.to_vec();
            for n in 0..3 {
                for i in 0..hw {
                    let expect = (data[(n * 2 + c) * hw + i] - mean) / (var + 1e-5).sqrt();
                    let got = yd[(n * 2 + c) * hw + i];
                    assert!((expect - got).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn dropout_zero_p_is_identity() {
        let x = t((1, 2, 2, 2), (0..8).map(|v| v as f64).collect());
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let y = dropout(None, &x, 0.0, true, DropoutKind::Element, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(dropout(None, &x, 1.0, true, DropoutKind::Element, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo check: mean over trials stays within 3 sigma.
        let shape = Shape::new(1, 1, 8, 8);
        let x = Tensor::<f64>::full(shape, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let p = 0.2;
        let trials = 2000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let y = dropout(None, &x, p, true, DropoutKind::Element, &mut rng).unwrap();
            sum += y.to_vec().iter().sum::<f64>() / shape.numel() as f64;
        }
        let mean = sum / trials as f64;
        // Per-trial mean has std sqrt(p/(1-p)/64); divided by sqrt(trials).
        let sigma = (p / (1.0 - p) / shape.numel() as f64).sqrt() / (trials as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = t((1, 3, 2, 2), (0..12).map(|v| v as f64).collect());
        let b = t((1, 5, 2, 2), (100..120).map(|v| v as f64).collect());
        let y = concat_channels(None, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape().c, 8);
        assert_eq!(slice_channels(&y, 0, 3).unwrap().to_vec(), a.to_vec());
        assert_eq!(slice_channels(&y, 3, 8).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn loss_uniform_logits_is_ln_k() {
        let k = 11;
        let logits = Tensor::<f64>::zeros(Shape::new(1, k, 2, 2));
        let labels = vec![3u32; 4];
        let loss = softmax_cross_entropy(None, &logits, Target::Hard { labels: &labels, void: None }).unwrap();
        assert!((loss.item() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_margin_limit_and_void() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 2));
        logits.data_mut()[0] = 50.0; // class 0 at pixel 0
        let labels = vec![0u32, 3u32];
        let loss =
            softmax_cross_entropy(None, &logits, Target::Hard { labels: &labels, void: Some(3) }).unwrap();
        assert!(loss.item() < 1e-12, "high-margin loss should vanish, got {}", loss.item());
        // out-of-range non-void label errors
        let bad = vec![0u32, 7u32];
        assert!(softmax_cross_entropy(None, &logits, Target::Hard { labels: &bad, void: Some(3) }).is_err());
    }

    #[test]
    fn loss_matches_per_pixel_lse_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let shape = Shape::new(1, 3, 2, 2);
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let logits = Tensor::from_vec(shape, data.clone()).unwrap();
        let labels = vec![0u32, 1, 2, 1];
        let loss = softmax_cross_entropy(None, &logits, Target::Hard { labels: &labels, void: None }).unwrap();

        let mut expect = 0.0;
        for p in 0..4 {
            let v: Vec<f64> = (0..3).map(|c| data[c * 4 + p]).collect();
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            expect += lse - v[labels[p] as usize];
        }
        expect /= 4.0;
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn sum_backward_is_ones_and_consumers_accumulate() {
        let tape = Tape::new();
        let x = Tensor::<f64>::param(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = relu(Some(&tape), &x);
        let b = relu(Some(&tape), &x);
        let s = add(Some(&tape), &a, &b).unwrap();
        let loss = sum_all(Some(&tape), &s);
        tape.backward(&loss).unwrap();
        // two consumers of x, each contributing ones
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }
}

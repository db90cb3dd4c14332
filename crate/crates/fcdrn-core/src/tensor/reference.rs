//! Naive loop implementations kept as independent oracles for the
//! im2col/gemm kernels. Slow on purpose; used by tests only.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_naive<S: Scalar>(
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
    let k = ws.h;
    let (oh, ow) = super::ops::conv_out_dims(xs.h, xs.w, k, stride, dilation, pad)?;
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![S::zero(); out_shape.numel()];
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    for n in 0..xs.n {
        for oc in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..xs.c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                                if iy >= 0 && iy < xs.h as isize && ix >= 0 && ix < xs.w as isize {
                                    acc += xd[xs.at(n, ic, iy as usize, ix as usize)]
                                        * wd[ws.at(oc, ic, ki, kj)];
                                }
                            }
                        }
                    }
                    out[out_shape.at(n, oc, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Exhaustive per-window max scan for 2x2/stride-2 pooling.
pub fn maxpool2d_naive<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.h < 2 || xs.w < 2 {
        return Err(Error::shape(format!("pool of {}", xs)));
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![S::zero(); out_shape.numel()];
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = xd[xs.at(n, c, 2 * oy, 2 * ox)];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = xd[xs.at(n, c, 2 * oy + dy, 2 * ox + dx)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[out_shape.at(n, c, oy, ox)] = best;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Total absolute value of a weight tensor divided by its input-channel
/// count: the per-layer norm statistic, evaluated element by element.
pub fn weight_norm_naive<S: Scalar>(weight: &Tensor<S>) -> f64 {
    let ws = weight.shape();
    let total: f64 = weight.data().iter().map(|v| v.to_f64x().abs()).sum();
    total / ws.c as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn fast_conv_matches_naive_on_random_configs() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.gen_range(1..3);
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let k = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
            let stride = rng.gen_range(1..3);
            let dilation = if stride > 1 { 1 } else { rng.gen_range(1..3) };
            let h = rng.gen_range(k * dilation + 2..k * dilation + 8);
            let w = rng.gen_range(k * dilation + 2..k * dilation + 8);
            let pad = rng.gen_range(0..=ops::same_padding(k, dilation));

            let x = Tensor::<f64>::from_vec(
                Shape::new(n, ci, h, w),
                (0..n * ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let wt = Tensor::from_vec(
                Shape::new(co, ci, k, k),
                (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let b = Tensor::from_vec(
                Shape::new(1, co, 1, 1),
                (0..co).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap();

            let fast = ops::conv2d(None, &x, &wt, &b, stride, dilation, pad).unwrap();
            let slow = conv2d_naive(&x, &wt, &b, stride, dilation, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.to_vec().iter().zip(slow.to_vec()) {
                assert!((a - e).abs() < 1e-10_f64, "conv mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn pool_matches_exhaustive_scan_up_to_6x6() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for h in 2..=6usize {
            for w in 2..=6usize {
                let x = Tensor::<f64>::from_vec(
                    Shape::new(1, 2, h, w),
                    (0..2 * h * w).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                )
                .unwrap();
                let (fast, _) = ops::maxpool2d(None, &x).unwrap();
                let slow = maxpool2d_naive(&x).unwrap();
                assert_eq!(fast.to_vec(), slow.to_vec());
            }
        }
    }
}

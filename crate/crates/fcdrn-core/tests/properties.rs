//! Property-based invariants over the tensor operators.

use fcdrn_core::tensor::ops;
use fcdrn_core::tensor::{reference, Shape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(
    max_n: usize,
    max_c: usize,
    max_hw: usize,
) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_n, 1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0..10.0f64, n * c * h * w)
            .prop_map(move |data| Tensor::from_vec(Shape::new(n, c, h, w), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_padding_preserves_spatial_dims(
        x in tensor_strategy(2, 3, 9),
        k_ix in 0usize..3,
        dilation in 1usize..4,
    ) {
        let k = [1, 3, 5][k_ix];
        let xs = x.shape();
        // input must fully contain one dilated kernel footprint
        prop_assume!(xs.h + 2 * ops::same_padding(k, dilation) >= dilation * (k - 1) + 1);
        prop_assume!(xs.w + 2 * ops::same_padding(k, dilation) >= dilation * (k - 1) + 1);
        let w = Tensor::full(Shape::new(2, xs.c, k, k), 0.1);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let y = ops::conv2d(None, &x, &w, &b, 1, dilation, ops::same_padding(k, dilation)).unwrap();
        prop_assert_eq!(y.shape().spatial(), xs.spatial());
    }

    #[test]
    fn concat_then_slice_roundtrips(
        a in tensor_strategy(2, 4, 6),
        c2 in 1usize..4,
    ) {
        let s = a.shape();
        let data: Vec<f64> = (0..s.n * c2 * s.h * s.w).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b = Tensor::from_vec(Shape::new(s.n, c2, s.h, s.w), data).unwrap();
        let cat = ops::concat_channels(None, &[a.clone(), b.clone()]).unwrap();
        let a2 = ops::slice_channels(&cat, 0, s.c).unwrap();
        let b2 = ops::slice_channels(&cat, s.c, s.c + c2).unwrap();
        prop_assert_eq!(a2.to_vec(), a.to_vec());
        prop_assert_eq!(b2.to_vec(), b.to_vec());
    }

    #[test]
    fn maxpool_matches_window_scan(x in tensor_strategy(2, 3, 6)) {
        prop_assume!(x.shape().h >= 2 && x.shape().w >= 2);
        let (fast, _) = ops::maxpool2d(None, &x).unwrap();
        let slow = reference::maxpool2d_naive(&x).unwrap();
        prop_assert_eq!(fast.to_vec(), slow.to_vec());
    }

    #[test]
    fn conv_matches_naive_oracle(
        x in tensor_strategy(2, 3, 7),
        stride in 1usize..3,
    ) {
        let xs = x.shape();
        prop_assume!(xs.h >= 3 && xs.w >= 3);
        let w = Tensor::from_vec(
            Shape::new(2, xs.c, 3, 3),
            (0..2 * xs.c * 9).map(|i| (i as f64 * 0.37).sin()).collect(),
        ).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.25, -0.5]).unwrap();
        let fast = ops::conv2d(None, &x, &w, &b, stride, 1, 1).unwrap();
        let slow = reference::conv2d_naive(&x, &w, &b, stride, 1, 1).unwrap();
        for (f, s) in fast.to_vec().iter().zip(slow.to_vec()) {
            prop_assert!((f - s).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_then_exact_downsample_indexing(x in tensor_strategy(1, 2, 5)) {
        // 2x repeat upsampling places each input pixel at (2y, 2x)
        let xs = x.shape();
        let y = ops::upsample_nearest(None, &x, 2 * xs.h, 2 * xs.w).unwrap();
        let yd = y.to_vec();
        let xd = x.to_vec();
        for c in 0..xs.c {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let src = xd[(c * xs.h + iy) * xs.w + ix];
                    let dst = yd[(c * 2 * xs.h + 2 * iy) * 2 * xs.w + 2 * ix];
                    prop_assert_eq!(src, dst);
                }
            }
        }
    }
}

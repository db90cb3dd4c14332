//! Receptive-field calculator cross-checked against the impulse
//! response of randomly weighted layer stacks (biases zero, positive
//! weights, so support propagates exactly).

use fcdrn_core::builder::{rf_chain, RfOp};
use fcdrn_core::tensor::{ops, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Forward a centered impulse through conv/pool ops with positive
/// random weights and return the support width of the output response.
fn impulse_support(ops_list: &[RfOp], input: usize, rng: &mut ChaCha20Rng) -> usize {
    let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, input, input));
    x.data_mut()[(input / 2) * input + input / 2] = 1.0;
    for op in ops_list {
        if op.stride == 2.0 && op.kernel == 2 {
            let (y, _) = ops::maxpool2d(None, &x).unwrap();
            x = y;
            continue;
        }
        assert_eq!(op.stride, 1.0, "impulse oracle covers stride-1 convs and 2x2 pools");
        let w = Tensor::from_vec(
            Shape::new(1, 1, op.kernel, op.kernel),
            (0..op.kernel * op.kernel).map(|_| rng.gen_range(0.1..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        x = ops::conv2d(None, &x, &w, &b, 1, op.dilation, ops::same_padding(op.kernel, op.dilation))
            .unwrap();
    }
    // support width along the center row
    let s = x.shape();
    let d = x.data();
    let row = (s.h / 2) * s.w;
    let cols: Vec<usize> = (0..s.w).filter(|&c| d[row + c].abs() > 1e-12).collect();
    cols.last().map(|l| l - cols.first().unwrap() + 1).unwrap_or(0)
}

#[test]
fn single_convs() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for (ops_list, expect) in [
        (vec![RfOp { kernel: 3, stride: 1.0, dilation: 1 }], 3.0),
        (vec![RfOp { kernel: 3, stride: 1.0, dilation: 2 }], 5.0),
        (vec![RfOp { kernel: 5, stride: 1.0, dilation: 1 }], 5.0),
        (vec![RfOp { kernel: 3, stride: 1.0, dilation: 4 }], 9.0),
    ] {
        let (rf, _) = rf_chain(&ops_list);
        assert_eq!(rf, expect);
        assert_eq!(impulse_support(&ops_list, 31, &mut rng), rf as usize);
    }
}

#[test]
fn conv_stacks_match_impulse_support() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    // multigrid stack (r, r, r): rf = 1 + 6r
    for r in [2usize, 4] {
        let ops_list = vec![RfOp { kernel: 3, stride: 1.0, dilation: r }; 3];
        let (rf, _) = rf_chain(&ops_list);
        assert_eq!(rf, 1.0 + 6.0 * r as f64);
        assert_eq!(impulse_support(&ops_list, 2 * rf as usize + 5, &mut rng), rf as usize);
    }
    // expanding stack (r, 2r, 4r)
    let r = 2;
    let ops_list: Vec<RfOp> =
        [r, 2 * r, 4 * r].iter().map(|&d| RfOp { kernel: 3, stride: 1.0, dilation: d }).collect();
    let (rf, _) = rf_chain(&ops_list);
    assert_eq!(rf, 1.0 + 2.0 * (r + 2 * r + 4 * r) as f64);
    assert_eq!(impulse_support(&ops_list, 2 * rf as usize + 5, &mut rng), rf as usize);
}

#[test]
fn pooled_prefix_matches_impulse_support() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    // conv3, pool, conv3, conv3: the IDB profile
    let ops_list = vec![
        RfOp { kernel: 3, stride: 1.0, dilation: 1 },
        RfOp { kernel: 2, stride: 2.0, dilation: 1 },
        RfOp { kernel: 3, stride: 1.0, dilation: 1 },
        RfOp { kernel: 3, stride: 1.0, dilation: 1 },
    ];
    let (rf, jump) = rf_chain(&ops_list);
    assert_eq!(jump, 2.0);
    assert_eq!(rf, 12.0);
    // max pooling of a positive response: support maps exactly
    let support = impulse_support(&ops_list, 63, &mut rng);
    assert_eq!(support, 6, "post-pool support of a 12-pixel input field");
}

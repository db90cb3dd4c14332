//! Composite network blocks: convolution/batch-norm layers, the
//! pre-activation residual basic block, residual stages, resolution
//! transformations, mixing blocks, and the framing IDB/FUB pair.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, DropoutKind};
use crate::tensor::{Scalar, Shape, Tensor, Tp};

/// Distinguishes trainable parameters from persistent state buffers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Trainable,
    State,
}

pub type ParamFn<'a, S> = &'a mut dyn FnMut(&str, ParamKind, &Tensor<S>);

/// Per-call forward context: tape for gradient recording, train/eval
/// switch, and the dropout RNG stream.
pub struct Fwd<'a, 'r, S: Scalar> {
    pub tape: Tp<'a, S>,
    pub train: bool,
    pub rng: &'r mut ChaCha20Rng,
}

impl<'a, 'r, S: Scalar> Fwd<'a, 'r, S> {
    pub fn new(tape: Tp<'a, S>, train: bool, rng: &'r mut ChaCha20Rng) -> Self {
        Fwd { tape, train, rng }
    }
}

/// 2-D convolution layer owning its weight `[out, in, K, K]` and bias.
#[derive(Clone)]
pub struct ConvLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvLayer<S> {
    /// HeUniform-initialized layer; kernels must be odd and stride and
    /// dilation may not both exceed one.
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Self::validate(k, stride, dilation)?;
        let fan_in = in_c * k * k;
        let bound = S::cast((6.0 / fan_in as f64).sqrt());
        let data: Vec<S> =
            (0..out_c * in_c * k * k).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = Tensor::param(Shape::new(out_c, in_c, k, k), data)?;
        let bias = Tensor::param(Shape::new(1, out_c, 1, 1), vec![S::zero(); out_c])?;
        Ok(ConvLayer { weight, bias, stride, dilation, padding })
    }

    /// Identity map: center tap one on the diagonal, all else zero.
    pub fn identity(c: usize, k: usize, dilation: usize) -> Result<Self> {
        Self::validate(k, 1, dilation)?;
        let mut data = vec![S::zero(); c * c * k * k];
        let center = (k / 2) * k + k / 2;
        for ch in 0..c {
            data[(ch * c + ch) * k * k + center] = S::one();
        }
        let weight = Tensor::param(Shape::new(c, c, k, k), data)?;
        let bias = Tensor::param(Shape::new(1, c, 1, 1), vec![S::zero(); c])?;
        Ok(ConvLayer { weight, bias, stride: 1, dilation, padding: ops::same_padding(k, dilation) })
    }

    fn validate(k: usize, stride: usize, dilation: usize) -> Result<()> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("even kernel size {k}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        if stride > 1 && dilation > 1 {
            return Err(Error::invalid("stride > 1 combined with dilation > 1"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::conv2d(tape, x, &self.weight, &self.bias, self.stride, self.dilation, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        f(&format!("{prefix}.weight"), ParamKind::Trainable, &self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Trainable, &self.bias);
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(c: usize, momentum: f64, eps: f64) -> Self {
        let vec_shape = Shape::new(1, c, 1, 1);
        let gamma = Tensor::full(vec_shape, S::one());
        gamma.set_requires_grad(true);
        let beta = Tensor::zeros(vec_shape);
        beta.set_requires_grad(true);
        BatchNorm {
            gamma,
            beta,
            running_mean: Tensor::zeros(vec_shape),
            running_var: Tensor::full(vec_shape, S::one()),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        ops::batchnorm(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            train,
        )
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        f(&format!("{prefix}.gamma"), ParamKind::Trainable, &self.gamma);
        f(&format!("{prefix}.beta"), ParamKind::Trainable, &self.beta);
        f(&format!("{prefix}.running_mean"), ParamKind::State, &self.running_mean);
        f(&format!("{prefix}.running_var"), ParamKind::State, &self.running_var);
    }
}

/// Pre-activation residual basic block: twice (BN, ReLU, dropout, 3x3
/// conv), summed with the (optionally 1x1-projected) identity path.
#[derive(Clone)]
pub struct ResidualBasicBlock<S: Scalar> {
    pub bn1: BatchNorm<S>,
    pub conv1: ConvLayer<S>,
    pub bn2: BatchNorm<S>,
    pub conv2: ConvLayer<S>,
    pub proj: Option<ConvLayer<S>>,
    pub dropout: f64,
    pub dropout_kind: DropoutKind,
}

impl<S: Scalar> ResidualBasicBlock<S> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        dropout: f64,
        dropout_kind: DropoutKind,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let proj = if in_c != out_c { Some(ConvLayer::new(in_c, out_c, 1, 1, 1, 0, rng)?) } else { None };
        Ok(ResidualBasicBlock {
            bn1: BatchNorm::new(in_c, bn_momentum, bn_eps),
            conv1: ConvLayer::new(in_c, out_c, 3, 1, 1, 1, rng)?,
            bn2: BatchNorm::new(out_c, bn_momentum, bn_eps),
            conv2: ConvLayer::new(out_c, out_c, 3, 1, 1, 1, rng)?,
            proj,
            dropout,
            dropout_kind,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.shape().c != self.in_channels() {
            return Err(Error::ChannelMismatch { expected: self.in_channels(), got: x.shape().c });
        }
        let mut h = self.bn1.forward(cx.tape, x, cx.train)?;
        h = ops::relu(cx.tape, &h);
        h = ops::dropout(cx.tape, &h, self.dropout, cx.train, self.dropout_kind, cx.rng)?;
        h = self.conv1.forward(cx.tape, &h)?;
        h = self.bn2.forward(cx.tape, &h, cx.train)?;
        h = ops::relu(cx.tape, &h);
        h = ops::dropout(cx.tape, &h, self.dropout, cx.train, self.dropout_kind, cx.rng)?;
        h = self.conv2.forward(cx.tape, &h)?;
        let identity = match &self.proj {
            Some(p) => p.forward(cx.tape, x)?,
            None => x.clone(),
        };
        ops::add(cx.tape, &h, &identity)
    }

    pub fn param_count(&self) -> usize {
        self.bn1.param_count()
            + self.conv1.param_count()
            + self.bn2.param_count()
            + self.conv2.param_count()
            + self.proj.as_ref().map_or(0, |p| p.param_count())
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(p) = &self.proj {
            p.visit(&format!("{prefix}.proj"), f);
        }
    }

    /// Zero the residual branch output: final conv weights and bias.
    /// The block then computes exactly the identity (no projection).
    pub fn zero_residual_branch(&self) {
        self.conv2.weight.data_mut().fill(S::zero());
        self.conv2.bias.data_mut().fill(S::zero());
    }
}

/// A residual network between two transformations. Only the first block
/// may change the channel count; the stage preserves resolution.
#[derive(Clone)]
pub struct ResNetStage<S: Scalar> {
    pub blocks: Vec<ResidualBasicBlock<S>>,
}

impl<S: Scalar> ResNetStage<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        num_blocks: usize,
        dropout: f64,
        dropout_kind: DropoutKind,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::invalid("stage needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(num_blocks);
        blocks.push(ResidualBasicBlock::new(in_c, out_c, dropout, dropout_kind, bn_momentum, bn_eps, rng)?);
        for _ in 1..num_blocks {
            blocks.push(ResidualBasicBlock::new(out_c, out_c, dropout, dropout_kind, bn_momentum, bn_eps, rng)?);
        }
        Ok(ResNetStage { blocks })
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks[0].out_channels()
    }

    pub fn forward(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_prefix(cx, x, self.blocks.len())
    }

    /// Forward through the first `count` blocks only (stage-dropping).
    pub fn forward_prefix(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>, count: usize) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for b in &self.blocks[..count] {
            h = b.forward(cx, &h)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
    }
}

/// Stack of 3x3 dilated convolutions sharing a base rate; resolution
/// preserving. Rates default to (r, r, r), with (r, 2r, 4r) selectable.
#[derive(Clone)]
pub struct MultigridBlock<S: Scalar> {
    pub convs: Vec<ConvLayer<S>>,
    pub rates: Vec<usize>,
}

impl<S: Scalar> MultigridBlock<S> {
    pub fn rates_for(base: usize, expanding: bool) -> Result<Vec<usize>> {
        if base == 0 || base % 2 != 0 {
            return Err(Error::invalid(format!("multigrid rate {base} must be positive and even")));
        }
        Ok(if expanding { vec![base, 2 * base, 4 * base] } else { vec![base; 3] })
    }

    pub fn new(in_c: usize, out_c: usize, rates: Vec<usize>, rng: &mut ChaCha20Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(rates.len());
        for (i, &r) in rates.iter().enumerate() {
            let (ic, oc) = if i == 0 { (in_c, out_c) } else { (out_c, out_c) };
            convs.push(ConvLayer::new(ic, oc, 3, 1, r, ops::same_padding(3, r), rng)?);
        }
        Ok(MultigridBlock { convs, rates })
    }

    /// All convolutions initialized to the identity; requires in = out.
    pub fn identity(c: usize, rates: Vec<usize>) -> Result<Self> {
        let convs =
            rates.iter().map(|&r| ConvLayer::identity(c, 3, r)).collect::<Result<Vec<_>>>()?;
        Ok(MultigridBlock { convs, rates })
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(tape, &h)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.convs.{i}"), f);
        }
    }
}

/// Resolution-level slot a transformation occupies: downsampling slots
/// 1..=4, upsampling slots 1..=4, or a same-resolution adapter.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Slot {
    Down(u8),
    Up(u8),
    Same,
}

/// One step of a transformation cascade on a skip edge.
#[derive(Clone)]
pub enum TransformStep<S: Scalar> {
    /// 2x2 max pooling (pooling-based downsampling path).
    MaxPool { slot: u8, to_level: usize },
    /// Convolution, optionally preceded by nearest upsampling to the
    /// recorded size of `to_level`.
    Conv { layer: ConvLayer<S>, upsample: bool, slot: Slot, to_level: usize },
    /// Stacked dilated convolutions (multi-grid composite).
    Multigrid { block: MultigridBlock<S>, slot: u8, to_level: usize },
}

impl<S: Scalar> TransformStep<S> {
    /// Apply the step. `target` is required by upsampling steps and
    /// carries the recorded spatial size of the destination level.
    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>, target: Option<(usize, usize)>) -> Result<Tensor<S>> {
        match self {
            TransformStep::MaxPool { .. } => Ok(ops::maxpool2d(tape, x)?.0),
            TransformStep::Conv { layer, upsample, .. } => {
                let h = if *upsample {
                    let (th, tw) = target.ok_or_else(|| {
                        Error::invalid("upsampling transform needs a target size")
                    })?;
                    ops::upsample_nearest(tape, x, th, tw)?
                } else {
                    x.clone()
                };
                layer.forward(tape, &h)
            }
            TransformStep::Multigrid { block, .. } => block.forward(tape, x),
        }
    }

    pub fn to_level(&self) -> usize {
        match self {
            TransformStep::MaxPool { to_level, .. } => *to_level,
            TransformStep::Conv { to_level, .. } => *to_level,
            TransformStep::Multigrid { to_level, .. } => *to_level,
        }
    }

    pub fn needs_target(&self) -> bool {
        matches!(self, TransformStep::Conv { upsample: true, .. })
    }

    pub fn slot(&self) -> Slot {
        match self {
            TransformStep::MaxPool { slot, .. } => Slot::Down(*slot),
            TransformStep::Conv { slot, .. } => *slot,
            TransformStep::Multigrid { slot, .. } => Slot::Down(*slot),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TransformStep::MaxPool { .. } => 0,
            TransformStep::Conv { layer, .. } => layer.param_count(),
            TransformStep::Multigrid { block, .. } => block.param_count(),
        }
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        match self {
            TransformStep::MaxPool { .. } => {}
            TransformStep::Conv { layer, .. } => layer.visit(&format!("{prefix}.conv"), f),
            TransformStep::Multigrid { block, .. } => block.visit(&format!("{prefix}.mg"), f),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TransformStep::MaxPool { slot, .. } => format!("maxpool2x2[d{slot}]"),
            TransformStep::Conv { layer, upsample, slot, .. } => {
                let k = layer.kernel();
                let tag = match slot {
                    Slot::Down(i) => format!("d{i}"),
                    Slot::Up(i) => format!("u{i}"),
                    Slot::Same => "same".to_string(),
                };
                let up = if *upsample { "up+" } else { "" };
                format!(
                    "{up}conv{k}x{k}[{tag}] {}->{} s{} d{}",
                    layer.in_channels(),
                    layer.out_channels(),
                    layer.stride,
                    layer.dilation
                )
            }
            TransformStep::Multigrid { block, slot, .. } => {
                format!("multigrid[d{slot}] rates {:?}", block.rates)
            }
        }
    }
}

/// Initial downsampling block: 3x3 conv, 2x2 max pool, two 3x3 convs.
#[derive(Clone)]
pub struct Idb<S: Scalar> {
    pub conv1: ConvLayer<S>,
    pub conv2: ConvLayer<S>,
    pub conv3: ConvLayer<S>,
}

impl<S: Scalar> Idb<S> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(Idb {
            conv1: ConvLayer::new(in_c, out_c, 3, 1, 1, 1, rng)?,
            conv2: ConvLayer::new(out_c, out_c, 3, 1, 1, 1, rng)?,
            conv3: ConvLayer::new(out_c, out_c, 3, 1, 1, 1, rng)?,
        })
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.conv1.forward(tape, x)?;
        let (h, _) = ops::maxpool2d(tape, &h)?;
        let h = self.conv2.forward(tape, &h)?;
        self.conv3.forward(tape, &h)
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.conv3.param_count()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
    }
}

/// Final upsampling block: 2x repeat upsampling then a 3x3 conv. The 1x1
/// classifier that follows is owned by the model graph.
#[derive(Clone)]
pub struct Fub<S: Scalar> {
    pub conv: ConvLayer<S>,
}

impl<S: Scalar> Fub<S> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(Fub { conv: ConvLayer::new(in_c, out_c, 3, 1, 1, 1, rng)? })
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>, target: (usize, usize)) -> Result<Tensor<S>> {
        let h = ops::upsample_nearest(tape, x, target.0, target.1)?;
        self.conv.forward(tape, &h)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

/// 1x1 convolution fusing a channel concatenation down to the plan width.
#[derive(Clone)]
pub struct MixingBlock<S: Scalar> {
    pub conv: ConvLayer<S>,
}

impl<S: Scalar> MixingBlock<S> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(MixingBlock { conv: ConvLayer::new(in_c, out_c, 1, 1, 1, 0, rng)? })
    }

    pub fn forward(&self, tape: Tp<'_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.conv.forward(tape, x)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn visit(&self, prefix: &str, f: ParamFn<'_, S>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0)
    }

    fn eval_fwd<'r, S: Scalar>(r: &'r mut ChaCha20Rng) -> Fwd<'static, 'r, S> {
        Fwd { tape: None, train: false, rng: r }
    }

    #[test]
    fn zero_residual_branch_is_exact_identity() {
        let mut r = rng();
        let block =
            ResidualBasicBlock::<f32>::new(6, 6, 0.2, DropoutKind::Element, 0.1, 1e-5, &mut r).unwrap();
        block.zero_residual_branch();
        let x = Tensor::from_vec(
            Shape::new(2, 6, 5, 5),
            (0..300).map(|v| (v as f32) * 0.31 - 40.0).collect(),
        )
        .unwrap();
        let mut r2 = rng();
        let y = block.forward(&mut eval_fwd(&mut r2), &x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn channel_changing_block_keeps_spatial_dims() {
        let mut r = rng();
        let block =
            ResidualBasicBlock::<f32>::new(8, 16, 0.2, DropoutKind::Element, 0.1, 1e-5, &mut r).unwrap();
        let x = Tensor::zeros(Shape::new(1, 8, 9, 7));
        let mut r2 = rng();
        let y = block.forward(&mut eval_fwd(&mut r2), &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 9, 7));
        // mismatched input errors
        let bad = Tensor::zeros(Shape::new(1, 4, 9, 7));
        let mut r3 = rng();
        assert!(block.forward(&mut eval_fwd(&mut r3), &bad).is_err());
    }

    #[test]
    fn stage_equals_composition_of_blocks() {
        let mut r = rng();
        let stage = ResNetStage::<f32>::new(4, 4, 3, 0.0, DropoutKind::Element, 0.1, 1e-5, &mut r).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 4, 6, 6), (0..144).map(|v| v as f32 * 0.01).collect())
            .unwrap();
        let mut r2 = rng();
        let whole = stage.forward(&mut eval_fwd(&mut r2), &x).unwrap();
        let mut h = x;
        for b in &stage.blocks {
            let mut r3 = rng();
            h = b.forward(&mut eval_fwd(&mut r3), &h).unwrap();
        }
        assert_eq!(whole.to_vec(), h.to_vec());
    }

    #[test]
    fn multigrid_identity_and_shape() {
        let mg = MultigridBlock::<f32>::identity(3, vec![2, 2, 2]).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 3, 9, 9), (0..243).map(|v| v as f32 * 0.1).collect())
            .unwrap();
        let y = mg.forward(None, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(MultigridBlock::<f32>::rates_for(3, false).is_err());
        assert!(MultigridBlock::<f32>::rates_for(0, false).is_err());
        assert_eq!(MultigridBlock::<f32>::rates_for(4, true).unwrap(), vec![4, 8, 16]);
    }

    #[test]
    fn transform_shapes() {
        let mut r = rng();
        // pooling halves
        let pool = TransformStep::<f32>::MaxPool { slot: 1, to_level: 2 };
        let x = Tensor::zeros(Shape::new(1, 3, 180, 240));
        assert_eq!(pool.forward(None, &x, None).unwrap().shape().spatial(), (90, 120));

        // strided conv on 81x81 -> 41x41
        let sc = TransformStep::Conv {
            layer: ConvLayer::<f32>::new(3, 3, 3, 2, 1, 1, &mut r).unwrap(),
            upsample: false,
            slot: Slot::Down(1),
            to_level: 2,
        };
        let x = Tensor::zeros(Shape::new(1, 3, 81, 81));
        assert_eq!(sc.forward(None, &x, None).unwrap().shape().spatial(), (41, 41));

        // upsampling restores a non-power-of-two recorded size
        let up = TransformStep::Conv {
            layer: ConvLayer::<f32>::new(3, 3, 3, 1, 1, 1, &mut r).unwrap(),
            upsample: true,
            slot: Slot::Up(1),
            to_level: 1,
        };
        let x = Tensor::zeros(Shape::new(1, 3, 22, 30));
        assert_eq!(up.forward(None, &x, Some((45, 60))).unwrap().shape().spatial(), (45, 60));
        assert!(up.forward(None, &x, None).is_err());
    }

    #[test]
    fn idb_halves_and_fub_restores() {
        let mut r = rng();
        let idb = Idb::<f32>::new(3, 12, &mut r).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 64));
        let y = idb.forward(None, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 12, 32, 32));

        let fub = Fub::<f32>::new(12, 12, &mut r).unwrap();
        let z = fub.forward(None, &y, (64, 64)).unwrap();
        assert_eq!(z.shape().spatial(), (64, 64));
    }
}

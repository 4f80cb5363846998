//! Network representation, architecture validation, and exact forward semantics.
//!
//! The supported architecture is a fixed pattern: one leading convolution,
//! then ReLU/maxpool/convolution groups, a final ReLU/maxpool/flatten, and a
//! fully connected tail with ReLU between consecutive linear layers. Every
//! maxpool is immediately preceded by a ReLU so all maxpool inputs are
//! non-negative, which the sequential max decomposition relies on.

use crate::error::{CapmError, Result};
use crate::tensor::FeatureMap;
use serde::{Deserialize, Serialize};

/// Convolution layer: `out_channels` kernels of shape in_channels x kernel x kernel.
///
/// Weights are stored flat row-major as [out][in][row][col].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    #[inline]
    pub fn weight(&self, o: usize, i: usize, kr: usize, kc: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel + kr) * self.kernel + kc]
    }

    /// Output side for a square input of side `n`, or an error when
    /// `(n + 2p - k) / s` is not a non-negative integer.
    pub fn output_side(&self, n: usize) -> Result<usize> {
        let span = n as i64 + 2 * self.padding as i64 - self.kernel as i64;
        if span < 0 || span % self.stride as i64 != 0 {
            return Err(CapmError::ShapeMismatch(format!(
                "conv output side ({n} + 2*{p} - {k})/{s} + 1 is not a positive integer",
                p = self.padding,
                k = self.kernel,
                s = self.stride
            )));
        }
        Ok((span / self.stride as i64) as usize + 1)
    }
}

/// Maxpool layer with square kernel; windows must tile the input exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxpoolLayer {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxpoolLayer {
    pub fn output_side(&self, q: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(CapmError::ShapeMismatch(
                "maxpool kernel and stride must be >= 1".into(),
            ));
        }
        if q < self.kernel || (q - self.kernel) % self.stride != 0 {
            return Err(CapmError::ShapeMismatch(format!(
                "maxpool windows (kernel {k}, stride {s}) do not tile side {q} exactly",
                k = self.kernel,
                s = self.stride
            )));
        }
        Ok((q - self.kernel) / self.stride + 1)
    }

    /// Number of window slots, k^M * k^M.
    #[inline]
    pub fn slots(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Fully connected layer y = W v + b with W stored flat row-major (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    #[inline]
    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.weights[o * self.in_dim + i]
    }
}

/// Per-channel input normalization applied to raw pixels in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationConfig {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(CapmError::ShapeMismatch(format!(
                "normalization has {}/{} channel entries, network expects {}",
                self.mean.len(),
                self.std.len(),
                channels
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(CapmError::NegativeInput(
                "normalization std must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// An unvalidated layer record, the input to [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum RawLayer {
    Conv(ConvLayer),
    Relu,
    Maxpool(MaxpoolLayer),
    Flatten,
    Fc(FcLayer),
}

/// One convolution stage: the conv and the maxpool applied to its output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: ConvLayer,
    pub pool: MaxpoolLayer,
    /// Side of the map entering the conv.
    pub in_side: usize,
    /// Side of the conv output (pre-ReLU / pre-maxpool map).
    pub conv_side: usize,
    /// Side of the pooled map.
    pub pool_side: usize,
}

impl ConvStage {
    /// Neurons in the conv output map.
    #[inline]
    pub fn conv_len(&self) -> usize {
        self.conv.out_channels * self.conv_side * self.conv_side
    }

    /// Pixels in the pooled map (= maxpool windows).
    #[inline]
    pub fn pool_len(&self) -> usize {
        self.conv.out_channels * self.pool_side * self.pool_side
    }
}

/// A validated network following the supported pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_side: usize,
    pub stages: Vec<ConvStage>,
    pub fc_layers: Vec<FcLayer>,
}

impl NetworkSpec {
    /// Number of conv blocks k (stages + 1 in the block-counting convention).
    pub fn conv_block_count(&self) -> usize {
        self.stages.len() + 1
    }

    /// Number of fully connected layers t.
    pub fn fc_count(&self) -> usize {
        self.fc_layers.len()
    }

    pub fn class_count(&self) -> usize {
        self.fc_layers.last().map(|f| f.out_dim).unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_side * self.input_side
    }

    /// Length of the flattened vector feeding the first FC layer.
    pub fn flat_dim(&self) -> usize {
        self.stages.last().map(|s| s.pool_len()).unwrap_or(0)
    }

    /// Reconstruct the raw layer list this spec was validated from.
    pub fn to_raw_layers(&self) -> Vec<RawLayer> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                out.push(RawLayer::Relu);
                out.push(RawLayer::Maxpool(self.stages[i - 1].pool));
            }
            out.push(RawLayer::Conv(stage.conv.clone()));
        }
        out.push(RawLayer::Relu);
        out.push(RawLayer::Maxpool(self.stages.last().unwrap().pool));
        out.push(RawLayer::Flatten);
        for (i, fc) in self.fc_layers.iter().enumerate() {
            if i > 0 {
                out.push(RawLayer::Relu);
            }
            out.push(RawLayer::Fc(fc.clone()));
        }
        out
    }
}

/// Validate a raw layer list against the supported pattern and derive all
/// intermediate shapes.
pub fn validate_network(
    input_channels: usize,
    input_side: usize,
    layers: Vec<RawLayer>,
) -> Result<NetworkSpec> {
    if layers.is_empty() {
        return Err(CapmError::PatternViolation {
            index: 0,
            detail: "layer list is empty".into(),
        });
    }
    if input_channels == 0 || input_side == 0 {
        return Err(CapmError::ShapeMismatch("input shape must be nonzero".into()));
    }

    #[derive(PartialEq)]
    enum State {
        WantFirstConv,
        WantRelu,
        WantMaxpool,
        WantConvOrFlatten,
        WantFc,
        WantReluOrEnd,
        WantFcAfterRelu,
    }

    let mut state = State::WantFirstConv;
    let mut channels = input_channels;
    let mut side = input_side;
    // Conv layers paired with the pool that follows them, filled as we walk.
    let mut pending_conv: Option<(ConvLayer, usize, usize)> = None; // (conv, in_side, conv_side)
    let mut stages: Vec<ConvStage> = Vec::new();
    let mut fc_layers: Vec<FcLayer> = Vec::new();
    let mut flat_dim = 0usize;

    for (index, layer) in layers.into_iter().enumerate() {
        match (&state, layer) {
            (State::WantFirstConv, RawLayer::Conv(conv)) => {
                check_conv(&conv, index, channels)?;
                let conv_side = conv.output_side(side).map_err(|e| at_layer(e, index))?;
                let in_side = side;
                channels = conv.out_channels;
                side = conv_side;
                pending_conv = Some((conv, in_side, conv_side));
                state = State::WantRelu;
            }
            (State::WantFirstConv, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "network must start with a convolution".into(),
                });
            }
            (State::WantRelu, RawLayer::Relu) => {
                state = State::WantMaxpool;
            }
            (State::WantRelu, RawLayer::Maxpool(_)) => {
                return Err(CapmError::MaxpoolWithoutRelu { index });
            }
            (State::WantRelu, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "expected ReLU after convolution".into(),
                });
            }
            (State::WantMaxpool, RawLayer::Maxpool(pool)) => {
                let pool_side = pool.output_side(side).map_err(|e| at_layer(e, index))?;
                let (conv, in_side, conv_side) = pending_conv.take().expect("conv precedes pool");
                stages.push(ConvStage {
                    conv,
                    pool,
                    in_side,
                    conv_side,
                    pool_side,
                });
                side = pool_side;
                state = State::WantConvOrFlatten;
            }
            (State::WantMaxpool, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "expected maxpool after ReLU in the convolution part".into(),
                });
            }
            (State::WantConvOrFlatten, RawLayer::Conv(conv)) => {
                check_conv(&conv, index, channels)?;
                let conv_side = conv.output_side(side).map_err(|e| at_layer(e, index))?;
                let in_side = side;
                channels = conv.out_channels;
                side = conv_side;
                pending_conv = Some((conv, in_side, conv_side));
                state = State::WantRelu;
            }
            (State::WantConvOrFlatten, RawLayer::Flatten) => {
                flat_dim = channels * side * side;
                state = State::WantFc;
            }
            (State::WantConvOrFlatten, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "expected convolution or flatten after maxpool".into(),
                });
            }
            (State::WantFc, RawLayer::Fc(fc)) | (State::WantFcAfterRelu, RawLayer::Fc(fc)) => {
                let expect_in = if fc_layers.is_empty() {
                    flat_dim
                } else {
                    fc_layers.last().unwrap().out_dim
                };
                check_fc(&fc, index, expect_in)?;
                fc_layers.push(fc);
                state = State::WantReluOrEnd;
            }
            (State::WantFc, _) | (State::WantFcAfterRelu, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "expected fully connected layer".into(),
                });
            }
            (State::WantReluOrEnd, RawLayer::Relu) => {
                state = State::WantFcAfterRelu;
            }
            (State::WantReluOrEnd, RawLayer::Maxpool(_)) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "maxpool is not allowed in the fully connected part".into(),
                });
            }
            (State::WantReluOrEnd, _) => {
                return Err(CapmError::PatternViolation {
                    index,
                    detail: "expected ReLU or end of network after a linear layer".into(),
                });
            }
        }
    }

    if state != State::WantReluOrEnd {
        return Err(CapmError::PatternViolation {
            index: usize::MAX,
            detail: "network ended before the fully connected output layer".into(),
        });
    }

    Ok(NetworkSpec {
        input_channels,
        input_side,
        stages,
        fc_layers,
    })
}

fn at_layer(e: CapmError, index: usize) -> CapmError {
    match e {
        CapmError::ShapeMismatch(msg) => CapmError::ShapeMismatch(format!("layer {index}: {msg}")),
        other => other,
    }
}

fn check_conv(conv: &ConvLayer, index: usize, in_channels: usize) -> Result<()> {
    if conv.in_channels != in_channels {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: conv expects {} input channels, map has {}",
            conv.in_channels, in_channels
        )));
    }
    if conv.stride == 0 || conv.kernel == 0 {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: conv kernel and stride must be >= 1"
        )));
    }
    let expect = conv.out_channels * conv.in_channels * conv.kernel * conv.kernel;
    if conv.weights.len() != expect {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: conv weight array has {} values, expected {expect}",
            conv.weights.len()
        )));
    }
    if conv.bias.len() != conv.out_channels {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: conv bias has {} values, expected {}",
            conv.bias.len(),
            conv.out_channels
        )));
    }
    Ok(())
}

fn check_fc(fc: &FcLayer, index: usize, expect_in: usize) -> Result<()> {
    if fc.in_dim != expect_in {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: fc expects input {} but previous layer provides {expect_in}",
            fc.in_dim
        )));
    }
    if fc.weights.len() != fc.out_dim * fc.in_dim {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: fc weight array has {} values, expected {}",
            fc.weights.len(),
            fc.out_dim * fc.in_dim
        )));
    }
    if fc.bias.len() != fc.out_dim {
        return Err(CapmError::ShapeMismatch(format!(
            "layer {index}: fc bias has {} values, expected {}",
            fc.bias.len(),
            fc.out_dim
        )));
    }
    Ok(())
}

/// Convolution forward pass.
///
/// Output pixel (c, m', n') is the bias plus the kernel/input products with
/// kernel index (m + p - s m', n + p - s n'); indices falling outside the
/// kernel or onto padding contribute zero.
pub fn conv_forward(map: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    if map.channels != layer.in_channels {
        return Err(CapmError::ShapeMismatch(format!(
            "conv expects {} channels, map has {}",
            layer.in_channels, map.channels
        )));
    }
    let out_side = layer.output_side(map.side)?;
    let mut out = FeatureMap::zeros(layer.out_channels, out_side);
    let (k, s, p) = (layer.kernel, layer.stride as i64, layer.padding as i64);
    for c in 0..layer.out_channels {
        for mp in 0..out_side {
            for np in 0..out_side {
                let mut acc = layer.bias[c];
                for i in 0..layer.in_channels {
                    for kr in 0..k {
                        let m = s * mp as i64 - p + kr as i64;
                        if m < 0 || m >= map.side as i64 {
                            continue;
                        }
                        for kc in 0..k {
                            let n = s * np as i64 - p + kc as i64;
                            if n < 0 || n >= map.side as i64 {
                                continue;
                            }
                            acc += layer.weight(c, i, kr, kc) * map.get(i, m as usize, n as usize);
                        }
                    }
                }
                out.set(c, mp, np, acc);
            }
        }
    }
    Ok(out)
}

/// Element-wise ReLU. Non-positive values map to exactly +0.0.
pub fn relu_forward(map: &FeatureMap) -> FeatureMap {
    let data = map.data.iter().map(|&v| relu(v)).collect();
    FeatureMap {
        channels: map.channels,
        side: map.side,
        data,
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Sequential max decomposition of one maxpool window.
///
/// Returns y with y[0] = 0 and y[a+1] = max(x[a], y[a]); the last entry is the
/// window maximum provided all inputs are non-negative.
pub fn decompose_maxpool(window: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = window.iter().find(|&&v| v < 0.0) {
        return Err(CapmError::NegativeInput(format!(
            "maxpool decomposition requires non-negative inputs, got {bad}"
        )));
    }
    let mut y = Vec::with_capacity(window.len() + 1);
    y.push(0.0);
    for (a, &x) in window.iter().enumerate() {
        y.push(x.max(y[a]));
    }
    Ok(y)
}

/// Collect the window at pooled pixel (m, n) in slot order a = i*k + j.
pub fn maxpool_window(map: &FeatureMap, pool: &MaxpoolLayer, c: usize, m: usize, n: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(pool.slots());
    for i in 0..pool.kernel {
        for j in 0..pool.kernel {
            w.push(map.get(c, pool.stride * m + i, pool.stride * n + j));
        }
    }
    w
}

/// Maxpool forward pass; equals the sequential decomposition per window.
pub fn maxpool_forward(map: &FeatureMap, pool: &MaxpoolLayer) -> Result<FeatureMap> {
    let out_side = pool.output_side(map.side)?;
    let mut out = FeatureMap::zeros(map.channels, out_side);
    for c in 0..map.channels {
        for m in 0..out_side {
            for n in 0..out_side {
                let mut y = 0.0f64;
                for i in 0..pool.kernel {
                    for j in 0..pool.kernel {
                        y = map.get(c, pool.stride * m + i, pool.stride * n + j).max(y);
                    }
                }
                out.set(c, m, n, y);
            }
        }
    }
    Ok(out)
}

/// Fully connected forward pass, W v + b.
pub fn fc_forward(v: &[f64], layer: &FcLayer) -> Result<Vec<f64>> {
    if v.len() != layer.in_dim {
        return Err(CapmError::ShapeMismatch(format!(
            "fc expects input {}, got {}",
            layer.in_dim,
            v.len()
        )));
    }
    let mut out = layer.bias.clone();
    for o in 0..layer.out_dim {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        out[o] += row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>();
    }
    Ok(out)
}

/// Activations recorded while evaluating one conv stage.
#[derive(Debug, Clone)]
pub struct StageTrace {
    /// Conv output, pre-ReLU.
    pub preact: FeatureMap,
    /// Post-ReLU map.
    pub post_relu: FeatureMap,
    /// Running maxima per window, slot-major: [(pixel, a)] with a in 0..=slots.
    pub running: Vec<f64>,
    /// Window-slot differences z^R - running, [(pixel, a)] with a in 0..slots.
    pub diffs: Vec<f64>,
    /// Pooled map.
    pub pooled: FeatureMap,
}

/// All intermediate activations of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    /// Pre-activations of each FC layer output; the last entry is the logits.
    pub fc_preacts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.fc_preacts.last().expect("at least one fc layer")
    }
}

/// Forward pass recording every intermediate activation.
pub fn forward_trace(net: &NetworkSpec, x: &FeatureMap) -> Result<ForwardTrace> {
    if x.channels != net.input_channels || x.side != net.input_side {
        return Err(CapmError::ShapeMismatch(format!(
            "input {}x{}x{} does not match network input {}x{}x{}",
            x.channels, x.side, x.side, net.input_channels, net.input_side, net.input_side
        )));
    }
    let mut current = x.clone();
    let mut stages = Vec::with_capacity(net.stages.len());
    for stage in &net.stages {
        let preact = conv_forward(&current, &stage.conv)?;
        let post_relu = relu_forward(&preact);
        let pool = &stage.pool;
        let slots = pool.slots();
        let windows = stage.pool_len();
        let mut running = vec![0.0; windows * (slots + 1)];
        let mut diffs = vec![0.0; windows * slots];
        let mut pooled = FeatureMap::zeros(stage.conv.out_channels, stage.pool_side);
        let mut w_idx = 0;
        for c in 0..stage.conv.out_channels {
            for m in 0..stage.pool_side {
                for n in 0..stage.pool_side {
                    let window = maxpool_window(&post_relu, pool, c, m, n);
                    let y = decompose_maxpool(&window)?;
                    for a in 0..slots {
                        diffs[w_idx * slots + a] = window[a] - y[a];
                    }
                    running[w_idx * (slots + 1)..(w_idx + 1) * (slots + 1)].copy_from_slice(&y);
                    pooled.set(c, m, n, y[slots]);
                    w_idx += 1;
                }
            }
        }
        stages.push(StageTrace {
            preact,
            post_relu,
            running,
            diffs,
            pooled,
        });
        current = stages.last().unwrap().pooled.clone();
    }

    let mut v = current.flatten();
    let mut fc_preacts = Vec::with_capacity(net.fc_layers.len());
    for (i, fc) in net.fc_layers.iter().enumerate() {
        if i > 0 {
            v = v.iter().map(|&z| relu(z)).collect();
        }
        v = fc_forward(&v, fc)?;
        fc_preacts.push(v.clone());
    }
    Ok(ForwardTrace { stages, fc_preacts })
}

/// Forward pass returning only the logits.
pub fn network_forward(net: &NetworkSpec, x: &FeatureMap) -> Result<Vec<f64>> {
    Ok(forward_trace(net, x)?.fc_preacts.last().cloned().unwrap())
}

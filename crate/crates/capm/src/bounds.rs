//! Element-wise bounds and neuron clusters for every relaxed nonlinearity.
//!
//! Pre-activation bounds come from smaller dual networks seeded with
//! coordinate selectors. The engine propagates all selectors of a layer at
//! once (an identity seed matrix) and extends the cached dual matrices
//! incrementally from one layer to the next instead of restarting each
//! smaller dual network from scratch. The bounds of the decomposed maxpool
//! ReLUs come from the cheap running-max formulas, never from per-slot dual
//! networks.
//!
//! With the default slope choice alpha = u/(u-l) the backward rules are
//! linear in the seed, which is what makes the incremental matrix
//! composition exact.

use crate::dual::{
    dual_conv_backward, dual_fc_backward, dual_maxpool_backward, dual_relu_backward, pos,
};
use crate::error::{CapmError, Result};
use crate::net::{ConvLayer, NetworkSpec};
use crate::tensor::FeatureMap;
use ndarray::{Array1, Array2, ArrayView2};

/// Span below which a crossing interval is widened before relaxation.
pub const DEGENERATE_SPAN: f64 = 1e-12;

/// Sign cluster of a neuron's pre-activation interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronCluster {
    /// u <= 0: the ReLU is the zero function.
    Neg,
    /// l > 0: the ReLU is the identity.
    Pos,
    /// l <= 0 < u: the ReLU needs a convex relaxation.
    Cross,
}

impl NeuronCluster {
    pub fn label(self) -> &'static str {
        match self {
            NeuronCluster::Neg => "neg",
            NeuronCluster::Pos => "pos",
            NeuronCluster::Cross => "cross",
        }
    }
}

/// Classify an interval. Zero-width intervals at or below zero are NEG, so
/// the output is pinned to 0 without dividing by the empty span.
pub fn classify_neuron(l: f64, u: f64) -> Result<NeuronCluster> {
    if l > u {
        return Err(CapmError::InvertedBounds { lower: l, upper: u });
    }
    if u <= 0.0 {
        Ok(NeuronCluster::Neg)
    } else if l > 0.0 {
        Ok(NeuronCluster::Pos)
    } else {
        Ok(NeuronCluster::Cross)
    }
}

/// Upper line of the ReLU relaxation for a crossing interval: passes through
/// (l, 0) and (u, u). Returns (slope, intercept).
pub fn relu_envelope(l: f64, u: f64) -> Result<(f64, f64)> {
    if l > u {
        return Err(CapmError::InvertedBounds { lower: l, upper: u });
    }
    if u - l < DEGENERATE_SPAN {
        return Err(CapmError::DegenerateInterval { span: u - l });
    }
    Ok((u / (u - l), -u * l / (u - l)))
}

/// Bounds after a ReLU: (max(l, 0), max(u, 0)).
pub fn post_relu_bounds(l: f64, u: f64) -> (f64, f64) {
    (l.max(0.0), u.max(0.0))
}

/// Running maxima bounds for one maxpool window.
///
/// Element a+1 of each output bounds the sequential maximum of window slots
/// 0..=a; element 0 corresponds to the zero seed of the decomposition.
pub fn maxpool_running_bounds(
    lower_relu: &[f64],
    upper_relu: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(&bad) = lower_relu
        .iter()
        .chain(upper_relu.iter())
        .find(|&&v| v < 0.0)
    {
        return Err(CapmError::NegativeInput(format!(
            "maxpool running bounds require non-negative post-ReLU bounds, got {bad}"
        )));
    }
    let k = lower_relu.len();
    let mut lm: Vec<f64> = Vec::with_capacity(k + 1);
    let mut um: Vec<f64> = Vec::with_capacity(k + 1);
    lm.push(0.0);
    um.push(0.0);
    for a in 0..k {
        lm.push(lm[a].max(lower_relu[a]));
        um.push(um[a].max(upper_relu[a]));
    }
    Ok((lm, um))
}

/// Difference bounds for the decomposed maxpool slots:
/// lbar_a = l^R_a - u^M_a, ubar_a = u^R_a - l^M_a.
pub fn maxpool_diff_bounds(
    lower_relu: &[f64],
    upper_relu: &[f64],
    running_lower: &[f64],
    running_upper: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = lower_relu.len();
    let mut lbar = Vec::with_capacity(k);
    let mut ubar = Vec::with_capacity(k);
    for a in 0..k {
        lbar.push(lower_relu[a] - running_upper[a]);
        ubar.push(upper_relu[a] - running_lower[a]);
    }
    (lbar, ubar)
}

/// Paired lower/upper bounds over one layer's neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LayerBounds {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// Bounds attached to one maxpool layer, flat over (pooled pixel, slot).
#[derive(Debug, Clone, PartialEq)]
pub struct MaxpoolBounds {
    pub slots: usize,
    /// Running maxima, (slots + 1) entries per pooled pixel.
    pub running_lower: Vec<f64>,
    pub running_upper: Vec<f64>,
    /// Slot differences, `slots` entries per pooled pixel.
    pub diff_lower: Vec<f64>,
    pub diff_upper: Vec<f64>,
    /// Cluster of each slot difference.
    pub clusters: Vec<NeuronCluster>,
}

/// All cached bounds of one (input, epsilon) pair.
#[derive(Debug, Clone)]
pub struct BoundsCache {
    /// Conv pre-activation bounds per stage.
    pub conv_preact: Vec<LayerBounds>,
    pub conv_clusters: Vec<Vec<NeuronCluster>>,
    /// Post-ReLU bounds per stage.
    pub post_relu: Vec<LayerBounds>,
    /// Maxpool running/diff bounds per stage.
    pub maxpool: Vec<MaxpoolBounds>,
    /// FC pre-activation bounds for every inner FC layer (those followed by
    /// a ReLU).
    pub fc_preact: Vec<LayerBounds>,
    pub fc_clusters: Vec<Vec<NeuronCluster>>,
}

/// A linear-layer output position where pre-activation bounds are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutPoint {
    /// Output of the conv of stage i.
    Conv(usize),
    /// Output of FC layer f (0-based).
    Fc(usize),
}

/// Widen a degenerate crossing interval so the relaxation slope stays finite.
fn guard_degenerate(l: f64, u: f64) -> (f64, f64) {
    if l <= 0.0 && u > 0.0 && u - l < DEGENERATE_SPAN {
        (l, u + DEGENERATE_SPAN)
    } else {
        (l, u)
    }
}

fn classify_all(lower: &[f64], upper: &[f64]) -> Result<Vec<NeuronCluster>> {
    lower
        .iter()
        .zip(upper)
        .map(|(&l, &u)| classify_neuron(l, u))
        .collect()
}

/// Slopes alpha = u/(u-l) on crossing neurons, 0 elsewhere.
fn default_alpha(lower: &[f64], upper: &[f64], clusters: &[NeuronCluster]) -> Vec<f64> {
    clusters
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(&c, (&l, &u))| {
            if c == NeuronCluster::Cross {
                u / (u - l)
            } else {
                0.0
            }
        })
        .collect()
}

/// One relaxation point's contribution to the bound formulas: the lower
/// bounds of its crossing neurons and their dual rows per seed column.
struct Correction {
    lb: Vec<f64>,
    rows: Array2<f64>,
}

fn cross_rows(
    matrix: &Array2<f64>,
    lower: &[f64],
    clusters: &[NeuronCluster],
) -> Option<Correction> {
    let idx: Vec<usize> = clusters
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == NeuronCluster::Cross)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return None;
    }
    let mut rows = Array2::zeros((idx.len(), matrix.ncols()));
    let mut lb = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        rows.row_mut(r).assign(&matrix.row(i));
        lb.push(lower[i]);
    }
    Some(Correction { lb, rows })
}

fn expand_conv_bias(conv: &ConvLayer, out_side: usize) -> Array1<f64> {
    let mut b = Array1::zeros(conv.out_channels * out_side * out_side);
    for c in 0..conv.out_channels {
        for i in 0..out_side * out_side {
            b[c * out_side * out_side + i] = conv.bias[c];
        }
    }
    b
}

/// The dual matrices of one growing smaller-dual-network, expressed in the
/// coordinates of the current cut.
struct IncrementalState {
    /// Dual variable on the input layer per unit seed, n_in x n_cut.
    a: Array2<f64>,
    /// Accumulated bias contribution per unit seed.
    bias: Array1<f64>,
    corrections: Vec<Correction>,
}

impl IncrementalState {
    fn first_conv(net: &NetworkSpec) -> Result<Self> {
        let stage = &net.stages[0];
        let eye = Array2::eye(stage.conv_len());
        let a = dual_conv_backward(&eye, &stage.conv, stage.in_side)?;
        Ok(Self {
            a,
            bias: expand_conv_bias(&stage.conv, stage.conv_side),
            corrections: Vec::new(),
        })
    }

    /// Evaluate the bound formulas at the current cut.
    fn eval(&self, x: &[f64], eps: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.a.ncols();
        let mut center = self.bias.to_vec();
        let mut rad = vec![0.0; n];
        for (i, row) in self.a.rows().into_iter().enumerate() {
            let (xi, ei) = (x[i], eps[i]);
            for (j, &v) in row.iter().enumerate() {
                center[j] += xi * v;
                rad[j] += ei * v.abs();
            }
        }
        let mut lo_corr = vec![0.0; n];
        let mut up_corr = vec![0.0; n];
        for c in &self.corrections {
            for (r, row) in c.rows.rows().into_iter().enumerate() {
                let lb = c.lb[r];
                for (j, &v) in row.iter().enumerate() {
                    lo_corr[j] += lb * pos(-v);
                    up_corr[j] += lb * pos(v);
                }
            }
        }
        let lower: Vec<f64> = (0..n).map(|j| center[j] - rad[j] + lo_corr[j]).collect();
        let upper: Vec<f64> = (0..n).map(|j| center[j] + rad[j] - up_corr[j]).collect();
        (lower, upper)
    }

    /// Re-express everything in the coordinates of the next cut.
    fn extend(
        &mut self,
        transfer: &Array2<f64>,
        new_bias: Array1<f64>,
        new_corrections: Vec<Correction>,
    ) {
        self.a = self.a.dot(transfer);
        for c in &mut self.corrections {
            c.rows = c.rows.dot(transfer);
        }
        self.bias = transfer.t().dot(&self.bias) + &new_bias;
        self.corrections.extend(new_corrections);
    }
}

/// Backward map through stage `i`'s maxpool and ReLU, harvesting the new
/// relaxation-point rows. `beta` holds dual rows on stage i's pooled map.
fn pool_relu_segment(
    net: &NetworkSpec,
    cache: &BoundsCache,
    i: usize,
    beta: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<Correction>)> {
    let stage = &net.stages[i];
    let mp = &cache.maxpool[i];
    let alpha_mp = default_alpha(&mp.diff_lower, &mp.diff_upper, &mp.clusters);
    let mut sink = Array1::zeros(beta.ncols());
    let (kappa, khat) = dual_maxpool_backward(
        beta,
        &stage.pool,
        stage.conv.out_channels,
        stage.pool_side,
        stage.conv_side,
        mp,
        &alpha_mp,
        &mut sink,
    )?;
    let pre = &cache.conv_preact[i];
    let clusters = &cache.conv_clusters[i];
    let alpha_r = default_alpha(&pre.lower, &pre.upper, clusters);
    let nu = dual_relu_backward(&khat, &pre.lower, &pre.upper, clusters, &alpha_r, &mut sink);
    let mut corrections = Vec::new();
    if let Some(c) = cross_rows(&kappa, &mp.diff_lower, &mp.clusters) {
        corrections.push(c);
    }
    if let Some(c) = cross_rows(&nu, &pre.lower, clusters) {
        corrections.push(c);
    }
    Ok((nu, corrections))
}

fn store_conv_cut(
    cache: &mut BoundsCache,
    net: &NetworkSpec,
    i: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
) -> Result<()> {
    let stage = &net.stages[i];
    let guarded: Vec<(f64, f64)> = lower
        .iter()
        .zip(&upper)
        .map(|(&l, &u)| guard_degenerate(l, u))
        .collect();
    let lower: Vec<f64> = guarded.iter().map(|p| p.0).collect();
    let upper: Vec<f64> = guarded.iter().map(|p| p.1).collect();
    let clusters = classify_all(&lower, &upper)?;
    let (relu_lo, relu_up): (Vec<f64>, Vec<f64>) = lower
        .iter()
        .zip(&upper)
        .map(|(&l, &u)| post_relu_bounds(l, u))
        .unzip();

    let slots = stage.pool.slots();
    let windows = stage.pool_len();
    let mut running_lower = vec![0.0; windows * (slots + 1)];
    let mut running_upper = vec![0.0; windows * (slots + 1)];
    let mut diff_lower = vec![0.0; windows * slots];
    let mut diff_upper = vec![0.0; windows * slots];
    let q = stage.conv_side;
    let mut w_idx = 0;
    for c in 0..stage.conv.out_channels {
        for m in 0..stage.pool_side {
            for n in 0..stage.pool_side {
                let mut wl = Vec::with_capacity(slots);
                let mut wu = Vec::with_capacity(slots);
                for ki in 0..stage.pool.kernel {
                    for kj in 0..stage.pool.kernel {
                        let idx = (c * q + stage.pool.stride * m + ki) * q
                            + stage.pool.stride * n
                            + kj;
                        wl.push(relu_lo[idx]);
                        wu.push(relu_up[idx]);
                    }
                }
                let (lm, um) = maxpool_running_bounds(&wl, &wu)?;
                let (mut lbar, mut ubar) = maxpool_diff_bounds(&wl, &wu, &lm, &um);
                for a in 0..slots {
                    let (l, u) = guard_degenerate(lbar[a], ubar[a]);
                    lbar[a] = l;
                    ubar[a] = u;
                }
                running_lower[w_idx * (slots + 1)..(w_idx + 1) * (slots + 1)]
                    .copy_from_slice(&lm);
                running_upper[w_idx * (slots + 1)..(w_idx + 1) * (slots + 1)]
                    .copy_from_slice(&um);
                diff_lower[w_idx * slots..(w_idx + 1) * slots].copy_from_slice(&lbar);
                diff_upper[w_idx * slots..(w_idx + 1) * slots].copy_from_slice(&ubar);
                w_idx += 1;
            }
        }
    }
    let diff_clusters = classify_all(&diff_lower, &diff_upper)?;

    cache.conv_preact.push(LayerBounds { lower, upper });
    cache.conv_clusters.push(clusters);
    cache.post_relu.push(LayerBounds {
        lower: relu_lo,
        upper: relu_up,
    });
    cache.maxpool.push(MaxpoolBounds {
        slots,
        running_lower,
        running_upper,
        diff_lower,
        diff_upper,
        clusters: diff_clusters,
    });
    Ok(())
}

fn store_fc_cut(cache: &mut BoundsCache, lower: Vec<f64>, upper: Vec<f64>) -> Result<()> {
    let guarded: Vec<(f64, f64)> = lower
        .iter()
        .zip(&upper)
        .map(|(&l, &u)| guard_degenerate(l, u))
        .collect();
    let lower: Vec<f64> = guarded.iter().map(|p| p.0).collect();
    let upper: Vec<f64> = guarded.iter().map(|p| p.1).collect();
    let clusters = classify_all(&lower, &upper)?;
    cache.fc_preact.push(LayerBounds { lower, upper });
    cache.fc_clusters.push(clusters);
    Ok(())
}

fn check_input(net: &NetworkSpec, x: &FeatureMap, eps: &[f64]) -> Result<()> {
    if x.channels != net.input_channels || x.side != net.input_side {
        return Err(CapmError::ShapeMismatch(format!(
            "input {}x{}x{} does not match network input {}x{}x{}",
            x.channels, x.side, x.side, net.input_channels, net.input_side, net.input_side
        )));
    }
    if eps.len() != net.input_len() {
        return Err(CapmError::ShapeMismatch(format!(
            "epsilon has {} entries, input has {}",
            eps.len(),
            net.input_len()
        )));
    }
    if let Some(&bad) = eps.iter().find(|&&e| e < 0.0) {
        return Err(CapmError::NegativeInput(format!("epsilon {bad} < 0")));
    }
    Ok(())
}

impl BoundsCache {
    fn empty() -> Self {
        Self {
            conv_preact: Vec::new(),
            conv_clusters: Vec::new(),
            post_relu: Vec::new(),
            maxpool: Vec::new(),
            fc_preact: Vec::new(),
            fc_clusters: Vec::new(),
        }
    }

    /// Build the complete cache for one input and perturbation budget.
    ///
    /// `eps` is the per-pixel radius over the flattened input.
    pub fn compute(net: &NetworkSpec, x: &FeatureMap, eps: &[f64]) -> Result<Self> {
        Self::compute_up_to(net, x, eps, None).map(|(c, _)| c)
    }

    fn compute_up_to(
        net: &NetworkSpec,
        x: &FeatureMap,
        eps: &[f64],
        stop: Option<CutPoint>,
    ) -> Result<(Self, Option<(Vec<f64>, Vec<f64>)>)> {
        check_input(net, x, eps)?;
        let mut cache = BoundsCache::empty();
        let mut state = IncrementalState::first_conv(net)?;
        for i in 0..net.stages.len() {
            if i > 0 {
                let stage = &net.stages[i];
                let eye = Array2::eye(stage.conv_len());
                let beta = dual_conv_backward(&eye, &stage.conv, stage.in_side)?;
                let (transfer, corrections) = pool_relu_segment(net, &cache, i - 1, &beta)?;
                state.extend(
                    &transfer,
                    expand_conv_bias(&stage.conv, stage.conv_side),
                    corrections,
                );
            }
            let (lower, upper) = state.eval(&x.data, eps);
            if stop == Some(CutPoint::Conv(i)) {
                store_conv_cut(&mut cache, net, i, lower.clone(), upper.clone())?;
                return Ok((cache, Some((lower, upper))));
            }
            store_conv_cut(&mut cache, net, i, lower, upper)?;
        }

        let inner_fc = match stop {
            Some(CutPoint::Fc(f)) => f + 1,
            _ => net.fc_count().saturating_sub(1),
        };
        for f in 0..inner_fc {
            let fc = &net.fc_layers[f];
            let (transfer, corrections) = if f == 0 {
                let w = ArrayView2::from_shape((fc.out_dim, fc.in_dim), &fc.weights)
                    .map_err(|e| CapmError::ShapeMismatch(e.to_string()))?;
                let wt = w.t().to_owned();
                let last = net.stages.len() - 1;
                pool_relu_segment(net, &cache, last, &wt)?
            } else {
                let b = &cache.fc_preact[f - 1];
                let clusters = &cache.fc_clusters[f - 1];
                let alpha = default_alpha(&b.lower, &b.upper, clusters);
                let mut sink = Array1::zeros(fc.out_dim);
                let eye = Array2::eye(fc.out_dim);
                let (_, nu) = dual_fc_backward(
                    &eye, fc, &b.lower, &b.upper, clusters, &alpha, &mut sink,
                )?;
                let corr = cross_rows(&nu, &b.lower, clusters).into_iter().collect();
                (nu, corr)
            };
            state.extend(
                &transfer,
                Array1::from_vec(fc.bias.clone()),
                corrections,
            );
            let (lower, upper) = state.eval(&x.data, eps);
            if stop == Some(CutPoint::Fc(f)) {
                store_fc_cut(&mut cache, lower.clone(), upper.clone())?;
                return Ok((cache, Some((lower, upper))));
            }
            store_fc_cut(&mut cache, lower, upper)?;
        }
        if let Some(cut) = stop {
            // Requested cut lies beyond the cached range; rebuild its bounds
            // explicitly is not supported.
            return Err(CapmError::ShapeMismatch(format!(
                "cut point {cut:?} outside the network"
            )));
        }
        Ok((cache, None))
    }
}

/// Sound element-wise bounds on the pre-activation at `cut`.
///
/// Runs the incremental engine through every earlier nonlinearity and
/// returns this cut's (lower, upper) vectors.
pub fn compute_preact_bounds(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    cut: CutPoint,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match cut {
        CutPoint::Conv(i) if i >= net.stages.len() => Err(CapmError::ShapeMismatch(format!(
            "conv cut {i} outside network with {} stages",
            net.stages.len()
        ))),
        CutPoint::Fc(f) if f >= net.fc_count() => Err(CapmError::ShapeMismatch(format!(
            "fc cut {f} outside network with {} fc layers",
            net.fc_count()
        ))),
        _ => {
            let (_, bounds) = BoundsCache::compute_up_to(net, x, eps, Some(cut))?;
            Ok(bounds.expect("stop cut always yields bounds"))
        }
    }
}

/// Broadcast a scalar radius over the flattened input.
pub fn uniform_epsilon(net: &NetworkSpec, eps: f64) -> Vec<f64> {
    vec![eps; net.input_len()]
}

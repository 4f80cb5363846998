//! Backward pass of the CNN dual network.
//!
//! One pass walks from an objective seed at a linear-layer output down to the
//! input, applying per-cluster closed-form rules at every relaxed
//! nonlinearity and the adjoint of every linear operation. The value it
//! returns is a certified lower bound on the seeded linear functional of the
//! network output over the relaxed adversarial polytope.
//!
//! All operations are batched: dual variables are matrices with one column
//! per independent seed, and the per-neuron rules act row-wise.

use crate::bounds::{BoundsCache, CutPoint, MaxpoolBounds, NeuronCluster};
use crate::error::{CapmError, Result};
use crate::net::{ConvLayer, FcLayer, MaxpoolLayer, NetworkSpec};
use crate::tensor::FeatureMap;
use ndarray::{Array1, Array2, ArrayView2};

/// Positive part, zero at zero.
#[inline]
pub fn pos(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Negative part, zero at zero. `x == pos(x) - neg(x)`.
#[inline]
pub fn neg(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// How the free slope of each crossing neuron is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeStrategy {
    /// alpha = u / (u - l), the same slope as the relaxation upper line.
    /// This makes the backward pass linear in the seed.
    UOverSpan,
    /// alpha = 0 everywhere.
    Zero,
    /// alpha = 1 everywhere.
    One,
    /// A fixed scalar, clamped to [0, 1].
    Fixed(f64),
}

impl SlopeStrategy {
    fn value(self, lower: f64, upper: f64) -> f64 {
        match self {
            SlopeStrategy::UOverSpan => upper / (upper - lower),
            SlopeStrategy::Zero => 0.0,
            SlopeStrategy::One => 1.0,
            SlopeStrategy::Fixed(v) => v.clamp(0.0, 1.0),
        }
    }
}

/// Materialized slopes for every relaxed neuron of a network.
///
/// Entries are meaningful only at crossing neurons; other positions hold 0.
#[derive(Debug, Clone)]
pub struct RelaxationSlopes {
    /// Per conv stage, per conv-output neuron.
    pub conv_relu: Vec<Vec<f64>>,
    /// Per conv stage, per (pooled pixel, window slot).
    pub maxpool: Vec<Vec<f64>>,
    /// Per inner FC layer (one entry per ReLU in the fully connected part).
    pub fc_relu: Vec<Vec<f64>>,
}

impl RelaxationSlopes {
    pub fn from_strategy(cache: &BoundsCache, strategy: SlopeStrategy) -> Self {
        let pick = |l: &[f64], u: &[f64], cl: &[NeuronCluster]| -> Vec<f64> {
            l.iter()
                .zip(u)
                .zip(cl)
                .map(|((&l, &u), &c)| {
                    if c == NeuronCluster::Cross {
                        strategy.value(l, u)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let conv_relu = cache
            .conv_preact
            .iter()
            .zip(&cache.conv_clusters)
            .map(|(b, cl)| pick(&b.lower, &b.upper, cl))
            .collect();
        let maxpool = cache
            .maxpool
            .iter()
            .map(|mp| pick(&mp.diff_lower, &mp.diff_upper, &mp.clusters))
            .collect();
        let fc_relu = cache
            .fc_preact
            .iter()
            .zip(&cache.fc_clusters)
            .map(|(b, cl)| pick(&b.lower, &b.upper, cl))
            .collect();
        Self {
            conv_relu,
            maxpool,
            fc_relu,
        }
    }
}

/// Per-cluster backward rule shared by every relaxed ReLU.
///
/// Row r of the result is 0 on NEG, the input row on POS, and
/// (u/(u-l)) [v]+ - alpha [v]- elementwise on CROSS.
fn cluster_rule(
    input: &Array2<f64>,
    lower: &[f64],
    upper: &[f64],
    clusters: &[NeuronCluster],
    alpha: &[f64],
) -> Array2<f64> {
    let mut out = Array2::zeros(input.raw_dim());
    for r in 0..input.nrows() {
        match clusters[r] {
            NeuronCluster::Neg => {}
            NeuronCluster::Pos => {
                out.row_mut(r).assign(&input.row(r));
            }
            NeuronCluster::Cross => {
                let slope = upper[r] / (upper[r] - lower[r]);
                let a = alpha[r];
                for (o, &v) in out.row_mut(r).iter_mut().zip(input.row(r)) {
                    *o = slope * pos(v) - a * neg(v);
                }
            }
        }
    }
    out
}

/// Add `sum_{r in CROSS} lower[r] * [nu[r, col]]+` to each objective column.
fn accumulate_cross_terms(
    nu: &Array2<f64>,
    lower: &[f64],
    clusters: &[NeuronCluster],
    obj: &mut Array1<f64>,
) {
    for r in 0..nu.nrows() {
        if clusters[r] == NeuronCluster::Cross {
            let lb = lower[r];
            for (o, &v) in obj.iter_mut().zip(nu.row(r)) {
                *o += lb * pos(v);
            }
        }
    }
}

/// Subtract `bias^T nu` from each objective column.
fn accumulate_bias(nu: &Array2<f64>, bias_per_row: impl Fn(usize) -> f64, obj: &mut Array1<f64>) {
    for r in 0..nu.nrows() {
        let b = bias_per_row(r);
        if b != 0.0 {
            for (o, &v) in obj.iter_mut().zip(nu.row(r)) {
                *o -= b * v;
            }
        }
    }
}

/// Backward step through one fully connected layer and the ReLU feeding it.
///
/// Returns (nu_hat, nu) where nu_hat = W^T nu_next and nu applies the
/// per-cluster rule with the layer's pre-activation bounds. Accumulates the
/// bias term of this layer and the crossing-neuron term into `obj`.
pub fn dual_fc_backward(
    nu_next: &Array2<f64>,
    layer: &FcLayer,
    lower: &[f64],
    upper: &[f64],
    clusters: &[NeuronCluster],
    alpha: &[f64],
    obj: &mut Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if nu_next.nrows() != layer.out_dim {
        return Err(CapmError::ShapeMismatch(format!(
            "dual fc backward expects {} rows, got {}",
            layer.out_dim,
            nu_next.nrows()
        )));
    }
    accumulate_bias(nu_next, |r| layer.bias[r], obj);
    let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &layer.weights)
        .map_err(|e| CapmError::ShapeMismatch(e.to_string()))?;
    let nu_hat = w.t().dot(nu_next);
    let nu = cluster_rule(&nu_hat, lower, upper, clusters, alpha);
    accumulate_cross_terms(&nu, lower, clusters, obj);
    Ok((nu_hat, nu))
}

/// Backward step through the flatten operation: reshape the flat dual vector
/// onto the (channel, row, col) map. The flat kernel indexes the map
/// row-major, which is exactly this crate's storage order, so the data is
/// carried over unchanged.
pub fn dual_flatten_backward(
    gamma: &Array2<f64>,
    channels: usize,
    side: usize,
) -> Result<Array2<f64>> {
    if gamma.nrows() != channels * side * side {
        return Err(CapmError::ShapeMismatch(format!(
            "flatten backward expects {} rows, got {}",
            channels * side * side,
            gamma.nrows()
        )));
    }
    Ok(gamma.clone())
}

/// Backward step through one maxpool layer.
///
/// `beta` holds dual rows per pooled pixel. For each pooled pixel the window
/// recursion runs from the last slot down: kappa_a follows the per-cluster
/// rule applied to rho_{a+1}, and rho_a = rho_{a+1} - kappa_a. The returned
/// kappa matrix is indexed [(pixel, slot)] and khat scatters every window
/// slot back onto the pre-maxpool map. Crossing-slot objective terms
/// accumulate into `obj`.
pub fn dual_maxpool_backward(
    beta: &Array2<f64>,
    pool: &MaxpoolLayer,
    channels: usize,
    pool_side: usize,
    conv_side: usize,
    mp: &MaxpoolBounds,
    alpha: &[f64],
    obj: &mut Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let windows = channels * pool_side * pool_side;
    if beta.nrows() != windows {
        return Err(CapmError::ShapeMismatch(format!(
            "maxpool backward expects {} pooled rows, got {}",
            windows,
            beta.nrows()
        )));
    }
    let slots = pool.slots();
    let batch = beta.ncols();
    let mut kappa = Array2::zeros((windows * slots, batch));
    let mut khat = Array2::zeros((channels * conv_side * conv_side, batch));

    let mut w_idx = 0;
    for c in 0..channels {
        for m in 0..pool_side {
            for n in 0..pool_side {
                let mut rho: Array1<f64> = beta.row(w_idx).to_owned();
                for a in (0..slots).rev() {
                    let s = w_idx * slots + a;
                    let (lb, ub) = (mp.diff_lower[s], mp.diff_upper[s]);
                    {
                        let mut row = kappa.row_mut(s);
                        match mp.clusters[s] {
                            NeuronCluster::Neg => {}
                            NeuronCluster::Pos => row.assign(&rho),
                            NeuronCluster::Cross => {
                                let slope = ub / (ub - lb);
                                let al = alpha[s];
                                for (k, &r) in row.iter_mut().zip(rho.iter()) {
                                    *k = slope * pos(r) - al * neg(r);
                                }
                            }
                        }
                    }
                    if mp.clusters[s] == NeuronCluster::Cross {
                        for (o, &k) in obj.iter_mut().zip(kappa.row(s)) {
                            *o += lb * pos(k);
                        }
                    }
                    if a >= 1 {
                        rho -= &kappa.row(s);
                    }
                }
                // scatter window slots onto the pre-maxpool map
                for i in 0..pool.kernel {
                    for j in 0..pool.kernel {
                        let s = w_idx * slots + i * pool.kernel + j;
                        let dst = (c * conv_side + pool.stride * m + i) * conv_side
                            + pool.stride * n + j;
                        let src = kappa.row(s).to_owned();
                        khat.row_mut(dst).zip_mut_with(&src, |o, &k| *o += k);
                    }
                }
                w_idx += 1;
            }
        }
    }
    Ok((kappa, khat))
}

/// Backward step through a conv-part ReLU: the per-cluster rule applied to
/// khat with the conv pre-activation bounds. Accumulates crossing terms.
pub fn dual_relu_backward(
    khat: &Array2<f64>,
    lower: &[f64],
    upper: &[f64],
    clusters: &[NeuronCluster],
    alpha: &[f64],
    obj: &mut Array1<f64>,
) -> Array2<f64> {
    let nu = cluster_rule(khat, lower, upper, clusters, alpha);
    accumulate_cross_terms(&nu, lower, clusters, obj);
    nu
}

/// Adjoint of the convolution's linear part.
///
/// Satisfies `<conv_linear(x), nu> == <x, conv_adjoint(nu)>` for every x;
/// dual values landing on padded coordinates are dropped.
pub fn dual_conv_backward(
    nu: &Array2<f64>,
    layer: &ConvLayer,
    in_side: usize,
) -> Result<Array2<f64>> {
    let out_side = layer.output_side(in_side)?;
    if nu.nrows() != layer.out_channels * out_side * out_side {
        return Err(CapmError::ShapeMismatch(format!(
            "conv backward expects {} rows, got {}",
            layer.out_channels * out_side * out_side,
            nu.nrows()
        )));
    }
    let batch = nu.ncols();
    let mut out = Array2::zeros((layer.in_channels * in_side * in_side, batch));
    let (k, s, p) = (layer.kernel, layer.stride as i64, layer.padding as i64);
    for c in 0..layer.out_channels {
        for mp_ in 0..out_side {
            for np_ in 0..out_side {
                let src = (c * out_side + mp_) * out_side + np_;
                let src_row = nu.row(src);
                for i in 0..layer.in_channels {
                    for kr in 0..k {
                        let m = s * mp_ as i64 - p + kr as i64;
                        if m < 0 || m >= in_side as i64 {
                            continue;
                        }
                        for kc in 0..k {
                            let n = s * np_ as i64 - p + kc as i64;
                            if n < 0 || n >= in_side as i64 {
                                continue;
                            }
                            let w = layer.weight(c, i, kr, kc);
                            if w == 0.0 {
                                continue;
                            }
                            let dst = (i * in_side + m as usize) * in_side + n as usize;
                            let mut dst_row = out.row_mut(dst);
                            for (o, &v) in dst_row.iter_mut().zip(src_row) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Input-layer objective: -x^T nuhat1 - eps^T |nuhat1| per column.
pub fn input_objective(nuhat1: &Array2<f64>, x: &[f64], eps: &[f64]) -> Array1<f64> {
    let batch = nuhat1.ncols();
    let mut out = Array1::zeros(batch);
    for r in 0..nuhat1.nrows() {
        let (xi, ei) = (x[r], eps[r]);
        for (o, &v) in out.iter_mut().zip(nuhat1.row(r)) {
            *o += -xi * v - ei * v.abs();
        }
    }
    out
}

/// Complete one backward pass from `cut` with the given dual seed.
///
/// `seed` must already be the dual variable at the cut layer's output (for a
/// verification objective d this is -d; see [`dual_bound`]). Returns the
/// objective value per column.
pub fn dual_pass_from(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    cut: CutPoint,
    seed: &Array2<f64>,
    cache: &BoundsCache,
    slopes: &RelaxationSlopes,
) -> Result<Array1<f64>> {
    let batch = seed.ncols();
    let mut obj = Array1::zeros(batch);
    let stages = &net.stages;

    // Fully connected phase: from the cut down to beta on the last pooled map.
    let mut carrier: Array2<f64>; // beta rows above some stage's pool
    let start_stage: usize;
    match cut {
        CutPoint::Fc(f) => {
            let mut nu = seed.clone();
            for ff in (1..=f).rev() {
                let layer = &net.fc_layers[ff];
                let b = &cache.fc_preact[ff - 1];
                let (_, next) = dual_fc_backward(
                    &nu,
                    layer,
                    &b.lower,
                    &b.upper,
                    &cache.fc_clusters[ff - 1],
                    &slopes.fc_relu[ff - 1],
                    &mut obj,
                )?;
                nu = next;
            }
            let layer = &net.fc_layers[0];
            accumulate_bias(&nu, |r| layer.bias[r], &mut obj);
            let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &layer.weights)
                .map_err(|e| CapmError::ShapeMismatch(e.to_string()))?;
            let gamma = w.t().dot(&nu);
            let last = stages.last().expect("validated nets have a conv stage");
            carrier = dual_flatten_backward(&gamma, last.conv.out_channels, last.pool_side)?;
            start_stage = stages.len() - 1;
        }
        CutPoint::Conv(i) => {
            // The seed sits directly at stage i's conv output.
            let stage = &stages[i];
            let side = stage.conv_side;
            accumulate_bias(seed, |r| stage.conv.bias[r / (side * side)], &mut obj);
            let nuhat = dual_conv_backward(seed, &stage.conv, stage.in_side)?;
            if i == 0 {
                obj += &input_objective(&nuhat, &x.data, eps);
                return Ok(obj);
            }
            carrier = nuhat;
            start_stage = i - 1;
        }
    }

    // Convolution phase: maxpool backward, ReLU backward, conv adjoint.
    for i in (0..=start_stage).rev() {
        let stage = &stages[i];
        let (_kappa, khat) = dual_maxpool_backward(
            &carrier,
            &stage.pool,
            stage.conv.out_channels,
            stage.pool_side,
            stage.conv_side,
            &cache.maxpool[i],
            &slopes.maxpool[i],
            &mut obj,
        )?;
        let b = &cache.conv_preact[i];
        let nu = dual_relu_backward(
            &khat,
            &b.lower,
            &b.upper,
            &cache.conv_clusters[i],
            &slopes.conv_relu[i],
            &mut obj,
        );
        let side = stage.conv_side;
        accumulate_bias(&nu, |r| stage.conv.bias[r / (side * side)], &mut obj);
        let nuhat = dual_conv_backward(&nu, &stage.conv, stage.in_side)?;
        carrier = nuhat;
    }

    obj += &input_objective(&carrier, &x.data, eps);
    Ok(obj)
}

/// Certified lower bounds of `d^T output` over the relaxed polytope, one per
/// seed column.
///
/// Seeds are objective vectors d of length K; the pass itself runs with -d so
/// that the epsilon = 0 value equals `d^T f(x)` exactly.
pub fn dual_bound(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    seeds: &Array2<f64>,
    cache: &BoundsCache,
    slopes: &RelaxationSlopes,
) -> Result<Vec<f64>> {
    if seeds.nrows() != net.class_count() {
        return Err(CapmError::ShapeMismatch(format!(
            "seed has {} rows, network has {} classes",
            seeds.nrows(),
            net.class_count()
        )));
    }
    let neg_seeds = seeds.mapv(|v| -v);
    let obj = dual_pass_from(
        net,
        x,
        eps,
        CutPoint::Fc(net.fc_count() - 1),
        &neg_seeds,
        cache,
        slopes,
    )?;
    Ok(obj.to_vec())
}

/// Single-seed convenience wrapper over [`dual_bound`].
pub fn dual_bound_single(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    d: &[f64],
    cache: &BoundsCache,
    slopes: &RelaxationSlopes,
) -> Result<f64> {
    let seeds = Array2::from_shape_vec((d.len(), 1), d.to_vec())
        .map_err(|e| CapmError::ShapeMismatch(e.to_string()))?;
    Ok(dual_bound(net, x, eps, &seeds, cache, slopes)?[0])
}

/// Lower bounds of coordinate functionals at an interior cut; used to
/// cross-check the incremental bound engine. Seeds are d vectors at the cut.
pub fn dual_bound_at(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    cut: CutPoint,
    seeds: &Array2<f64>,
    cache: &BoundsCache,
    slopes: &RelaxationSlopes,
) -> Result<Vec<f64>> {
    let neg_seeds = seeds.mapv(|v| -v);
    Ok(dual_pass_from(net, x, eps, cut, &neg_seeds, cache, slopes)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn fc_backward_mixed_clusters() {
        // W = [[1,-1],[2,0]], nu' = (1,1): nu_hat = W^T nu' = (3,-1).
        // Neuron 0 POS, neuron 1 CROSS with l=-1, u=1, alpha=0.5.
        let layer = FcLayer {
            out_dim: 2,
            in_dim: 2,
            weights: vec![1.0, -1.0, 2.0, 0.0],
            bias: vec![0.0, 0.0],
        };
        let mut obj = Array1::zeros(1);
        let (nu_hat, nu) = dual_fc_backward(
            &col(&[1.0, 1.0]),
            &layer,
            &[0.5, -1.0],
            &[2.0, 1.0],
            &[NeuronCluster::Pos, NeuronCluster::Cross],
            &[0.0, 0.5],
            &mut obj,
        )
        .unwrap();
        assert_eq!(nu_hat, arr2(&[[3.0], [-1.0]]));
        assert_eq!(nu, arr2(&[[3.0], [-0.5]]));
    }

    #[test]
    fn fc_backward_all_pos_is_transpose() {
        let layer = FcLayer {
            out_dim: 2,
            in_dim: 3,
            weights: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            bias: vec![0.0, 0.0],
        };
        let mut obj = Array1::zeros(1);
        let (nu_hat, nu) = dual_fc_backward(
            &col(&[1.0, -1.0]),
            &layer,
            &[1.0; 3],
            &[2.0; 3],
            &[NeuronCluster::Pos; 3],
            &[0.0; 3],
            &mut obj,
        )
        .unwrap();
        assert_eq!(nu, nu_hat);
        assert_eq!(nu, arr2(&[[-3.0], [-3.0], [-3.0]]));
    }

    #[test]
    fn fc_backward_all_neg_is_zero() {
        let layer = FcLayer {
            out_dim: 2,
            in_dim: 2,
            weights: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.0, 0.0],
        };
        let mut obj = Array1::zeros(1);
        let (_, nu) = dual_fc_backward(
            &col(&[1.0, 1.0]),
            &layer,
            &[-2.0; 2],
            &[-1.0; 2],
            &[NeuronCluster::Neg; 2],
            &[0.0; 2],
            &mut obj,
        )
        .unwrap();
        assert_eq!(nu, Array2::<f64>::zeros((2, 1)));
    }

    #[test]
    fn flatten_backward_reshapes() {
        let gamma = col(&[7.0, 9.0]);
        let beta = dual_flatten_backward(&gamma, 2, 1).unwrap();
        assert_eq!(beta, gamma);
        assert_eq!(
            dual_flatten_backward(&Array2::<f64>::zeros((4, 1)), 1, 2).unwrap(),
            Array2::<f64>::zeros((4, 1))
        );
        assert!(dual_flatten_backward(&Array2::<f64>::zeros((3, 1)), 2, 1).is_err());
    }

    #[test]
    fn relu_backward_cross_substitution() {
        // CROSS with l=-1, u=3, alpha=0.75
        let mut obj = Array1::zeros(2);
        let nu = dual_relu_backward(
            &arr2(&[[-2.0, 4.0]]),
            &[-1.0],
            &[3.0],
            &[NeuronCluster::Cross],
            &[0.75],
            &mut obj,
        );
        assert_eq!(nu, arr2(&[[-1.5, 3.0]]));
        // objective picks up l * [nu]+ only where nu is positive
        assert_eq!(obj[0], 0.0);
        assert_eq!(obj[1], -3.0);
        let mut obj = Array1::zeros(1);
        let nu = dual_relu_backward(
            &arr2(&[[5.0]]),
            &[-1.0],
            &[-0.5],
            &[NeuronCluster::Neg],
            &[0.0],
            &mut obj,
        );
        assert_eq!(nu, arr2(&[[0.0]]));
    }

    #[test]
    fn conv_backward_scalar_kernel() {
        let layer = ConvLayer {
            out_channels: 1,
            in_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
            weights: vec![2.0],
            bias: vec![0.0],
        };
        let nu = col(&[1.0, 1.0, 1.0, 1.0]);
        let nuhat = dual_conv_backward(&nu, &layer, 2).unwrap();
        assert_eq!(nuhat, col(&[2.0, 2.0, 2.0, 2.0]));
        let zero = Array2::zeros((4, 1));
        assert_eq!(dual_conv_backward(&zero, &layer, 2).unwrap(), zero);
    }

    #[test]
    fn maxpool_backward_pos_telescopes_to_last_slot() {
        // Single 2x2 window, all slots POS: kappa_3 = beta, the rest collapse.
        let pool = MaxpoolLayer { kernel: 2, stride: 2 };
        let mp = MaxpoolBounds {
            slots: 4,
            running_lower: vec![0.0; 5],
            running_upper: vec![0.0; 5],
            diff_lower: vec![0.5; 4],
            diff_upper: vec![1.0; 4],
            clusters: vec![NeuronCluster::Pos; 4],
        };
        let mut obj = Array1::zeros(1);
        let (kappa, khat) =
            dual_maxpool_backward(&col(&[3.0]), &pool, 1, 1, 2, &mp, &[0.0; 4], &mut obj).unwrap();
        assert_eq!(kappa, col(&[0.0, 0.0, 0.0, 3.0]));
        assert_eq!(khat, col(&[0.0, 0.0, 0.0, 3.0]));
        assert_eq!(obj[0], 0.0);
    }

    #[test]
    fn maxpool_backward_zero_beta_is_zero() {
        let pool = MaxpoolLayer { kernel: 2, stride: 2 };
        let mp = MaxpoolBounds {
            slots: 4,
            running_lower: vec![0.0; 5],
            running_upper: vec![0.0; 5],
            diff_lower: vec![-1.0; 4],
            diff_upper: vec![1.0; 4],
            clusters: vec![NeuronCluster::Cross; 4],
        };
        let mut obj = Array1::zeros(1);
        let (kappa, khat) =
            dual_maxpool_backward(&col(&[0.0]), &pool, 1, 1, 2, &mp, &[0.5; 4], &mut obj).unwrap();
        assert_eq!(kappa, Array2::<f64>::zeros((4, 1)));
        assert_eq!(khat, Array2::<f64>::zeros((4, 1)));
        assert_eq!(obj[0], 0.0);
    }

    #[test]
    fn maxpool_backward_matches_literal_transcription() {
        // Slot bounds l = (0,0,-3,-1), u = (1,3,1,1), alpha = u/(u-l), beta = 1.
        let pool = MaxpoolLayer { kernel: 2, stride: 2 };
        let diff_lower = vec![0.0, 0.0, -3.0, -1.0];
        let diff_upper = vec![1.0, 3.0, 1.0, 1.0];
        let clusters = vec![NeuronCluster::Cross; 4];
        let alpha: Vec<f64> = diff_lower
            .iter()
            .zip(&diff_upper)
            .map(|(&l, &u)| u / (u - l))
            .collect();
        let mp = MaxpoolBounds {
            slots: 4,
            running_lower: vec![0.0; 5],
            running_upper: vec![0.0; 5],
            diff_lower: diff_lower.clone(),
            diff_upper: diff_upper.clone(),
            clusters: clusters.clone(),
        };
        let mut obj = Array1::zeros(1);
        let (kappa, khat) =
            dual_maxpool_backward(&col(&[1.0]), &pool, 1, 1, 2, &mp, &alpha, &mut obj).unwrap();

        // Independent straight-line transcription of the recursion: rho_4 = beta,
        // kappa_a from rho_{a+1}, rho_a = rho_{a+1} - kappa_a, objective adds
        // lbar_a [kappa_a]+ on crossing slots.
        let beta = 1.0;
        let mut rho = vec![0.0; 5];
        let mut kap = vec![0.0; 4];
        let mut obj_ref = 0.0;
        rho[4] = beta;
        for a in (0..4).rev() {
            let (l, u) = (diff_lower[a], diff_upper[a]);
            kap[a] = u / (u - l) * pos(rho[a + 1]) - (u / (u - l)) * neg(rho[a + 1]);
            obj_ref += l * pos(kap[a]);
            if a >= 1 {
                rho[a] = rho[a + 1] - kap[a];
            }
        }
        for a in 0..4 {
            assert!((kappa[(a, 0)] - kap[a]).abs() < 1e-15, "slot {a}");
        }
        // frozen values: kappa = (0, 0.375, 0.125, 0.5), objective -0.875
        assert_eq!(kap, vec![0.0, 0.375, 0.125, 0.5]);
        assert!((obj[0] - obj_ref).abs() < 1e-15);
        assert_eq!(obj_ref, -0.875);
        // khat on the 2x2 pre-maxpool map keeps slot order a = i*k + j
        assert_eq!(khat, col(&[0.0, 0.375, 0.125, 0.5]));
    }
}

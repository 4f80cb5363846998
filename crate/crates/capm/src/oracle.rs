//! Independent ground-truth machinery: Monte-Carlo polytope sampling,
//! closed-form single-layer optima, brute-force enumeration, and interval
//! propagation. Everything here is deliberately simple and separate from the
//! dual-network path so the two can check each other.

use crate::bounds::BoundsCache;
use crate::error::{CapmError, Result};
use crate::net::{
    forward_trace, network_forward, ConvLayer, FcLayer, MaxpoolLayer, NetworkSpec, RawLayer,
};
use crate::tensor::FeatureMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Maximum input dimension for exact corner enumeration (2^dims corners).
pub const CORNER_DIM_LIMIT: usize = 12;

/// Uniform samples from the box [x - eps, x + eps].
///
/// The generator is ChaCha8 with one dedicated stream per sample index, so
/// sample i is the same for every `n_adv >= i+1`: enlarging a sample set
/// extends it rather than reshuffling it.
#[derive(Debug, Clone)]
pub struct PolytopeSampleSet {
    pub n_adv: usize,
    pub seed: u64,
    pub samples: Vec<Vec<f64>>,
}

fn draw_sample(x: &[f64], eps: &[f64], seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    x.iter()
        .zip(eps)
        .map(|(&xi, &ei)| {
            let u: f64 = rng.gen();
            (xi - ei) + u * (2.0 * ei)
        })
        .collect()
}

/// Draw `n_adv` uniform samples from the perturbation box around `x`.
pub fn sample_polytope(x: &[f64], eps: &[f64], n_adv: usize, seed: u64) -> PolytopeSampleSet {
    let samples = (0..n_adv)
        .map(|i| draw_sample(x, eps, seed, i as u64))
        .collect();
    PolytopeSampleSet {
        n_adv,
        seed,
        samples,
    }
}

/// Per-neuron empirical min/max over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; n],
            max: vec![f64::NEG_INFINITY; n],
        }
    }

    fn absorb(&mut self, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            self.min[i] = self.min[i].min(v);
            self.max[i] = self.max[i].max(v);
        }
    }

    fn merge(&mut self, other: &Envelope) {
        for i in 0..self.min.len() {
            self.min[i] = self.min[i].min(other.min[i]);
            self.max[i] = self.max[i].max(other.max[i]);
        }
    }
}

/// Empirical activation ranges at every traced position of the network.
#[derive(Debug, Clone)]
pub struct ActivationEnvelope {
    pub conv_preact: Vec<Envelope>,
    pub post_relu: Vec<Envelope>,
    /// Running maxima per stage, [(pixel, a)] with a in 0..=slots.
    pub running: Vec<Envelope>,
    /// Slot differences per stage, [(pixel, a)] with a in 0..slots.
    pub diffs: Vec<Envelope>,
    /// Every FC pre-activation including the logits.
    pub fc_preact: Vec<Envelope>,
}

/// Forward-evaluate every sample and record per-neuron activation ranges.
pub fn empirical_bounds(net: &NetworkSpec, set: &PolytopeSampleSet) -> Result<ActivationEnvelope> {
    if set.samples.is_empty() {
        return Err(CapmError::EmptyDataset);
    }
    let mut env: Option<ActivationEnvelope> = None;
    for sample in &set.samples {
        let x = FeatureMap::from_vec(net.input_channels, net.input_side, sample.clone())?;
        let trace = forward_trace(net, &x)?;
        let env = env.get_or_insert_with(|| ActivationEnvelope {
            conv_preact: trace
                .stages
                .iter()
                .map(|s| Envelope::new(s.preact.len()))
                .collect(),
            post_relu: trace
                .stages
                .iter()
                .map(|s| Envelope::new(s.post_relu.len()))
                .collect(),
            running: trace
                .stages
                .iter()
                .map(|s| Envelope::new(s.running.len()))
                .collect(),
            diffs: trace
                .stages
                .iter()
                .map(|s| Envelope::new(s.diffs.len()))
                .collect(),
            fc_preact: trace
                .fc_preacts
                .iter()
                .map(|v| Envelope::new(v.len()))
                .collect(),
        });
        for (i, stage) in trace.stages.iter().enumerate() {
            env.conv_preact[i].absorb(&stage.preact.data);
            env.post_relu[i].absorb(&stage.post_relu.data);
            env.running[i].absorb(&stage.running);
            env.diffs[i].absorb(&stage.diffs);
        }
        for (i, v) in trace.fc_preacts.iter().enumerate() {
            env.fc_preact[i].absorb(v);
        }
    }
    Ok(env.expect("nonempty sample set"))
}

/// Streamed per-output min/max of `f` over `n` box samples, without holding
/// the samples in memory. Sample i is identical to `sample_polytope`'s.
pub fn streamed_output_envelope<F>(
    f: F,
    x: &[f64],
    eps: &[f64],
    n: usize,
    seed: u64,
) -> Envelope
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    const CHUNK: usize = 8192;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partial: Vec<Envelope> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut env: Option<Envelope> = None;
            for i in start..end {
                let s = draw_sample(x, eps, seed, i as u64);
                let out = f(&s);
                let env = env.get_or_insert_with(|| Envelope::new(out.len()));
                env.absorb(&out);
            }
            env.expect("nonempty chunk")
        })
        .collect();
    let mut acc = partial[0].clone();
    for e in &partial[1..] {
        acc.merge(e);
    }
    acc
}

/// One row of the bound-gap audit.
#[derive(Debug, Clone)]
pub struct GapRow {
    pub operation: &'static str,
    pub layer: usize,
    pub neuron: usize,
    pub predicted_lower: f64,
    pub predicted_upper: f64,
    pub empirical_lower: f64,
    pub empirical_upper: f64,
    /// Predicted gap u_p - l_p.
    pub gap_predicted: f64,
    /// Empirical gap u_est - l_est.
    pub gap_empirical: f64,
    /// gap_predicted - gap_empirical; negative flags a soundness violation.
    pub gap_difference: f64,
    pub violation: bool,
}

/// Per-operation aggregate of the audit.
#[derive(Debug, Clone)]
pub struct GapSummary {
    pub operation: &'static str,
    pub layer: usize,
    pub neurons: usize,
    pub mean_gap_predicted: f64,
    pub mean_gap_empirical: f64,
    pub mean_gap_difference: f64,
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub summaries: Vec<GapSummary>,
    pub violation_count: usize,
}

fn gap_rows(
    operation: &'static str,
    layer: usize,
    pl: &[f64],
    pu: &[f64],
    env: &Envelope,
    rows: &mut Vec<GapRow>,
) -> Result<()> {
    if pl.len() != env.min.len() {
        return Err(CapmError::ShapeMismatch(format!(
            "{operation} layer {layer}: predicted {} neurons, empirical {}",
            pl.len(),
            env.min.len()
        )));
    }
    for j in 0..pl.len() {
        let gp = pu[j] - pl[j];
        let gr = env.max[j] - env.min[j];
        // A sample outside the predicted interval is the actual violation;
        // the gap difference alone can hide an offset.
        let violation = env.min[j] < pl[j] - 1e-9 || env.max[j] > pu[j] + 1e-9 || gp - gr < -1e-9;
        rows.push(GapRow {
            operation,
            layer,
            neuron: j,
            predicted_lower: pl[j],
            predicted_upper: pu[j],
            empirical_lower: env.min[j],
            empirical_upper: env.max[j],
            gap_predicted: gp,
            gap_empirical: gr,
            gap_difference: gp - gr,
            violation,
        });
    }
    Ok(())
}

/// Compare the predicted cache against empirical activation ranges.
pub fn bound_gap_report(cache: &BoundsCache, env: &ActivationEnvelope) -> Result<GapReport> {
    let mut rows = Vec::new();
    for (i, b) in cache.conv_preact.iter().enumerate() {
        gap_rows("conv_preact", i, &b.lower, &b.upper, &env.conv_preact[i], &mut rows)?;
    }
    for (i, b) in cache.post_relu.iter().enumerate() {
        gap_rows("post_relu", i, &b.lower, &b.upper, &env.post_relu[i], &mut rows)?;
    }
    for (i, mp) in cache.maxpool.iter().enumerate() {
        gap_rows(
            "maxpool_running",
            i,
            &mp.running_lower,
            &mp.running_upper,
            &env.running[i],
            &mut rows,
        )?;
        gap_rows(
            "maxpool_diff",
            i,
            &mp.diff_lower,
            &mp.diff_upper,
            &env.diffs[i],
            &mut rows,
        )?;
    }
    for (i, b) in cache.fc_preact.iter().enumerate() {
        gap_rows("fc_preact", i, &b.lower, &b.upper, &env.fc_preact[i], &mut rows)?;
    }

    let mut summaries: Vec<GapSummary> = Vec::new();
    for row in &rows {
        match summaries
            .iter_mut()
            .find(|s| s.operation == row.operation && s.layer == row.layer)
        {
            Some(s) => {
                s.neurons += 1;
                s.mean_gap_predicted += row.gap_predicted;
                s.mean_gap_empirical += row.gap_empirical;
                s.mean_gap_difference += row.gap_difference;
                s.violations += row.violation as usize;
            }
            None => summaries.push(GapSummary {
                operation: row.operation,
                layer: row.layer,
                neurons: 1,
                mean_gap_predicted: row.gap_predicted,
                mean_gap_empirical: row.gap_empirical,
                mean_gap_difference: row.gap_difference,
                violations: row.violation as usize,
            }),
        }
    }
    for s in &mut summaries {
        let n = s.neurons as f64;
        s.mean_gap_predicted /= n;
        s.mean_gap_empirical /= n;
        s.mean_gap_difference /= n;
    }
    let violation_count = rows.iter().filter(|r| r.violation).count();
    Ok(GapReport {
        rows,
        summaries,
        violation_count,
    })
}

/// Exact box optimum of one output of a single linear map y = W^T z + b
/// (weights column-indexed by output, the transposed orientation).
///
/// Returns (min_j, max_j): min_j = (W^T x + b)_j - sum_i eps_i |W[i, j]|.
pub fn linear_layer_exact(
    w: &Array2<f64>,
    b: &[f64],
    x: &[f64],
    eps: &[f64],
    j: usize,
) -> Result<(f64, f64)> {
    if w.nrows() != x.len() || w.ncols() != b.len() || j >= b.len() || eps.len() != x.len() {
        return Err(CapmError::ShapeMismatch(format!(
            "linear_layer_exact: W is {}x{}, x has {}, eps {}, b {}, j={j}",
            w.nrows(),
            w.ncols(),
            x.len(),
            eps.len(),
            b.len()
        )));
    }
    let mut center = b[j];
    let mut rad = 0.0;
    for i in 0..x.len() {
        center += w[(i, j)] * x[i];
        rad += eps[i] * w[(i, j)].abs();
    }
    Ok((center - rad, center + rad))
}

/// Search resolution for [`brute_force_min`].
#[derive(Debug, Clone, Copy)]
pub enum BruteForceResolution {
    /// All 2^dims box corners (exact for linear objectives).
    Corners,
    /// Corners plus `samples` uniform interior points.
    CornersAndSamples { samples: usize, seed: u64 },
    /// Uniform samples only; works in any dimension.
    Samples { samples: usize, seed: u64 },
}

/// Empirical minimum of d^T f over the box: an upper bound on the true
/// minimum, exact for linear networks in corner mode.
pub fn brute_force_min(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    d: &[f64],
    resolution: BruteForceResolution,
) -> Result<f64> {
    let dims = net.input_len();
    let eval = |z: &[f64]| -> Result<f64> {
        let m = FeatureMap::from_vec(net.input_channels, net.input_side, z.to_vec())?;
        let logits = network_forward(net, &m)?;
        Ok(d.iter().zip(&logits).map(|(a, b)| a * b).sum())
    };
    let mut best = f64::INFINITY;
    let corners = |best: &mut f64| -> Result<()> {
        if dims > CORNER_DIM_LIMIT {
            return Err(CapmError::DimensionTooLarge {
                dims,
                max: CORNER_DIM_LIMIT,
            });
        }
        let mut z = vec![0.0; dims];
        for mask in 0u64..(1u64 << dims) {
            for i in 0..dims {
                let sign = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                z[i] = x.data[i] + sign * eps[i];
            }
            *best = best.min(eval(&z)?);
        }
        Ok(())
    };
    let sweep = |best: &mut f64, samples: usize, seed: u64| -> Result<()> {
        for i in 0..samples {
            let z = draw_sample(&x.data, eps, seed, i as u64);
            *best = best.min(eval(&z)?);
        }
        Ok(())
    };
    match resolution {
        BruteForceResolution::Corners => corners(&mut best)?,
        BruteForceResolution::CornersAndSamples { samples, seed } => {
            corners(&mut best)?;
            sweep(&mut best, samples, seed)?;
        }
        BruteForceResolution::Samples { samples, seed } => sweep(&mut best, samples, seed)?,
    }
    Ok(best)
}

/// Interval bounds at every traced position, by naive interval propagation.
#[derive(Debug, Clone)]
pub struct IntervalEnvelope {
    pub conv_preact: Vec<Envelope>,
    pub post_relu: Vec<Envelope>,
    pub pooled: Vec<Envelope>,
    /// Every FC pre-activation including the logits.
    pub fc_preact: Vec<Envelope>,
}

/// Sound per-neuron bounds via interval arithmetic through every layer.
///
/// Linear layers propagate center and radius (radius through the absolute
/// weights); ReLU and maxpool are exact elementwise on interval endpoints.
pub fn interval_bounds(net: &NetworkSpec, x: &FeatureMap, eps: &[f64]) -> Result<IntervalEnvelope> {
    let mut lo = FeatureMap {
        channels: x.channels,
        side: x.side,
        data: x.data.iter().zip(eps).map(|(v, e)| v - e).collect(),
    };
    let mut hi = FeatureMap {
        channels: x.channels,
        side: x.side,
        data: x.data.iter().zip(eps).map(|(v, e)| v + e).collect(),
    };
    let mut out = IntervalEnvelope {
        conv_preact: Vec::new(),
        post_relu: Vec::new(),
        pooled: Vec::new(),
        fc_preact: Vec::new(),
    };

    for stage in &net.stages {
        let (mut center, mut radius) = (lo.clone(), lo.clone());
        for i in 0..center.data.len() {
            center.data[i] = 0.5 * (lo.data[i] + hi.data[i]);
            radius.data[i] = 0.5 * (hi.data[i] - lo.data[i]);
        }
        let abs_conv = ConvLayer {
            weights: stage.conv.weights.iter().map(|w| w.abs()).collect(),
            bias: vec![0.0; stage.conv.out_channels],
            ..stage.conv.clone()
        };
        let c_out = crate::net::conv_forward(&center, &stage.conv)?;
        let r_out = crate::net::conv_forward(&radius, &abs_conv)?;
        let pre_lo: Vec<f64> = c_out.data.iter().zip(&r_out.data).map(|(c, r)| c - r).collect();
        let pre_hi: Vec<f64> = c_out.data.iter().zip(&r_out.data).map(|(c, r)| c + r).collect();
        out.conv_preact.push(Envelope {
            min: pre_lo.clone(),
            max: pre_hi.clone(),
        });

        let relu_lo: Vec<f64> = pre_lo.iter().map(|&v| v.max(0.0)).collect();
        let relu_hi: Vec<f64> = pre_hi.iter().map(|&v| v.max(0.0)).collect();
        out.post_relu.push(Envelope {
            min: relu_lo.clone(),
            max: relu_hi.clone(),
        });

        let lo_map = FeatureMap::from_vec(stage.conv.out_channels, stage.conv_side, relu_lo)?;
        let hi_map = FeatureMap::from_vec(stage.conv.out_channels, stage.conv_side, relu_hi)?;
        lo = crate::net::maxpool_forward(&lo_map, &stage.pool)?;
        hi = crate::net::maxpool_forward(&hi_map, &stage.pool)?;
        out.pooled.push(Envelope {
            min: lo.data.clone(),
            max: hi.data.clone(),
        });
    }

    let mut vlo = lo.flatten();
    let mut vhi = hi.flatten();
    for (i, fc) in net.fc_layers.iter().enumerate() {
        if i > 0 {
            vlo = vlo.iter().map(|&v| v.max(0.0)).collect();
            vhi = vhi.iter().map(|&v| v.max(0.0)).collect();
        }
        let mut nlo = fc.bias.clone();
        let mut nhi = fc.bias.clone();
        for o in 0..fc.out_dim {
            for ii in 0..fc.in_dim {
                let w = fc.weight(o, ii);
                if w >= 0.0 {
                    nlo[o] += w * vlo[ii];
                    nhi[o] += w * vhi[ii];
                } else {
                    nlo[o] += w * vhi[ii];
                    nhi[o] += w * vlo[ii];
                }
            }
        }
        out.fc_preact.push(Envelope {
            min: nlo.clone(),
            max: nhi.clone(),
        });
        vlo = nlo;
        vhi = nhi;
    }
    Ok(out)
}

/// Shape menu for the random network generator.
#[derive(Debug, Clone)]
pub struct RandomNetConfig {
    /// Number of conv stages (conv block count minus one), at least 1.
    pub stages: usize,
    /// Number of fully connected layers, at least 1.
    pub fc_layers: usize,
    /// Input channels.
    pub input_channels: usize,
    /// Input side length.
    pub input_side: usize,
    /// Cap on conv channels and FC widths.
    pub max_width: usize,
    /// Output classes.
    pub classes: usize,
    /// Multiplies the weight scale; 1.0 keeps activations near the unit box.
    pub weight_scale: f64,
}

impl Default for RandomNetConfig {
    fn default() -> Self {
        Self {
            stages: 1,
            fc_layers: 1,
            input_channels: 1,
            input_side: 6,
            max_width: 16,
            classes: 3,
            weight_scale: 1.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

/// Generate a random valid network for property tests and oracle sweeps.
pub fn random_network(cfg: &RandomNetConfig, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = cfg.input_channels;
    let mut side = cfg.input_side;

    for s in 0..cfg.stages {
        // pick a conv geometry that keeps the side integral and >= 2
        let mut options = Vec::new();
        for kernel in 1..=3usize.min(side) {
            for stride in 1..=2usize {
                for padding in 0..=1usize {
                    let span = side as i64 + 2 * padding as i64 - kernel as i64;
                    if span >= 0 && span % stride as i64 == 0 {
                        let out = span as usize / stride + 1;
                        if out >= 2 && out <= side + 1 {
                            options.push((kernel, stride, padding, out));
                        }
                    }
                }
            }
        }
        let (kernel, stride, padding, conv_out) = options[rng.gen_range(0..options.len())];
        let out_channels = rng.gen_range(1..=cfg.max_width.min(4));
        let fan_in = channels * kernel * kernel;
        let scale = cfg.weight_scale / (fan_in as f64).sqrt();
        let weights = (0..out_channels * channels * kernel * kernel)
            .map(|_| uniform(&mut rng, -scale, scale))
            .collect();
        let bias = (0..out_channels)
            .map(|_| uniform(&mut rng, -0.3, 0.3))
            .collect();
        layers.push(RawLayer::Conv(ConvLayer {
            out_channels,
            in_channels: channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
        }));
        channels = out_channels;
        side = conv_out;

        // pool geometry that tiles exactly; keep at least a 1x1 output
        let mut pools = Vec::new();
        for kernel in 1..=3usize.min(side) {
            for stride in 1..=3usize {
                if (side - kernel) % stride == 0 {
                    let out = (side - kernel) / stride + 1;
                    // leave room for the next conv
                    if out >= if s + 1 < cfg.stages { 2 } else { 1 } {
                        pools.push((kernel, stride, out));
                    }
                }
            }
        }
        let (pk, ps, pout) = pools[rng.gen_range(0..pools.len())];
        layers.push(RawLayer::Relu);
        layers.push(RawLayer::Maxpool(MaxpoolLayer {
            kernel: pk,
            stride: ps,
        }));
        side = pout;
    }

    layers.push(RawLayer::Flatten);
    let mut in_dim = channels * side * side;
    for f in 0..cfg.fc_layers {
        if f > 0 {
            layers.push(RawLayer::Relu);
        }
        let out_dim = if f + 1 == cfg.fc_layers {
            cfg.classes
        } else {
            rng.gen_range(2..=cfg.max_width)
        };
        let scale = cfg.weight_scale / (in_dim as f64).sqrt();
        let weights = (0..out_dim * in_dim)
            .map(|_| uniform(&mut rng, -scale, scale))
            .collect();
        let bias = (0..out_dim).map(|_| uniform(&mut rng, -0.3, 0.3)).collect();
        layers.push(RawLayer::Fc(FcLayer {
            out_dim,
            in_dim,
            weights,
            bias,
        }));
        in_dim = out_dim;
    }

    crate::net::validate_network(cfg.input_channels, cfg.input_side, layers)
        .expect("generated networks always follow the pattern")
}

/// A uniform [0, 1] input matching the network's input shape.
pub fn random_input(net: &NetworkSpec, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // keep clear of polytope sample streams
    let data = (0..net.input_len()).map(|_| rng.gen::<f64>()).collect();
    FeatureMap {
        channels: net.input_channels,
        side: net.input_side,
        data,
    }
}

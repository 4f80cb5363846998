//! Cross-checks between the dual network, the incremental bound engine, and
//! the independent oracles.

use capm::bounds::{compute_preact_bounds, uniform_epsilon, BoundsCache, CutPoint};
use capm::dual::{dual_bound, dual_bound_at, dual_bound_single, RelaxationSlopes, SlopeStrategy};
use capm::ndarray::Array2;
use capm::net::network_forward;
use capm::oracle::{
    empirical_bounds, random_input, random_network, sample_polytope, RandomNetConfig,
};

fn net_config(seed: u64) -> RandomNetConfig {
    RandomNetConfig {
        stages: 1 + (seed % 2) as usize,
        fc_layers: 1 + (seed / 2 % 2) as usize,
        input_side: 5 + (seed % 3) as usize,
        classes: 2 + (seed % 3) as usize,
        ..RandomNetConfig::default()
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn zero_epsilon_reproduces_forward_margins() {
    for seed in 0..40 {
        let net = random_network(&net_config(seed), seed);
        let x = random_input(&net, seed + 1000);
        let eps = uniform_epsilon(&net, 0.0);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let slopes = RelaxationSlopes::from_strategy(&cache, SlopeStrategy::UOverSpan);
        let logits = network_forward(&net, &x).unwrap();
        let k = net.class_count();
        for a in 0..k {
            for b in 0..k {
                let mut d = vec![0.0; k];
                d[a] += 1.0;
                d[b] -= 1.0;
                let j = dual_bound_single(&net, &x, &eps, &d, &cache, &slopes).unwrap();
                let exact = logits[a] - logits[b];
                assert!(
                    rel_close(j, exact, 1e-9),
                    "seed {seed}: J={j} exact={exact}"
                );
            }
        }
    }
}

#[test]
fn dual_bound_is_sound_against_sampling() {
    for seed in 0..25 {
        let net = random_network(&net_config(seed), seed * 7 + 1);
        let x = random_input(&net, seed + 31);
        let eps_val = 0.01 + 0.02 * (seed % 5) as f64;
        let eps = uniform_epsilon(&net, eps_val);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let slopes = RelaxationSlopes::from_strategy(&cache, SlopeStrategy::UOverSpan);
        let k = net.class_count();
        let d: Vec<f64> = (0..k)
            .map(|i| if i == 0 { 1.0 } else { -1.0 / (k - 1) as f64 })
            .collect();
        let j = dual_bound_single(&net, &x, &eps, &d, &cache, &slopes).unwrap();

        let set = sample_polytope(&x.data, &eps, 2000, seed);
        let mut sampled_min = f64::INFINITY;
        for s in &set.samples {
            let m = capm::FeatureMap::from_vec(net.input_channels, net.input_side, s.clone())
                .unwrap();
            let logits = network_forward(&net, &m).unwrap();
            let v: f64 = d.iter().zip(&logits).map(|(a, b)| a * b).sum();
            sampled_min = sampled_min.min(v);
        }
        assert!(
            j <= sampled_min + 1e-9,
            "seed {seed}: dual bound {j} above sampled min {sampled_min}"
        );
    }
}

#[test]
fn every_alpha_strategy_stays_dual_feasible() {
    for seed in 0..10 {
        let net = random_network(&net_config(seed), seed * 13 + 3);
        let x = random_input(&net, seed + 77);
        let eps = uniform_epsilon(&net, 0.05);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let k = net.class_count();
        let d: Vec<f64> = (0..k).map(|i| if i == 0 { 1.0 } else { -1.0 }).collect();

        let set = sample_polytope(&x.data, &eps, 1000, seed);
        let mut sampled_min = f64::INFINITY;
        for s in &set.samples {
            let m = capm::FeatureMap::from_vec(net.input_channels, net.input_side, s.clone())
                .unwrap();
            let logits = network_forward(&net, &m).unwrap();
            let v: f64 = d.iter().zip(&logits).map(|(a, b)| a * b).sum();
            sampled_min = sampled_min.min(v);
        }
        for strategy in [
            SlopeStrategy::UOverSpan,
            SlopeStrategy::Zero,
            SlopeStrategy::One,
            SlopeStrategy::Fixed(0.37),
        ] {
            let slopes = RelaxationSlopes::from_strategy(&cache, strategy);
            let j = dual_bound_single(&net, &x, &eps, &d, &cache, &slopes).unwrap();
            assert!(
                j <= sampled_min + 1e-9,
                "seed {seed} {strategy:?}: {j} > {sampled_min}"
            );
        }
    }
}

#[test]
fn incremental_bounds_match_per_column_dual_passes() {
    for seed in 0..12 {
        let net = random_network(&net_config(seed), seed * 3 + 5);
        let x = random_input(&net, seed + 11);
        let eps = uniform_epsilon(&net, 0.04);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let slopes = RelaxationSlopes::from_strategy(&cache, SlopeStrategy::UOverSpan);

        let mut cuts: Vec<CutPoint> = (0..net.stages.len()).map(CutPoint::Conv).collect();
        for f in 0..net.fc_count().saturating_sub(1) {
            cuts.push(CutPoint::Fc(f));
        }
        for cut in cuts {
            let (lower, upper) = compute_preact_bounds(&net, &x, &eps, cut).unwrap();
            let n = lower.len();
            let pos_seeds = Array2::from_shape_fn((n, n), |(i, j)| f64::from(i == j));
            let neg_seeds = pos_seeds.mapv(|v| -v);
            let lo = dual_bound_at(&net, &x, &eps, cut, &pos_seeds, &cache, &slopes).unwrap();
            let hi = dual_bound_at(&net, &x, &eps, cut, &neg_seeds, &cache, &slopes).unwrap();
            for j in 0..n {
                assert!(
                    rel_close(lower[j], lo[j], 1e-9),
                    "seed {seed} {cut:?} lower[{j}]: {} vs {}",
                    lower[j],
                    lo[j]
                );
                assert!(
                    rel_close(upper[j], -hi[j], 1e-9),
                    "seed {seed} {cut:?} upper[{j}]: {} vs {}",
                    upper[j],
                    -hi[j]
                );
            }
        }
    }
}

#[test]
fn batch_equals_per_column_invocation() {
    for seed in 0..8 {
        let net = random_network(&net_config(seed), seed + 99);
        let x = random_input(&net, seed);
        let eps = uniform_epsilon(&net, 0.03);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let slopes = RelaxationSlopes::from_strategy(&cache, SlopeStrategy::UOverSpan);
        let k = net.class_count();
        let batch = Array2::from_shape_fn((k, k), |(i, j)| {
            if i == j {
                1.0
            } else if i == (j + 1) % k {
                -1.0
            } else {
                0.0
            }
        });
        let joint = dual_bound(&net, &x, &eps, &batch, &cache, &slopes).unwrap();
        for j in 0..k {
            let d: Vec<f64> = batch.column(j).to_vec();
            let single = dual_bound_single(&net, &x, &eps, &d, &cache, &slopes).unwrap();
            assert!(
                rel_close(joint[j], single, 1e-12),
                "seed {seed} col {j}: {} vs {single}",
                joint[j]
            );
        }
    }
}

#[test]
fn bounds_shrink_with_epsilon() {
    for seed in 0..10 {
        let net = random_network(&net_config(seed), seed * 17 + 2);
        let x = random_input(&net, seed + 5);
        let eps_small = uniform_epsilon(&net, 0.01);
        let eps_large = uniform_epsilon(&net, 0.05);
        let small = BoundsCache::compute(&net, &x, &eps_small).unwrap();
        let large = BoundsCache::compute(&net, &x, &eps_large).unwrap();
        for (bs, bl) in small.conv_preact.iter().zip(&large.conv_preact) {
            for j in 0..bs.len() {
                assert!(bl.lower[j] <= bs.lower[j] + 1e-12);
                assert!(bl.upper[j] >= bs.upper[j] - 1e-12);
            }
        }
        for (bs, bl) in small.fc_preact.iter().zip(&large.fc_preact) {
            for j in 0..bs.len() {
                assert!(bl.lower[j] <= bs.lower[j] + 1e-12);
                assert!(bl.upper[j] >= bs.upper[j] - 1e-12);
            }
        }
    }
}

#[test]
fn cached_bounds_contain_sampled_activations() {
    for seed in 0..10 {
        let net = random_network(&net_config(seed), seed * 29 + 7);
        let x = random_input(&net, seed + 3);
        let eps = uniform_epsilon(&net, 0.05);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let env = empirical_bounds(&net, &sample_polytope(&x.data, &eps, 500, seed)).unwrap();
        for (i, b) in cache.conv_preact.iter().enumerate() {
            for j in 0..b.len() {
                assert!(
                    b.lower[j] <= env.conv_preact[i].min[j] + 1e-9,
                    "seed {seed} conv {i} neuron {j}"
                );
                assert!(b.upper[j] >= env.conv_preact[i].max[j] - 1e-9);
            }
        }
        for (i, mp) in cache.maxpool.iter().enumerate() {
            for j in 0..mp.diff_lower.len() {
                assert!(mp.diff_lower[j] <= env.diffs[i].min[j] + 1e-9);
                assert!(mp.diff_upper[j] >= env.diffs[i].max[j] - 1e-9);
            }
            for j in 0..mp.running_lower.len() {
                assert!(mp.running_lower[j] <= env.running[i].min[j] + 1e-9);
                assert!(mp.running_upper[j] >= env.running[i].max[j] - 1e-9);
            }
        }
        for (i, b) in cache.fc_preact.iter().enumerate() {
            for j in 0..b.len() {
                assert!(b.lower[j] <= env.fc_preact[i].min[j] + 1e-9);
                assert!(b.upper[j] >= env.fc_preact[i].max[j] - 1e-9);
            }
        }
    }
}

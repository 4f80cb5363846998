//! Robustness verdicts per image and aggregate metrics per dataset.

use crate::bounds::BoundsCache;
use crate::dual::{dual_bound, RelaxationSlopes, SlopeStrategy};
use crate::error::{CapmError, Result};
use crate::net::{network_forward, NetworkSpec};
use crate::tensor::FeatureMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Outcome of verifying one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    /// Correctly classified and every target margin is strictly positive.
    Verified,
    /// Correctly classified but at least one margin is not positive; the
    /// certificate is sound but incomplete, so this is not an attack claim.
    Unknown,
    /// The clean prediction already differs from the label.
    Misclassified,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Verified => "VERIFIED",
            Verdict::Unknown => "UNKNOWN",
            Verdict::Misclassified => "MISCLASSIFIED",
        }
    }
}

/// Margin of one target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMargin {
    pub target: usize,
    pub margin: f64,
}

/// Per-image verification outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub verdict: Verdict,
    /// Certified margin per target class; empty when misclassified.
    pub margins: Vec<TargetMargin>,
    pub min_margin: Option<f64>,
    pub time_ms: f64,
}

/// Dataset-level report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub epsilon: f64,
    pub images: Vec<ImageResult>,
    pub total: usize,
    pub correctly_classified: usize,
    pub verified: usize,
    /// verified / correctly_classified; 0 when nothing is correctly
    /// classified.
    pub verified_robustness: f64,
    pub avg_time_ms: f64,
}

/// One work item: an image, its per-pixel perturbation radii, and its label.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: FeatureMap,
    pub epsilon: Vec<f64>,
    pub label: usize,
}

/// Certified margin for a single target class.
///
/// The seed is d = e_label - e_target; a positive result proves the target
/// cannot overtake the true class anywhere in the relaxed polytope.
pub fn verify_target(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    label: usize,
    target: usize,
    cache: &BoundsCache,
    slopes: &RelaxationSlopes,
) -> Result<f64> {
    if label == target {
        return Err(CapmError::InvalidArgument(
            "target class equals the true label".into(),
        ));
    }
    let k = net.class_count();
    if label >= k || target >= k {
        return Err(CapmError::LabelOutOfRange {
            label: label.max(target),
            classes: k,
        });
    }
    let mut d = vec![0.0; k];
    d[label] = 1.0;
    d[target] = -1.0;
    crate::dual::dual_bound_single(net, x, eps, &d, cache, slopes)
}

/// Clean prediction with conservative tie handling: `Some(class)` only when
/// the argmax is unique.
pub fn predict(logits: &[f64]) -> Option<usize> {
    let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = logits.iter().enumerate().filter(|(_, &v)| v == best);
    let first = winners.next()?.0;
    if winners.next().is_some() {
        None
    } else {
        Some(first)
    }
}

/// Verify one image against every target class.
///
/// The bounds cache is computed once and shared across all targets; the
/// per-target dual passes run as one batched backward pass.
pub fn verify_image(
    net: &NetworkSpec,
    x: &FeatureMap,
    eps: &[f64],
    label: usize,
    strategy: SlopeStrategy,
) -> Result<(Verdict, usize, Vec<TargetMargin>)> {
    let k = net.class_count();
    if label >= k {
        return Err(CapmError::LabelOutOfRange { label, classes: k });
    }
    let logits = network_forward(net, x)?;
    let predicted = match predict(&logits) {
        Some(p) => p,
        None => {
            // ties are conservatively treated as a misclassification
            return Ok((
                Verdict::Misclassified,
                logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0),
                Vec::new(),
            ));
        }
    };
    if predicted != label {
        return Ok((Verdict::Misclassified, predicted, Vec::new()));
    }

    let cache = BoundsCache::compute(net, x, eps)?;
    let slopes = RelaxationSlopes::from_strategy(&cache, strategy);
    let targets: Vec<usize> = (0..k).filter(|&t| t != label).collect();
    let mut seeds = Array2::zeros((k, targets.len()));
    for (col, &t) in targets.iter().enumerate() {
        seeds[(label, col)] = 1.0;
        seeds[(t, col)] = -1.0;
    }
    let bounds = dual_bound(net, x, eps, &seeds, &cache, &slopes)?;
    let margins: Vec<TargetMargin> = targets
        .iter()
        .zip(&bounds)
        .map(|(&target, &margin)| TargetMargin { target, margin })
        .collect();
    let verdict = if margins.iter().all(|m| m.margin > 0.0) {
        Verdict::Verified
    } else {
        Verdict::Unknown
    };
    Ok((verdict, predicted, margins))
}

fn verify_item(net: &NetworkSpec, item: &DatasetItem, index: usize, strategy: SlopeStrategy) -> Result<ImageResult> {
    let start = Instant::now();
    let (verdict, predicted, margins) =
        verify_image(net, &item.image, &item.epsilon, item.label, strategy)?;
    let min_margin = margins
        .iter()
        .map(|m| m.margin)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    Ok(ImageResult {
        index,
        label: item.label,
        predicted,
        verdict,
        margins,
        min_margin,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Verify a dataset, fanning images out over `threads` workers (0 picks the
/// rayon default). Results are independent of the thread count.
pub fn run_dataset(
    net: &NetworkSpec,
    items: &[DatasetItem],
    epsilon: f64,
    strategy: SlopeStrategy,
    threads: usize,
) -> Result<VerificationReport> {
    if items.is_empty() {
        return Err(CapmError::EmptyDataset);
    }
    let results: Result<Vec<ImageResult>> = if threads == 1 {
        items
            .iter()
            .enumerate()
            .map(|(i, item)| verify_item(net, item, i, strategy))
            .collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CapmError::InvalidArgument(e.to_string()))?;
        pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, item)| verify_item(net, item, i, strategy))
                .collect()
        })
    };
    let images = results?;
    let total = images.len();
    let correctly_classified = images
        .iter()
        .filter(|r| r.verdict != Verdict::Misclassified)
        .count();
    let verified = images
        .iter()
        .filter(|r| r.verdict == Verdict::Verified)
        .count();
    let verified_robustness = if correctly_classified == 0 {
        0.0
    } else {
        verified as f64 / correctly_classified as f64
    };
    let avg_time_ms = images.iter().map(|r| r.time_ms).sum::<f64>() / total as f64;
    Ok(VerificationReport {
        epsilon,
        images,
        total,
        correctly_classified,
        verified,
        verified_robustness,
        avg_time_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::uniform_epsilon;
    use crate::oracle::{random_input, random_network, RandomNetConfig};

    #[test]
    fn predict_requires_unique_argmax() {
        assert_eq!(predict(&[1.0, 3.0, 2.0]), Some(1));
        assert_eq!(predict(&[3.0, 3.0, 2.0]), None);
        assert_eq!(predict(&[5.0]), Some(0));
    }

    #[test]
    fn verify_target_rejects_self_target() {
        let net = random_network(&RandomNetConfig::default(), 3);
        let x = random_input(&net, 1);
        let eps = uniform_epsilon(&net, 0.0);
        let cache = BoundsCache::compute(&net, &x, &eps).unwrap();
        let slopes = RelaxationSlopes::from_strategy(&cache, SlopeStrategy::UOverSpan);
        let err = verify_target(&net, &x, &eps, 1, 1, &cache, &slopes).unwrap_err();
        assert!(matches!(err, CapmError::InvalidArgument(_)));
    }

    #[test]
    fn zero_epsilon_correct_image_verifies() {
        let net = random_network(&RandomNetConfig::default(), 8);
        let x = random_input(&net, 4);
        let logits = network_forward(&net, &x).unwrap();
        let label = predict(&logits).unwrap();
        let eps = uniform_epsilon(&net, 0.0);
        let (verdict, predicted, margins) =
            verify_image(&net, &x, &eps, label, SlopeStrategy::UOverSpan).unwrap();
        assert_eq!(predicted, label);
        assert_eq!(verdict, Verdict::Verified);
        // at eps = 0 every margin equals the exact logit difference
        for m in &margins {
            let exact = logits[label] - logits[m.target];
            assert!((m.margin - exact).abs() <= 1e-9 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn misclassified_short_circuits() {
        let net = random_network(&RandomNetConfig::default(), 8);
        let x = random_input(&net, 4);
        let logits = network_forward(&net, &x).unwrap();
        let label = predict(&logits).unwrap();
        let wrong = (label + 1) % net.class_count();
        let eps = uniform_epsilon(&net, 0.0);
        let (verdict, _, margins) =
            verify_image(&net, &x, &eps, wrong, SlopeStrategy::UOverSpan).unwrap();
        assert_eq!(verdict, Verdict::Misclassified);
        assert!(margins.is_empty());
    }

    #[test]
    fn verdict_thresholds() {
        // margins (0.5, 1.2, 0.3) -> VERIFIED; (0.5, -0.1) -> UNKNOWN
        let all_pos = [0.5, 1.2, 0.3];
        assert!(all_pos.iter().all(|&m| m > 0.0));
        let mixed = [0.5, -0.1];
        assert!(!mixed.iter().all(|&m| m > 0.0));
    }
}

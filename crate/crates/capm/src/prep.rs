//! Input preparation: normalization and perturbation boxes.

use crate::error::{CapmError, Result};
use crate::net::NormalizationConfig;
use crate::tensor::FeatureMap;

/// Normalize an image and map per-pixel raw radii into normalized space:
/// pixel' = (pixel - mean_c) / std_c and eps'_c = eps / std_c.
///
/// The perturbation box is defined in raw pixel space and transformed
/// affinely, so its image is again a box around the normalized pixel.
pub fn normalize(
    image: &FeatureMap,
    cfg: &NormalizationConfig,
    eps_raw: &[f64],
) -> Result<(FeatureMap, Vec<f64>)> {
    cfg.validate(image.channels)?;
    if eps_raw.len() != image.len() {
        return Err(CapmError::ShapeMismatch(format!(
            "epsilon has {} entries, image has {}",
            eps_raw.len(),
            image.len()
        )));
    }
    let plane = image.side * image.side;
    let mut out = image.clone();
    let mut eps = eps_raw.to_vec();
    for c in 0..image.channels {
        let (mean, std) = (cfg.mean[c], cfg.std[c]);
        for i in c * plane..(c + 1) * plane {
            out.data[i] = (out.data[i] - mean) / std;
            eps[i] /= std;
        }
    }
    Ok((out, eps))
}

/// Build the (center, radius) pair of one image's perturbation box in
/// normalized coordinates.
///
/// * `epsilon_normalized = false`: `eps` is a radius in raw pixel space; the
///   box is optionally clipped to the valid range [0, 1] (which recenters
///   it), then both center and radius pass through the normalization.
/// * `epsilon_normalized = true`: `eps` is already a radius in normalized
///   space; only the center is normalized and clipping is rejected.
pub fn perturbation_box(
    image: &FeatureMap,
    cfg: &NormalizationConfig,
    eps: f64,
    clip: bool,
    epsilon_normalized: bool,
) -> Result<(FeatureMap, Vec<f64>)> {
    if eps < 0.0 {
        return Err(CapmError::NegativeInput(format!("epsilon {eps} < 0")));
    }
    if epsilon_normalized {
        if clip {
            return Err(CapmError::InvalidArgument(
                "--clip requires a raw-space epsilon".into(),
            ));
        }
        let zero = vec![0.0; image.len()];
        let (center, _) = normalize(image, cfg, &zero)?;
        return Ok((center, vec![eps; image.len()]));
    }
    let mut center = image.clone();
    let mut radius = vec![eps; image.len()];
    if clip {
        for i in 0..image.len() {
            let lo = (image.data[i] - eps).max(0.0);
            let hi = (image.data[i] + eps).min(1.0);
            center.data[i] = 0.5 * (lo + hi);
            radius[i] = 0.5 * (hi - lo);
        }
    }
    normalize(&center, cfg, &radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_constants() {
        let cfg = NormalizationConfig {
            mean: vec![0.5],
            std: vec![0.5],
        };
        let image = FeatureMap::from_vec(1, 1, vec![1.0]).unwrap();
        let (out, eps) = normalize(&image, &cfg, &[0.1]).unwrap();
        assert_eq!(out.data, vec![1.0]);
        assert_eq!(eps, vec![0.2]);
    }

    #[test]
    fn identity_normalization() {
        let cfg = NormalizationConfig::identity(1);
        let image = FeatureMap::from_vec(1, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (out, eps) = normalize(&image, &cfg, &[0.05; 4]).unwrap();
        assert_eq!(out, image);
        assert_eq!(eps, vec![0.05; 4]);
    }

    #[test]
    fn cifar_channel_mean_zeroes_out() {
        let cfg = NormalizationConfig {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        };
        let image = FeatureMap::from_vec(3, 1, vec![0.485, 0.456, 0.406]).unwrap();
        let (out, _) = normalize(&image, &cfg, &[0.0; 3]).unwrap();
        for v in out.data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_recenters_the_box() {
        let cfg = NormalizationConfig::identity(1);
        let image = FeatureMap::from_vec(1, 1, vec![0.05]).unwrap();
        let (center, radius) = perturbation_box(&image, &cfg, 0.1, true, false).unwrap();
        // raw box [max(0, -0.05), 0.15] = [0, 0.15]
        assert!((center.data[0] - 0.075).abs() < 1e-15);
        assert!((radius[0] - 0.075).abs() < 1e-15);
        let (center, radius) = perturbation_box(&image, &cfg, 0.1, false, false).unwrap();
        assert_eq!(center.data[0], 0.05);
        assert_eq!(radius[0], 0.1);
    }

    #[test]
    fn normalized_epsilon_skips_the_transform() {
        let cfg = NormalizationConfig {
            mean: vec![0.5],
            std: vec![0.5],
        };
        let image = FeatureMap::from_vec(1, 1, vec![0.75]).unwrap();
        let (center, radius) = perturbation_box(&image, &cfg, 0.2, false, true).unwrap();
        assert_eq!(center.data[0], 0.5);
        assert_eq!(radius, vec![0.2]);
        assert!(perturbation_box(&image, &cfg, 0.2, true, true).is_err());
    }
}

//! Square 3-D activation tensors indexed by (channel, row, col).

use crate::error::{CapmError, Result};

/// A real-valued feature map with `channels` square planes of side `side`.
///
/// Storage is flat row-major: index (c, m, n) lives at `(c * side + m) * side + n`,
/// the same ordering the flatten operation exposes as a vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            side,
            data: vec![0.0; channels * side * side],
        }
    }

    pub fn from_vec(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * side * side {
            return Err(CapmError::ShapeMismatch(format!(
                "feature map {}x{}x{} needs {} values, got {}",
                channels,
                side,
                side,
                channels * side * side,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            side,
            data,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, m: usize, n: usize) -> usize {
        (c * self.side + m) * self.side + n
    }

    #[inline]
    pub fn get(&self, c: usize, m: usize, n: usize) -> f64 {
        self.data[self.idx(c, m, n)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, m: usize, n: usize, v: f64) {
        let i = self.idx(c, m, n);
        self.data[i] = v;
    }

    /// Zero-pad all four spatial boundaries by `p`.
    ///
    /// The interior equals the input and every padded index is exactly zero.
    pub fn pad(&self, p: usize) -> FeatureMap {
        if p == 0 {
            return self.clone();
        }
        let out_side = self.side + 2 * p;
        let mut out = FeatureMap::zeros(self.channels, out_side);
        for c in 0..self.channels {
            for m in 0..self.side {
                for n in 0..self.side {
                    out.set(c, m + p, n + p, self.get(c, m, n));
                }
            }
        }
        out
    }

    /// Flatten to a vector with index a = c*side*side + m*side + n.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(channels: usize, side: usize, v: Vec<f64>) -> Result<FeatureMap> {
        FeatureMap::from_vec(channels, side, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_centers_values() {
        let m = FeatureMap::from_vec(1, 1, vec![5.0]).unwrap();
        let p = m.pad(1);
        assert_eq!(p.side, 3);
        assert_eq!(p.get(0, 1, 1), 5.0);
        let total: f64 = p.data.iter().sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn pad_zero_is_identity() {
        let m = FeatureMap::from_vec(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.pad(0), m);
    }

    #[test]
    fn pad_two_by_two() {
        let m = FeatureMap::from_vec(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = m.pad(1);
        assert_eq!(p.side, 4);
        assert_eq!(p.get(0, 1, 1), 1.0);
        assert_eq!(p.get(0, 1, 2), 2.0);
        assert_eq!(p.get(0, 2, 1), 3.0);
        assert_eq!(p.get(0, 2, 2), 4.0);
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(0, 3, 3), 0.0);
    }

    #[test]
    fn flatten_ordering() {
        let m = FeatureMap::from_vec(2, 1, vec![7.0, 9.0]).unwrap();
        assert_eq!(m.flatten(), vec![7.0, 9.0]);
        let m = FeatureMap::from_vec(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let m = FeatureMap::from_vec(2, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let v = m.flatten();
        let back = FeatureMap::unflatten(2, 2, v).unwrap();
        assert_eq!(back, m);
    }
}

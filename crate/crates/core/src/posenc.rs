//! 2-D sinusoidal patch position embedding.
//!
//! Each patch centroid `(h, v)` (normalized to the scene's bounding box) is
//! encoded per axis with interleaved sines and cosines, and the two axis
//! encodings are summed:
//!
//! ```text
//! E[j, 2k]   = sin(h_j * n / 10000^(2k / d)) + sin(v_j * n / 10000^(2k / d))
//! E[j, 2k+1] = cos(h_j * n / 10000^(2k / d)) + cos(v_j * n / 10000^(2k / d))
//! ```
//!
//! where `n` is the number of patches and `d` the embedding width. The
//! embedding is constant with respect to every trainable parameter.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

/// Normalized `(horizontal, vertical)` patch centroids, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchCentroids(Vec<[f64; 2]>);

impl PatchCentroids {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Config("a point cloud needs at least one patch".into()));
        }
        for (j, c) in coords.iter().enumerate() {
            for (axis, &x) in c.iter().enumerate() {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain {
                        op: "patch centroid",
                        index: 2 * j + axis,
                        value: x,
                    });
                }
            }
        }
        Ok(Self(coords))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// Reorders centroids so that `out[i] = self[order[i]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self(order.iter().map(|&i| self.0[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositionConfig {
    /// Multiply coordinates by the patch count before encoding.
    pub scale_by_token_count: bool,
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self {
            scale_by_token_count: true,
        }
    }
}

/// Returns the `p_n × d_c` embedding for `centroids`.
pub fn patch_position_embedding(
    centroids: &PatchCentroids,
    d_c: usize,
    config: PositionConfig,
) -> Result<DenseArray> {
    if d_c == 0 || d_c % 2 != 0 {
        return Err(Error::Config(format!(
            "position embedding width must be even and positive, got {d_c}"
        )));
    }
    let p_n = centroids.len();
    let scale = if config.scale_by_token_count {
        p_n as f64
    } else {
        1.0
    };
    let inv_freq: Vec<f64> = (0..d_c / 2)
        .map(|k| libm::pow(10000.0, -((2 * k) as f64) / d_c as f64))
        .collect();
    let mut values = Vec::with_capacity(p_n * d_c);
    for &[h, v] in centroids.coords() {
        for &w in &inv_freq {
            let (x, y) = (h * scale * w, v * scale * w);
            values.push(libm::sin(x) + libm::sin(y));
            values.push(libm::cos(x) + libm::cos(y));
        }
    }
    DenseArray::new([p_n, d_c], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn origin_row() {
        let c = PatchCentroids::new(vec![[0.0, 0.0]]).unwrap();
        let e = patch_position_embedding(&c, 4, PositionConfig::default()).unwrap();
        assert_eq!(e.values(), &[0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn half_horizontal_four_patches() {
        let c = PatchCentroids::new(vec![[0.5, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let e = patch_position_embedding(&c, 2, PositionConfig::default()).unwrap();
        assert_abs_diff_eq!(e.get(0, 0), 0.909_297_426_825_681_7, epsilon = 1e-12);
        assert_abs_diff_eq!(e.get(0, 1), -0.416_146_836_547_142_4 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_rows_are_distinct_and_bounded() {
        let mut coords = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                coords.push([i as f64 / 15.0, j as f64 / 15.0]);
            }
        }
        let c = PatchCentroids::new(coords).unwrap();
        let e = patch_position_embedding(&c, 32, PositionConfig::default()).unwrap();
        assert!(e.values().iter().all(|v| v.abs() <= 2.0));
        let mut min_dist = f64::INFINITY;
        for a in 0..e.rows() {
            for b in (a + 1)..e.rows() {
                let (ca, cb) = (c.coords()[a], c.coords()[b]);
                if ca == [cb[1], cb[0]] {
                    continue;
                }
                let d: f64 = e.row(a).iter().zip(e.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0, "min squared distance {min_dist}");
    }

    #[test]
    fn summed_axes_cannot_tell_mirrored_centroids_apart() {
        let c = PatchCentroids::new(vec![[0.2, 0.7], [0.7, 0.2]]).unwrap();
        let e = patch_position_embedding(&c, 8, PositionConfig::default()).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn rejects_odd_width_and_out_of_range_coords() {
        let c = PatchCentroids::new(vec![[0.1, 0.2]]).unwrap();
        assert!(matches!(
            patch_position_embedding(&c, 3, PositionConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PatchCentroids::new(vec![[0.1, 1.5]]),
            Err(Error::Domain { index: 1, .. })
        ));
    }
}

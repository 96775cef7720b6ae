//! Anchor-based spatial token filtering.
//!
//! A frame's `√N x √N` score map is covered by overlapping `√K x √K`
//! anchors at stride `γ`. Anchor scores are token-score means; picking one
//! anchor with a Top-1 selector keeps `K` spatially contiguous tokens in
//! raster order.

use crate::error::{ReefError, Result};
use crate::tensor::Matrix;
use crate::topk::{topk_train_select, PerturbConfig, PerturbedCache, SelectMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorGrid {
    pub n_side: usize,
    pub k_side: usize,
    pub stride: usize,
    /// Flat token indices of each anchor, raster order within and across
    /// anchors.
    pub anchors: Vec<Vec<usize>>,
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl AnchorGrid {
    pub fn n_tokens(&self) -> usize {
        self.n_side * self.n_side
    }

    pub fn k_tokens(&self) -> usize {
        self.k_side * self.k_side
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Anchors per side, `(√N − √K)/γ + 1`.
    pub fn per_side(&self) -> usize {
        (self.n_side - self.k_side) / self.stride + 1
    }

    /// `H x N` matrix whose rows average the tokens of each anchor.
    pub fn pooling_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_anchors(), self.n_tokens());
        let w = 1.0 / self.k_tokens() as f32;
        for (h, anchor) in self.anchors.iter().enumerate() {
            for &i in anchor {
                m.set(h, i, w);
            }
        }
        m
    }
}

pub fn build_anchor_grid(n: usize, k: usize, gamma: usize) -> Result<AnchorGrid> {
    let n_side = exact_sqrt(n)
        .ok_or_else(|| ReefError::Argument(format!("token count {n} is not a perfect square")))?;
    let k_side = exact_sqrt(k)
        .ok_or_else(|| ReefError::Argument(format!("anchor size {k} is not a perfect square")))?;
    if k_side == 0 || k_side > n_side {
        return Err(ReefError::Argument(format!(
            "anchor side {k_side} must be in 1..={n_side}"
        )));
    }
    if gamma == 0 || (n_side - k_side) % gamma != 0 {
        return Err(ReefError::Argument(format!(
            "stride {gamma} does not divide {} = √N − √K",
            n_side - k_side
        )));
    }
    let per_side = (n_side - k_side) / gamma + 1;
    let mut anchors = Vec::with_capacity(per_side * per_side);
    for ay in 0..per_side {
        for ax in 0..per_side {
            let (y0, x0) = (ay * gamma, ax * gamma);
            let mut idx = Vec::with_capacity(k_side * k_side);
            for y in y0..y0 + k_side {
                for x in x0..x0 + k_side {
                    idx.push(y * n_side + x);
                }
            }
            anchors.push(idx);
        }
    }
    Ok(AnchorGrid {
        n_side,
        k_side,
        stride: gamma,
        anchors,
    })
}

/// Mean score inside each anchor of a `√N x √N` map.
pub fn anchor_scores(map: &Matrix, grid: &AnchorGrid) -> Result<Vec<f32>> {
    if map.shape() != (grid.n_side, grid.n_side) {
        return Err(ReefError::shape(
            "anchor_scores",
            format!("map {:?}, grid side {}", map.shape(), grid.n_side),
        ));
    }
    let flat = map.data();
    Ok(grid
        .anchors
        .iter()
        .map(|a| {
            let s: f64 = a.iter().map(|&i| flat[i] as f64).sum();
            (s / a.len() as f64) as f32
        })
        .collect())
}

#[derive(Clone, Debug)]
pub enum AnchorChoice {
    Hard(usize),
    /// Per-anchor weights of the smoothed Top-1 selector, with its cache.
    Smoothed {
        weights: Vec<f32>,
        cache: PerturbedCache,
    },
}

/// Filters one frame to the tokens of its best anchor.
///
/// Eval mode gathers the arg-max anchor. Train mode returns
/// `Σ_h Y[h] · frame[anchor_h]`, the convex combination implied by the
/// smoothed selector.
pub fn stf_select(
    frame: &Matrix,
    spatial_scores: &[f32],
    grid: &AnchorGrid,
    mode: SelectMode,
    cfg: &PerturbConfig,
) -> Result<(Matrix, AnchorChoice)> {
    let n = grid.n_tokens();
    if frame.rows() != n || spatial_scores.len() != n {
        return Err(ReefError::Argument(format!(
            "grid expects {n} tokens, frame has {} and scores {}",
            frame.rows(),
            spatial_scores.len()
        )));
    }
    let map = Matrix::new(grid.n_side, grid.n_side, spatial_scores.to_vec())?;
    let pooled = anchor_scores(&map, grid)?;
    let (y, cache) = topk_train_select(&pooled, 1, cfg, mode)?;
    match cache {
        None => {
            let h = y.indices().expect("eval selection is hard")[0];
            Ok((frame.gather_rows(&grid.anchors[h])?, AnchorChoice::Hard(h)))
        }
        Some(cache) => {
            let weights: Vec<f32> = y.matrix().data().to_vec();
            let mut out = Matrix::zeros(grid.k_tokens(), frame.cols());
            for (h, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (r, &src) in grid.anchors[h].iter().enumerate() {
                    for (o, &v) in out.row_mut(r).iter_mut().zip(frame.row(src)) {
                        *o += w * v;
                    }
                }
            }
            Ok((out, AnchorChoice::Smoothed { weights, cache }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_sample, SeededRng};

    fn cfg(sigma: f32) -> PerturbConfig {
        PerturbConfig::new(sigma, 200, SeededRng::new(1, 0)).unwrap()
    }

    #[test]
    fn anchor_counts() {
        assert_eq!(build_anchor_grid(16, 16, 1).unwrap().n_anchors(), 1);
        assert_eq!(build_anchor_grid(16, 4, 1).unwrap().n_anchors(), 9);
        assert_eq!(build_anchor_grid(256, 100, 2).unwrap().n_anchors(), 16);
        let full = build_anchor_grid(16, 16, 1).unwrap();
        assert_eq!(full.anchors[0], (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_grids() {
        assert!(build_anchor_grid(15, 4, 1).is_err());
        assert!(build_anchor_grid(16, 5, 1).is_err());
        assert!(build_anchor_grid(16, 25, 1).is_err());
        assert!(build_anchor_grid(256, 100, 4).is_err());
        assert!(build_anchor_grid(16, 4, 0).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let grid = build_anchor_grid(16, 4, 1).unwrap();
        let s = anchor_scores(&Matrix::filled(4, 4, 0.3), &grid).unwrap();
        assert!(s.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn single_hot_token() {
        // K = 4, γ = 2 on a 4x4 map: four disjoint 2x2 anchors.
        let grid = build_anchor_grid(16, 4, 2).unwrap();
        let mut map = Matrix::zeros(4, 4);
        map.set(2, 3, 2.0);
        let s = anchor_scores(&map, &grid).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn pooling_matches_brute_force() {
        let grid = build_anchor_grid(36, 9, 1).unwrap();
        let map = gaussian_sample(SeededRng::new(3, 0), 6, 6);
        let s = anchor_scores(&map, &grid).unwrap();
        let pm = grid.pooling_matrix();
        let via_matrix = pm.matmul(&Matrix::column_vector(map.data())).unwrap();
        let mut h = 0;
        for y0 in 0..4 {
            for x0 in 0..4 {
                let mut acc = 0f64;
                for y in y0..y0 + 3 {
                    for x in x0..x0 + 3 {
                        acc += map.get(y, x) as f64;
                    }
                }
                assert!((s[h] as f64 - acc / 9.0).abs() < 1e-6);
                assert!((via_matrix.get(h, 0) as f64 - acc / 9.0).abs() < 1e-6);
                h += 1;
            }
        }
    }

    #[test]
    fn membership_and_coverage() {
        for (n, k, g) in [
            (16, 4, 1),
            (16, 4, 2),
            (64, 25, 1),
            (256, 100, 2),
            (49, 9, 2),
        ] {
            let grid = build_anchor_grid(n, k, g).unwrap();
            let total: usize = grid.anchors.iter().map(|a| a.len()).sum();
            assert_eq!(total, grid.n_anchors() * k);
            let mut seen = vec![false; n];
            for a in &grid.anchors {
                assert!(a.windows(2).all(|w| w[0] < w[1]));
                for &i in a {
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "uncovered token for {n},{k},{g}");
        }
    }

    #[test]
    fn full_anchor_is_identity_filter() {
        let grid = build_anchor_grid(9, 9, 1).unwrap();
        let frame = gaussian_sample(SeededRng::new(5, 0), 9, 3);
        let scores = gaussian_sample(SeededRng::new(5, 1), 1, 9);
        for mode in [SelectMode::Eval, SelectMode::Train] {
            let (out, _) = stf_select(&frame, scores.data(), &grid, mode, &cfg(0.1)).unwrap();
            assert_eq!(out, frame);
        }
    }

    #[test]
    fn eval_picks_dominant_anchor() {
        let grid = build_anchor_grid(16, 4, 2).unwrap();
        let frame = gaussian_sample(SeededRng::new(6, 0), 16, 3);
        let mut scores = vec![0.1f32; 16];
        for &i in &grid.anchors[2] {
            scores[i] = 0.9;
        }
        let (out, choice) =
            stf_select(&frame, &scores, &grid, SelectMode::Eval, &cfg(0.1)).unwrap();
        assert!(matches!(choice, AnchorChoice::Hard(2)));
        assert_eq!(out, frame.gather_rows(&grid.anchors[2]).unwrap());
    }

    #[test]
    fn train_converges_to_eval_for_small_sigma() {
        let grid = build_anchor_grid(16, 4, 1).unwrap();
        let frame = gaussian_sample(SeededRng::new(7, 0), 16, 4);
        let scores = gaussian_sample(SeededRng::new(7, 1), 1, 16);
        let (hard, _) =
            stf_select(&frame, scores.data(), &grid, SelectMode::Eval, &cfg(1e-6)).unwrap();
        let (soft, _) =
            stf_select(&frame, scores.data(), &grid, SelectMode::Train, &cfg(1e-6)).unwrap();
        for (a, b) in hard.data().iter().zip(soft.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_mismatched_frame() {
        let grid = build_anchor_grid(16, 4, 1).unwrap();
        let frame = Matrix::zeros(9, 2);
        assert!(stf_select(&frame, &[0.0; 9], &grid, SelectMode::Eval, &cfg(0.1)).is_err());
    }
}

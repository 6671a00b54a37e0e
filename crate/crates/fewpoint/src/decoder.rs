//! Two-stage decoder: a fully-connected coarse generator, one PointNet++
//! set-abstraction level over the coarse cloud, and a folding layer that
//! deforms a small 2-D grid around each coarse point into the dense
//! output.

use crate::autodiff::{concat_cols, concat_rows, Tensor};
use crate::error::{Error, Result};
use crate::metrics::ball_query;
use crate::nn::{Linear, Mlp};
use crate::pointcloud::{dist_sq, farthest_point_sample, PointCloud};
use crate::rng::Rng;

/// Half-extent of the folding grid in each direction (PCN's choice).
pub const FOLD_GRID_HALF: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    /// Number of coarse points.
    pub coarse_n: usize,
    /// Folding grid side g; the detail cloud has coarse_n · g² points.
    pub grid_side: usize,
    /// FPS centroid count for set abstraction.
    pub sa_centroids: usize,
    /// Ball-query radius in normalized units.
    pub sa_radius: f64,
    /// Neighbors per ball.
    pub sa_k: usize,
    /// Width of per-point local features.
    pub local_dim: usize,
    /// Hidden widths of the coarse generator stack (two hidden layers).
    pub coarse_hidden: [usize; 2],
    /// Hidden widths of the folding MLP.
    pub fold_hidden: [usize; 2],
    pub leaky_slope: f64,
    /// Whether local PointNet++ features feed the folding layer
    /// (ablation toggle).
    pub use_local_features: bool,
}

impl DecoderConfig {
    pub fn full() -> Self {
        DecoderConfig {
            coarse_n: 1024,
            grid_side: 4,
            sa_centroids: 512,
            sa_radius: 0.25,
            sa_k: 8,
            local_dim: 128,
            coarse_hidden: [1024, 1024],
            fold_hidden: [512, 512],
            leaky_slope: 0.2,
            use_local_features: true,
        }
    }

    pub fn desk() -> Self {
        DecoderConfig {
            coarse_n: 32,
            grid_side: 4,
            sa_centroids: 16,
            sa_radius: 0.25,
            sa_k: 8,
            local_dim: 16,
            coarse_hidden: [128, 128],
            fold_hidden: [64, 64],
            leaky_slope: 0.2,
            use_local_features: true,
        }
    }

    pub fn detail_n(&self) -> usize {
        self.coarse_n * self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_n == 0 || self.grid_side == 0 {
            return Err(Error::contract("decoder: coarse_n and grid_side must be positive"));
        }
        if self.sa_centroids == 0 || self.sa_centroids > self.coarse_n {
            return Err(Error::contract(format!(
                "decoder: sa_centroids {} must be in [1, coarse_n {}]",
                self.sa_centroids, self.coarse_n
            )));
        }
        if self.sa_k == 0 || self.sa_radius <= 0.0 || self.local_dim == 0 {
            return Err(Error::contract("decoder: sa_k, sa_radius, local_dim must be positive"));
        }
        Ok(())
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    mgfv_dim: usize,
    coarse_mlp: Mlp,
    group_mlp: Mlp,
    fold_mlp: Mlp,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, mgfv_dim: usize, rng: &mut Rng) -> Result<Decoder> {
        cfg.validate()?;
        let coarse_dims = [
            mgfv_dim,
            cfg.coarse_hidden[0],
            cfg.coarse_hidden[1],
            cfg.coarse_n * 3,
        ];
        let coarse_mlp = Mlp::new(&coarse_dims, cfg.leaky_slope, rng);
        // shared MLP on (neighbor − centroid) offsets
        let group_dims = [3, cfg.local_dim, cfg.local_dim];
        let group_mlp = Mlp::new(&group_dims, cfg.leaky_slope, rng);
        let fold_in = 2 + 3 + if cfg.use_local_features { cfg.local_dim } else { 0 } + mgfv_dim;
        let fold_dims = [fold_in, cfg.fold_hidden[0], cfg.fold_hidden[1], 3];
        let fold_mlp = Mlp::new(&fold_dims, cfg.leaky_slope, rng);
        Ok(Decoder {
            cfg,
            mgfv_dim,
            coarse_mlp,
            group_mlp,
            fold_mlp,
        })
    }

    pub fn mgfv_dim(&self) -> usize {
        self.mgfv_dim
    }

    /// Coarse skeleton from the global feature: a three-layer
    /// fully-connected stack reshaped to [coarse_n, 3].
    pub fn coarse_generate(&self, mgfv: &Tensor) -> Result<Tensor> {
        if mgfv.rank() != 1 || mgfv.len() != self.mgfv_dim {
            return Err(Error::ShapeMismatch {
                op: "coarse_generate",
                lhs: mgfv.shape(),
                rhs: vec![self.mgfv_dim],
            });
        }
        let flat = self.coarse_mlp.forward(mgfv)?;
        flat.reshape(&[self.cfg.coarse_n, 3])
    }

    /// One set-abstraction level over the coarse cloud: FPS centroids,
    /// ball-query groups, a shared MLP on centered offsets, max-pool per
    /// group, then nearest-centroid propagation back to every coarse
    /// point. Returns [coarse_n, local_dim].
    pub fn local_features(&self, coarse: &Tensor) -> Result<Tensor> {
        if coarse.rank() != 2 || coarse.cols() != 3 {
            return Err(Error::contract(format!(
                "local_features expects [n, 3], got {:?}",
                coarse.shape()
            )));
        }
        let coarse_points = PointCloud::from_flat(&coarse.to_vec())?;
        let centroid_idx =
            farthest_point_sample(&coarse_points, self.cfg.sa_centroids, 0)?;
        let centroids = coarse_points.select(&centroid_idx)?;
        let groups = ball_query(&centroids, &coarse_points, self.cfg.sa_k, self.cfg.sa_radius)?;

        // per-centroid pooled feature rows
        let mut centroid_rows = Vec::with_capacity(centroid_idx.len());
        for (c, group) in centroid_idx.iter().zip(&groups) {
            let neighbors = coarse.gather_rows(group)?;
            let center = coarse.gather_rows(&vec![*c; group.len()])?;
            let offsets = neighbors.sub(&center)?;
            let feats = self.group_mlp.forward_all_activated(&offsets)?;
            let pooled = feats.max_pool_points()?;
            centroid_rows.push(pooled.reshape(&[1, self.cfg.local_dim])?);
        }
        let centroid_feats = concat_rows(&centroid_rows)?;

        // nearest-centroid propagation
        let mut nearest = Vec::with_capacity(coarse_points.len());
        for p in coarse_points.points() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.points().iter().enumerate() {
                let d = dist_sq(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            nearest.push(best);
        }
        centroid_feats.gather_rows(&nearest)
    }

    /// Folding grid node coordinates, [g², 2], spanning
    /// [−FOLD_GRID_HALF, FOLD_GRID_HALF]².
    fn grid_nodes(&self) -> Tensor {
        let g = self.cfg.grid_side;
        let mut values = Vec::with_capacity(g * g * 2);
        for i in 0..g {
            for j in 0..g {
                let u = if g == 1 {
                    0.0
                } else {
                    -FOLD_GRID_HALF + 2.0 * FOLD_GRID_HALF * i as f64 / (g - 1) as f64
                };
                let v = if g == 1 {
                    0.0
                } else {
                    -FOLD_GRID_HALF + 2.0 * FOLD_GRID_HALF * j as f64 / (g - 1) as f64
                };
                values.push(u);
                values.push(v);
            }
        }
        Tensor::from_vec(values, &[g * g, 2]).unwrap()
    }

    /// Folding layer: for every coarse point and grid node, a shared MLP
    /// maps [u, v, coarse, local, mgfv] to a 3-D offset added to the
    /// coarse point. Returns [detail_n, 3].
    pub fn fold(&self, coarse: &Tensor, local: Option<&Tensor>, mgfv: &Tensor) -> Result<Tensor> {
        let g2 = self.cfg.grid_side * self.cfg.grid_side;
        let n = self.cfg.coarse_n;
        if coarse.rank() != 2 || coarse.rows() != n || coarse.cols() != 3 {
            return Err(Error::contract(format!(
                "fold expects coarse [{n}, 3], got {:?}",
                coarse.shape()
            )));
        }
        let grid = self.grid_nodes().tile_rows(n)?;
        let coarse_rep = coarse.repeat_interleave_rows(g2)?;
        let mgfv_rep = mgfv.broadcast_row(n * g2)?;
        let mut blocks = vec![grid, coarse_rep.clone()];
        match (self.cfg.use_local_features, local) {
            (true, Some(l)) => {
                if l.rank() != 2 || l.rows() != n || l.cols() != self.cfg.local_dim {
                    return Err(Error::contract(format!(
                        "fold expects local [{n}, {}], got {:?}",
                        self.cfg.local_dim,
                        l.shape()
                    )));
                }
                blocks.push(l.repeat_interleave_rows(g2)?);
            }
            (true, None) => {
                return Err(Error::contract("fold: local features required by config"))
            }
            (false, _) => {}
        }
        blocks.push(mgfv_rep);
        let fold_in = concat_cols(&blocks)?;
        let offsets = self.fold_mlp.forward(&fold_in)?;
        coarse_rep.add(&offsets)
    }

    /// Full decode: coarse skeleton, local features (when enabled), and
    /// the folded detail cloud.
    pub fn decode(&self, mgfv: &Tensor) -> Result<(Tensor, Tensor)> {
        let coarse = self.coarse_generate(mgfv)?;
        let detail = if self.cfg.use_local_features {
            let local = self.local_features(&coarse)?;
            self.fold(&coarse, Some(&local), mgfv)?
        } else {
            self.fold(&coarse, None, mgfv)?
        };
        Ok((coarse, detail))
    }

    /// Zeroes the last folding layer so the detail cloud reproduces each
    /// coarse point g² times; used by tests of the zero-offset contract.
    pub fn zero_fold_output_layer(&self) {
        let last = self.fold_mlp.layers.last().unwrap();
        last.w.set_values(&vec![0.0; last.w.len()]).unwrap();
        last.b.set_values(&vec![0.0; last.b.len()]).unwrap();
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.coarse_mlp.params(&format!("{prefix}.coarse"), out);
        self.group_mlp.params(&format!("{prefix}.group"), out);
        self.fold_mlp.params(&format!("{prefix}.fold"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Decoder, usize) {
        let cfg = DecoderConfig {
            coarse_n: 4,
            grid_side: 2,
            sa_centroids: 2,
            sa_radius: 0.5,
            sa_k: 2,
            local_dim: 5,
            coarse_hidden: [8, 8],
            fold_hidden: [8, 8],
            leaky_slope: 0.2,
            use_local_features: true,
        };
        let mut rng = Rng::seed_from(0);
        (Decoder::new(cfg, 6, &mut rng).unwrap(), 6)
    }

    #[test]
    fn coarse_shape_contract() {
        let (dec, m) = tiny();
        let mgfv = Tensor::from_vec(vec![0.1; m], &[m]).unwrap();
        let coarse = dec.coarse_generate(&mgfv).unwrap();
        assert_eq!(coarse.shape(), vec![4, 3]);
    }

    #[test]
    fn zero_mgfv_gives_zero_coarse() {
        let (dec, m) = tiny();
        let mgfv = Tensor::zeros(&[m]).unwrap();
        // biases are zero-initialized, so every FC layer maps 0 to 0
        let coarse = dec.coarse_generate(&mgfv).unwrap();
        assert!(coarse.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detail_count_is_coarse_times_grid_squared() {
        let (dec, m) = tiny();
        assert_eq!(dec.cfg.detail_n(), 16);
        let mgfv = Tensor::from_vec(vec![0.05; m], &[m]).unwrap();
        let (coarse, detail) = dec.decode(&mgfv).unwrap();
        assert_eq!(coarse.shape(), vec![4, 3]);
        assert_eq!(detail.shape(), vec![16, 3]);
        assert!(detail.all_finite());
    }

    #[test]
    fn local_feature_shape_and_translation_invariance() {
        let (dec, _) = tiny();
        let coarse = Tensor::from_points(&[
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.2, 0.0],
            [0.9, 0.9, 0.9],
        ])
        .unwrap();
        let feats = dec.local_features(&coarse).unwrap();
        assert_eq!(feats.shape(), vec![4, 5]);

        let shifted = Tensor::from_points(&[
            [5.0, -2.0, 1.0],
            [5.1, -2.0, 1.0],
            [5.0, -1.8, 1.0],
            [5.9, -1.1, 1.9],
        ])
        .unwrap();
        let feats2 = dec.local_features(&shifted).unwrap();
        let (a, b) = (feats.to_vec(), feats2.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn zeroed_fold_layer_repeats_coarse_points() {
        let (dec, m) = tiny();
        dec.zero_fold_output_layer();
        let mgfv = Tensor::from_vec((0..m).map(|i| 0.1 * i as f64).collect(), &[m]).unwrap();
        let (coarse, detail) = dec.decode(&mgfv).unwrap();
        let g2 = 4;
        let cv = coarse.to_vec();
        let dv = detail.to_vec();
        for i in 0..4 {
            for r in 0..g2 {
                for k in 0..3 {
                    assert_eq!(dv[(i * g2 + r) * 3 + k], cv[i * 3 + k]);
                }
            }
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let (dec, m) = tiny();
        let mgfv = Tensor::from_vec(vec![0.3; m], &[m]).unwrap();
        let (c1, d1) = dec.decode(&mgfv).unwrap();
        let (c2, d2) = dec.decode(&mgfv).unwrap();
        assert_eq!(c1.to_vec(), c2.to_vec());
        assert_eq!(d1.to_vec(), d2.to_vec());
    }

    #[test]
    fn coincident_point_contributes_zero_offset_row() {
        let (dec, _) = tiny();
        // centroid 0 is point 0 itself; its offset row is zero, so after
        // the shared MLP with zero bias the pooled feature sees that row.
        let coarse = Tensor::from_points(&[
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
            [0.1, 0.1, 0.0],
        ])
        .unwrap();
        // direct check of the offset construction
        let cloud = PointCloud::from_flat(&coarse.to_vec()).unwrap();
        let idx = farthest_point_sample(&cloud, 2, 0).unwrap();
        let groups = ball_query(&cloud.select(&idx).unwrap(), &cloud, 2, 0.5).unwrap();
        assert!(groups[0].contains(&idx[0]));
        let feats = dec.local_features(&coarse).unwrap();
        assert!(feats.all_finite());
    }
}

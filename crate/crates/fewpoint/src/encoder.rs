//! Ensemble encoder: a PointNet-style combined-MLP branch, a
//! Transformer-augmented branch, and a fusion layer producing the
//! multi-level global feature vector (MGFV).
//!
//! Both branches share the same per-point widths and pool features at the
//! configured levels with a columnwise max, so the output width does not
//! depend on the input point count and the whole encoder is permutation
//! invariant.

use crate::autodiff::{concat, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Hidden widths of the shared per-point MLP.
    pub per_point_dims: Vec<usize>,
    /// Indices into `per_point_dims` whose outputs feed the multi-level
    /// pooling.
    pub pooled_levels: Vec<usize>,
    /// Width of the attention projections in the Transformer branch.
    pub attention_dim: usize,
    /// Width of the fused output feature.
    pub mgfv_dim: usize,
    pub leaky_slope: f64,
    /// Whether the Transformer branch participates (ablation toggle).
    pub use_transformer_branch: bool,
}

impl EncoderConfig {
    /// Full-scale widths.
    pub fn full() -> Self {
        EncoderConfig {
            per_point_dims: vec![64, 128, 256, 512, 1024],
            pooled_levels: vec![2, 3, 4],
            attention_dim: 256,
            mgfv_dim: 1024,
            leaky_slope: 0.2,
            use_transformer_branch: true,
        }
    }

    /// Desk-scale widths (8x smaller), CPU trainable.
    pub fn desk() -> Self {
        EncoderConfig {
            per_point_dims: vec![8, 16, 32, 64, 128],
            pooled_levels: vec![2, 3, 4],
            attention_dim: 32,
            mgfv_dim: 128,
            leaky_slope: 0.2,
            use_transformer_branch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_point_dims.is_empty() {
            return Err(Error::contract("encoder: per_point_dims must be nonempty"));
        }
        if self.pooled_levels.is_empty()
            || self
                .pooled_levels
                .iter()
                .any(|&l| l >= self.per_point_dims.len())
        {
            return Err(Error::contract(
                "encoder: pooled_levels must be valid indices into per_point_dims",
            ));
        }
        if self.mgfv_dim == 0 || self.attention_dim == 0 {
            return Err(Error::contract("encoder: widths must be positive"));
        }
        Ok(())
    }

    /// Width of one branch's pooled-and-concatenated feature.
    pub fn branch_width(&self) -> usize {
        self.pooled_levels
            .iter()
            .map(|&l| self.per_point_dims[l])
            .sum()
    }
}

/// Single-head scaled dot-product self-attention with a residual
/// connection, operating on per-point features [n, d].
pub struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    dim: usize,
    attn_dim: usize,
}

impl SelfAttention {
    pub fn new(dim: usize, attn_dim: usize, rng: &mut Rng) -> SelfAttention {
        SelfAttention {
            wq: Linear::new(dim, attn_dim, rng),
            wk: Linear::new(dim, attn_dim, rng),
            wv: Linear::new(dim, attn_dim, rng),
            wo: Linear::new(attn_dim, dim, rng),
            dim,
            attn_dim,
        }
    }

    /// x + Wo(softmax(QKᵀ/√d) V). Also returns the attention matrix for
    /// contract checks.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 2 || x.cols() != self.dim {
            return Err(Error::contract(format!(
                "self-attention expects [n, {}], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scores = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (self.attn_dim as f64).sqrt());
        let attn = scores.softmax(1)?;
        let mixed = attn.matmul(&v)?;
        let out = x.add(&self.wo.forward(&mixed)?)?;
        Ok((out, attn))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pn_mlp: Mlp,
    t_embed: Option<Linear>,
    t_attention: Option<SelfAttention>,
    t_mlp: Option<Mlp>,
    fuse_fc: Linear,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut Rng) -> Result<Encoder> {
        cfg.validate()?;
        let mut dims = vec![3];
        dims.extend(&cfg.per_point_dims);
        let pn_mlp = Mlp::new(&dims, cfg.leaky_slope, rng);

        let (t_embed, t_attention, t_mlp) = if cfg.use_transformer_branch {
            let embed = Linear::new(3, cfg.per_point_dims[0], rng);
            let attention = SelfAttention::new(cfg.per_point_dims[0], cfg.attention_dim, rng);
            let rest = Mlp::new(&cfg.per_point_dims, cfg.leaky_slope, rng);
            (Some(embed), Some(attention), Some(rest))
        } else {
            (None, None, None)
        };

        let fuse_in = if cfg.use_transformer_branch {
            2 * cfg.branch_width()
        } else {
            cfg.branch_width()
        };
        let fuse_fc = Linear::new(fuse_in, cfg.mgfv_dim, rng);

        Ok(Encoder {
            cfg,
            pn_mlp,
            t_embed,
            t_attention,
            t_mlp,
            fuse_fc,
        })
    }

    fn points_tensor(cloud: &PointCloud) -> Result<Tensor> {
        Tensor::from_points(cloud.points())
    }

    /// Runs per-point layers, pooling the configured levels and
    /// concatenating the pooled features.
    fn pool_levels(&self, mut h: Tensor, layers: &[Linear]) -> Result<Tensor> {
        let mut pooled = Vec::new();
        for (level, layer) in layers.iter().enumerate() {
            h = layer.forward(&h)?.leaky_relu(self.cfg.leaky_slope)?;
            if self.cfg.pooled_levels.contains(&level) {
                pooled.push(h.max_pool_points()?);
            }
        }
        concat(&pooled)
    }

    /// PointNet-style branch: shared MLP plus multi-level max pooling.
    pub fn pn_cmlp(&self, cloud: &PointCloud) -> Result<Tensor> {
        let x = Self::points_tensor(cloud)?;
        self.pool_levels(x, &self.pn_mlp.layers)
    }

    /// Transformer branch: per-point embedding, one self-attention block,
    /// then the remaining per-point layers with the same multi-level
    /// pooling as the PointNet branch.
    pub fn t_cmlp(&self, cloud: &PointCloud) -> Result<Tensor> {
        let (embed, attention, mlp) = match (&self.t_embed, &self.t_attention, &self.t_mlp) {
            (Some(e), Some(a), Some(m)) => (e, a, m),
            _ => {
                return Err(Error::contract(
                    "transformer branch disabled by configuration",
                ))
            }
        };
        let x = Self::points_tensor(cloud)?;
        let h = embed.forward(&x)?.leaky_relu(self.cfg.leaky_slope)?;
        let h = attention.forward(&h)?;
        // level 0 is the embedding output itself
        let mut pooled = Vec::new();
        if self.cfg.pooled_levels.contains(&0) {
            pooled.push(h.max_pool_points()?);
        }
        let mut h = h;
        for (i, layer) in mlp.layers.iter().enumerate() {
            let level = i + 1;
            h = layer.forward(&h)?.leaky_relu(self.cfg.leaky_slope)?;
            if self.cfg.pooled_levels.contains(&level) {
                pooled.push(h.max_pool_points()?);
            }
        }
        concat(&pooled)
    }

    /// Attention matrix for the Transformer branch on this cloud
    /// (rows sum to 1).
    pub fn attention_weights(&self, cloud: &PointCloud) -> Result<Tensor> {
        let (embed, attention) = match (&self.t_embed, &self.t_attention) {
            (Some(e), Some(a)) => (e, a),
            _ => {
                return Err(Error::contract(
                    "transformer branch disabled by configuration",
                ))
            }
        };
        let x = Self::points_tensor(cloud)?;
        let h = embed.forward(&x)?.leaky_relu(self.cfg.leaky_slope)?;
        Ok(attention.forward_with_weights(&h)?.1)
    }

    /// Fusion: LeakyReLU(FC(concat(branches))).
    pub fn fuse(&self, mgfv_pn: &Tensor, mgfv_t: Option<&Tensor>) -> Result<Tensor> {
        let joined = match mgfv_t {
            Some(t) => concat(&[mgfv_pn.clone(), t.clone()])?,
            None => mgfv_pn.clone(),
        };
        if joined.len() != self.fuse_fc.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: joined.shape(),
                rhs: vec![self.fuse_fc.in_dim()],
            });
        }
        self.fuse_fc
            .forward(&joined)?
            .leaky_relu(self.cfg.leaky_slope)
    }

    /// The full encoder: both branches plus fusion. Partial and complete
    /// clouds go through the same parameters.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Tensor> {
        let pn = self.pn_cmlp(cloud)?;
        if self.cfg.use_transformer_branch {
            let t = self.t_cmlp(cloud)?;
            self.fuse(&pn, Some(&t))
        } else {
            self.fuse(&pn, None)
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.pn_mlp.params(&format!("{prefix}.pn"), out);
        if let Some(e) = &self.t_embed {
            e.params(&format!("{prefix}.t.embed"), out);
        }
        if let Some(a) = &self.t_attention {
            a.params(&format!("{prefix}.t.attn"), out);
        }
        if let Some(m) = &self.t_mlp {
            m.params(&format!("{prefix}.t.mlp"), out);
        }
        self.fuse_fc.params(&format!("{prefix}.fuse"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            per_point_dims: vec![4, 6, 8],
            pooled_levels: vec![1, 2],
            attention_dim: 4,
            mgfv_dim: 10,
            leaky_slope: 0.2,
            use_transformer_branch: true,
        }
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn default_branch_width_matches_pooled_levels() {
        let cfg = EncoderConfig::full();
        assert_eq!(cfg.branch_width(), 256 + 512 + 1024);
        assert_eq!(cfg.branch_width(), 1792);
    }

    #[test]
    fn pn_branch_output_width() {
        let mut rng = Rng::seed_from(0);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let c = cloud(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        let out = enc.pn_cmlp(&c).unwrap();
        assert_eq!(out.shape(), vec![6 + 8]);
    }

    #[test]
    fn pn_branch_permutation_invariant() {
        let mut rng = Rng::seed_from(1);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let a = cloud(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9]]);
        let b = cloud(&[[0.7, -0.8, 0.9], [0.1, 0.2, 0.3], [-0.4, 0.5, 0.6]]);
        let fa = enc.pn_cmlp(&a).unwrap().to_vec();
        let fb = enc.pn_cmlp(&b).unwrap().to_vec();
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_point_cloud_encodes() {
        let mut rng = Rng::seed_from(2);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let c = cloud(&[[0.3, -0.1, 0.2]]);
        let out = enc.encode(&c).unwrap();
        assert_eq!(out.shape(), vec![10]);
        assert!(out.all_finite());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::seed_from(3);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let c = cloud(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9]]);
        let attn = enc.attention_weights(&c).unwrap();
        let v = attn.to_vec();
        let n = attn.cols();
        for i in 0..attn.rows() {
            let sum: f64 = v[i * n..(i + 1) * n].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn output_width_independent_of_point_count() {
        let mut rng = Rng::seed_from(4);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let small = cloud(&[[0.1, 0.2, 0.3], [0.0, 0.1, -0.1]]);
        let mut pts = Vec::new();
        let mut r = Rng::seed_from(9);
        for _ in 0..64 {
            pts.push([r.range(-1.0, 1.0), r.range(-1.0, 1.0), r.range(-1.0, 1.0)]);
        }
        let big = cloud(&pts);
        assert_eq!(
            enc.t_cmlp(&small).unwrap().shape(),
            enc.t_cmlp(&big).unwrap().shape()
        );
    }

    #[test]
    fn fuse_zero_inputs_zero_output() {
        let mut rng = Rng::seed_from(5);
        let cfg = tiny_cfg();
        let enc = Encoder::new(cfg.clone(), &mut rng).unwrap();
        let zero_pn = Tensor::zeros(&[cfg.branch_width()]).unwrap();
        let zero_t = Tensor::zeros(&[cfg.branch_width()]).unwrap();
        // bias is zero-initialized, so FC(0) = 0 and LeakyReLU(0) = 0
        let out = enc.fuse(&zero_pn, Some(&zero_t)).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_width_mismatch_is_error() {
        let mut rng = Rng::seed_from(6);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let bad = Tensor::zeros(&[3]).unwrap();
        assert!(enc.fuse(&bad, None).is_err());
    }

    #[test]
    fn encode_is_pure() {
        let mut rng = Rng::seed_from(7);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let c = cloud(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6]]);
        assert_eq!(enc.encode(&c).unwrap().to_vec(), enc.encode(&c).unwrap().to_vec());
    }

    #[test]
    fn duplicated_points_leave_pn_branch_unchanged() {
        let mut rng = Rng::seed_from(8);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let base = [[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9]];
        let c = cloud(&base);
        let mut doubled = base.to_vec();
        doubled.extend_from_slice(&base);
        let c2 = cloud(&doubled);
        let fa = enc.pn_cmlp(&c).unwrap().to_vec();
        let fb = enc.pn_cmlp(&c2).unwrap().to_vec();
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

//! Shared building blocks for the models: linear layers, parameter
//! collections, and parameter hashing.

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::Rng;

/// Fully-connected layer, weights [in, out] plus bias [out].
/// Weight init is uniform in ±1/√fan_in, bias zero.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.range(-bound, bound))
            .collect();
        Linear {
            w: Tensor::param(w, &[in_dim, out_dim]).unwrap(),
            b: Tensor::param(vec![0.0; out_dim], &[out_dim]).unwrap(),
            in_dim,
            out_dim,
        }
    }

    /// All-zero layer; used where an identity/zero-offset start matters
    /// (residual generators, folding offsets in tests).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            w: Tensor::param(vec![0.0; in_dim * out_dim], &[in_dim, out_dim]).unwrap(),
            b: Tensor::param(vec![0.0; out_dim], &[out_dim]).unwrap(),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// x @ w + b. Accepts [n, in] (returns [n, out]) or [in] (returns [out]).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() == 1 {
            let row = x.reshape(&[1, x.len()])?;
            let out = row.matmul(&self.w)?.add_row_bias(&self.b)?;
            out.reshape(&[self.out_dim])
        } else {
            x.matmul(&self.w)?.add_row_bias(&self.b)
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Stack of linear layers with LeakyReLU between them (none after the
/// final layer).
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    pub fn new(dims: &[usize], slope: f64, rng: &mut Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, slope }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.leaky_relu(self.slope)?;
            }
        }
        Ok(h)
    }

    /// Forward with the activation applied after every layer including the
    /// last one.
    pub fn forward_all_activated(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.leaky_relu(self.slope)?;
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Named parameter list helpers.
pub fn set_requires_grad(params: &[(String, Tensor)], flag: bool) {
    for (_, t) in params {
        t.set_requires_grad(flag);
    }
}

pub fn zero_grads(params: &[(String, Tensor)]) {
    for (_, t) in params {
        t.zero_grad();
    }
}

/// Fraction of parameter entries with a nonzero gradient. Parameters with
/// no gradient buffer count as all-zero.
pub fn nonzero_grad_fraction(params: &[(String, Tensor)]) -> f64 {
    let mut total = 0usize;
    let mut nonzero = 0usize;
    for (_, t) in params {
        total += t.len();
        if let Some(g) = t.grad() {
            nonzero += g.iter().filter(|v| **v != 0.0).count();
        }
    }
    if total == 0 {
        1.0
    } else {
        nonzero as f64 / total as f64
    }
}

/// SHA-256 over the parameter values in name order; used to assert the
/// freezing contracts exactly.
pub fn param_hash(params: &[(String, Tensor)]) -> [u8; 32] {
    let mut sorted: Vec<&(String, Tensor)> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, t) in sorted {
        hasher.update(name.as_bytes());
        for v in t.to_vec() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

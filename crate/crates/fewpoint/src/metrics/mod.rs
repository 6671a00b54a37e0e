//! Point-set distances and neighborhood queries: Chamfer distance, exact
//! and auction-approximated Earth Mover's Distance, knn/ball grouping, and
//! reduction-rate arithmetic. Each distance exists both as a plain value
//! and as a differentiable tensor loss.

pub mod auction;
pub mod hungarian;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pointcloud::{dist, dist_sq, PointCloud};

/// Default size cap for the exact Hungarian solver; larger sets must use
/// the auction approximation.
pub const EMD_EXACT_LIMIT: usize = 256;

/// Tiny constant inside the loss-side sqrt so coincident points do not
/// produce a non-finite gradient.
const DIST_EPS: f64 = 1e-24;

/// A bijective matching between two equal-size point sets.
#[derive(Clone, Debug)]
pub struct Assignment {
    /// `permutation[i]` is the index in S2 matched to point i of S1.
    pub permutation: Vec<usize>,
    /// Mean matched Euclidean distance.
    pub cost: f64,
}

// ── Chamfer distance ─────────────────────────────────────────────────────

/// Symmetric mean nearest-neighbor distance using the unsquared Euclidean
/// norm. Set sizes may differ.
pub fn chamfer(s1: &PointCloud, s2: &PointCloud) -> Result<f64> {
    chamfer_with(s1, s2, false)
}

/// Chamfer distance with a configurable squared-distance convention.
pub fn chamfer_with(s1: &PointCloud, s2: &PointCloud, squared: bool) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::degenerate("chamfer on an empty point set"));
    }
    let term = |from: &PointCloud, to: &PointCloud| -> f64 {
        let mut acc = 0.0;
        for p in from.points() {
            let mut best = f64::INFINITY;
            for q in to.points() {
                let d = dist_sq(p, q);
                if d < best {
                    best = d;
                }
            }
            acc += if squared { best } else { best.sqrt() };
        }
        acc / from.len() as f64
    };
    Ok(term(s1, s2) + term(s2, s1))
}

fn nearest_indices(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<usize> {
    from.iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, q) in to.iter().enumerate() {
                let d = dist_sq(p, q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn rows_as_points(t: &Tensor) -> Result<Vec<[f64; 3]>> {
    if t.rank() != 2 || t.cols() != 3 {
        return Err(Error::contract(format!(
            "expected an [n, 3] tensor of points, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.to_vec();
    Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Differentiable Chamfer distance between two [n, 3] tensors. Nearest
/// neighbors are located on the current values and treated as constant,
/// which matches the subgradient of the min.
pub fn chamfer_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ap = rows_as_points(a)?;
    let bp = rows_as_points(b)?;
    let nn_ab = nearest_indices(&ap, &bp);
    let nn_ba = nearest_indices(&bp, &ap);

    let term = |from: &Tensor, to: &Tensor, nn: &[usize]| -> Result<Tensor> {
        let matched = to.gather_rows(nn)?;
        let diff = from.sub(&matched)?;
        let sq = diff.mul(&diff)?.sum_axis(1)?;
        Ok(sq.add_scalar(DIST_EPS).sqrt().mean())
    };
    term(a, b, &nn_ab)?.add(&term(b, a, &nn_ba)?)
}

// ── Earth Mover's Distance ───────────────────────────────────────────────

fn euclidean_cost_matrix(s1: &PointCloud, s2: &PointCloud) -> Vec<f64> {
    let n = s1.len();
    let mut cost = vec![0.0; n * n];
    for (i, p) in s1.points().iter().enumerate() {
        for (j, q) in s2.points().iter().enumerate() {
            cost[i * n + j] = dist(p, q);
        }
    }
    cost
}

fn require_equal_sizes(s1: &PointCloud, s2: &PointCloud) -> Result<usize> {
    if s1.len() != s2.len() {
        return Err(Error::contract(format!(
            "EMD requires equal set sizes, got {} and {}",
            s1.len(),
            s2.len()
        )));
    }
    Ok(s1.len())
}

/// Optimal assignment by the Hungarian algorithm. Limited to
/// [`EMD_EXACT_LIMIT`] points; larger sets must use [`emd_auction`].
pub fn emd_exact(s1: &PointCloud, s2: &PointCloud) -> Result<Assignment> {
    let n = require_equal_sizes(s1, s2)?;
    if n > EMD_EXACT_LIMIT {
        return Err(Error::contract(format!(
            "emd_exact capped at {EMD_EXACT_LIMIT} points, got {n}; use emd_auction"
        )));
    }
    let cost = euclidean_cost_matrix(s1, s2);
    let (permutation, total) = hungarian::solve(&cost, n);
    Ok(Assignment {
        permutation,
        cost: total / n as f64,
    })
}

/// (1+epsilon)-approximate assignment by the auction algorithm with
/// ε-scaling. Fails explicitly if the bidding cap is exceeded.
pub fn emd_auction(s1: &PointCloud, s2: &PointCloud, epsilon: f64) -> Result<Assignment> {
    let n = require_equal_sizes(s1, s2)?;
    let cost = euclidean_cost_matrix(s1, s2);
    let permutation = auction::solve(&cost, n, epsilon)?;
    let total: f64 = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(Assignment {
        permutation,
        cost: total / n as f64,
    })
}

/// Differentiable EMD between equal-size [n, 3] tensors: the matching is
/// found with the auction algorithm on current values and held fixed, the
/// mean matched distance is differentiable.
pub fn emd_loss(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<Tensor> {
    let ap = rows_as_points(a)?;
    let bp = rows_as_points(b)?;
    if ap.len() != bp.len() {
        return Err(Error::contract(format!(
            "EMD requires equal set sizes, got {} and {}",
            ap.len(),
            bp.len()
        )));
    }
    let n = ap.len();
    let mut cost = vec![0.0; n * n];
    for (i, p) in ap.iter().enumerate() {
        for (j, q) in bp.iter().enumerate() {
            cost[i * n + j] = dist(p, q);
        }
    }
    let permutation = auction::solve(&cost, n, epsilon)?;
    let matched = b.gather_rows(&permutation)?;
    let diff = a.sub(&matched)?;
    let sq = diff.mul(&diff)?.sum_axis(1)?;
    Ok(sq.add_scalar(DIST_EPS).sqrt().mean())
}

// ── neighborhood queries ─────────────────────────────────────────────────

/// Exactly k nearest indices in `cloud` for each center (distance ties
/// break toward the lower index).
pub fn knn(centers: &PointCloud, cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::contract("knn: k must be >= 1"));
    }
    if cloud.len() < k {
        return Err(Error::contract(format!(
            "knn: k = {k} exceeds cloud size {}",
            cloud.len()
        )));
    }
    Ok(centers
        .points()
        .iter()
        .map(|c| {
            let mut order: Vec<(f64, usize)> = cloud
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| (dist_sq(c, p), i))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            order[..k].iter().map(|&(_, i)| i).collect()
        })
        .collect())
}

/// Up to k indices within `radius` of each center, padded by repeating
/// the nearest found index (or the globally nearest point when nothing
/// falls inside the ball), so every group has exactly k members.
pub fn ball_query(
    centers: &PointCloud,
    cloud: &PointCloud,
    k: usize,
    radius: f64,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || radius <= 0.0 {
        return Err(Error::contract("ball_query: k >= 1 and radius > 0 required"));
    }
    if cloud.is_empty() {
        return Err(Error::degenerate("ball_query on an empty cloud"));
    }
    let r2 = radius * radius;
    Ok(centers
        .points()
        .iter()
        .map(|c| {
            let mut order: Vec<(f64, usize)> = cloud
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| (dist_sq(c, p), i))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut group: Vec<usize> = order
                .iter()
                .take_while(|&&(d, _)| d <= r2)
                .take(k)
                .map(|&(_, i)| i)
                .collect();
            let pad = group.first().copied().unwrap_or(order[0].1);
            while group.len() < k {
                group.push(pad);
            }
            group
        })
        .collect())
}

// ── reduction rate ───────────────────────────────────────────────────────

/// (baseline − ours) / baseline. Negative when `ours` is worse than the
/// baseline; the baseline must be positive.
pub fn reduction_rate(baseline: f64, ours: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::contract(format!(
            "reduction_rate: baseline must be > 0, got {baseline}"
        )));
    }
    Ok((baseline - ours) / baseline)
}

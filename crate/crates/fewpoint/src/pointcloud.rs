//! Point-cloud data model, XYZ file I/O, normalization, and
//! sampling/occlusion primitives.
//!
//! The exchange format is ASCII XYZ: one `x y z` line per point,
//! whitespace-separated, with `#`-prefixed comment lines ignored.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// An ordered list of 3-D points standing in for an unordered set:
/// semantic equality is multiset equality. Coordinates are finite and the
/// cloud is nonempty by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::degenerate("point cloud must contain at least one point"));
        }
        if let Some(p) = points
            .iter()
            .find(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::contract(format!(
                "point cloud contains non-finite coordinates: {p:?}"
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Flat row-major [n*3] copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::contract(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                values.len()
            )));
        }
        PointCloud::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        PointCloud::new(points)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Multiset equality within a coordinate tolerance: greedy matching of
    /// each point in `self` to an unused nearest point in `other`.
    pub fn multiset_eq(&self, other: &PointCloud, tol: f64) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let mut used = vec![false; other.len()];
        'outer: for p in &self.points {
            for (j, q) in other.points.iter().enumerate() {
                if !used[j] && dist(p, q) <= tol {
                    used[j] = true;
                    continue 'outer;
                }
            }
            return false;
        }
        true
    }
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// One training/eval instance: a partial observation paired with the
/// complete cloud it came from.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub partial: PointCloud,
    pub gt: PointCloud,
    pub class_label: String,
    pub sample_id: String,
}

impl SamplePair {
    pub fn new(
        partial: PointCloud,
        gt: PointCloud,
        class_label: impl Into<String>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        if partial.len() > gt.len() {
            return Err(Error::contract(format!(
                "partial cloud ({} points) larger than ground truth ({} points)",
                partial.len(),
                gt.len()
            )));
        }
        Ok(SamplePair {
            partial,
            gt,
            class_label: class_label.into(),
            sample_id: sample_id.into(),
        })
    }
}

/// Reads an ASCII XYZ file. Lines starting with `#` are ignored; every
/// other line must hold exactly three finite decimal coordinates.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: display,
                line: lineno + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                msg: format!("invalid coordinate `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: format!("non-finite coordinate `{f}`"),
                });
            }
            p[k] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::degenerate(format!("no points in {display}")));
    }
    PointCloud::new(points)
}

/// Writes ASCII XYZ with six decimal places, enough to round-trip within
/// 1e-6 for normalized coordinates.
pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::contract(format!(
                "refusing to write non-finite point {p:?}"
            )));
        }
        buf.push_str(&format!("{:.6} {:.6} {:.6}\n", p[0], p[1], p[2]));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Centers a cloud at its centroid and scales it so the maximum radius is
/// 1 (scale 1 if all points coincide). Returns the transform so callers
/// can invert it.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, [f64; 3], f64) {
    let center = cloud.centroid();
    let mut max_r: f64 = 0.0;
    for p in cloud.points() {
        max_r = max_r.max(dist(p, &center));
    }
    let scale = if max_r > 0.0 { max_r } else { 1.0 };
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            [
                (p[0] - center[0]) / scale,
                (p[1] - center[1]) / scale,
                (p[2] - center[2]) / scale,
            ]
        })
        .collect();
    (PointCloud::new(points).unwrap(), center, scale)
}

/// Inverse of [`normalize`]: maps a normalized cloud back into the
/// original frame.
pub fn denormalize(cloud: &PointCloud, center: [f64; 3], scale: f64) -> PointCloud {
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            [
                p[0] * scale + center[0],
                p[1] * scale + center[1],
                p[2] * scale + center[2],
            ]
        })
        .collect();
    PointCloud::new(points).unwrap()
}

/// k points drawn without replacement, deterministic given the seed.
pub fn random_subsample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    if k == 0 || k > cloud.len() {
        return Err(Error::contract(format!(
            "random_subsample: k = {k} out of range for {} points",
            cloud.len()
        )));
    }
    let mut rng = Rng::seed_from(seed);
    let idx = rng.sample_indices(cloud.len(), k);
    cloud.select(&idx)
}

/// Greedy farthest-point (max-min) selection of k indices starting from
/// `start_index`. Deterministic; distance ties break toward the lowest
/// index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "farthest_point_sample: k = {k} out of range for {n} points"
        )));
    }
    if start_index >= n {
        return Err(Error::contract(format!(
            "farthest_point_sample: start index {start_index} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    for _ in 1..k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist_sq(&pts[i], &pts[current]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Keeps the points on one side of a plane through the cloud: points p
/// with p·normal ≤ t, where t is picked (seeded) so the kept fraction
/// falls in [keep_fraction_min, 0.75]. A synthetic stand-in for
/// single-viewpoint partial views.
pub fn halfspace_crop(
    cloud: &PointCloud,
    plane_normal: [f64; 3],
    keep_fraction_min: f64,
    seed: u64,
) -> Result<PointCloud> {
    let norm = (plane_normal.iter().map(|c| c * c).sum::<f64>()).sqrt();
    if norm == 0.0 {
        return Err(Error::contract("halfspace_crop: zero plane normal"));
    }
    if !(0.0 < keep_fraction_min && keep_fraction_min <= 0.75) {
        return Err(Error::contract(format!(
            "halfspace_crop: keep_fraction_min {keep_fraction_min} outside (0, 0.75]"
        )));
    }
    let n = cloud.len();
    let min_keep = (keep_fraction_min * n as f64).ceil() as usize;
    let max_keep = (0.75 * n as f64).floor() as usize;
    if min_keep == 0 || min_keep > max_keep || max_keep > n {
        return Err(Error::degenerate(format!(
            "halfspace_crop: cannot keep a fraction in [{keep_fraction_min}, 0.75] of {n} points"
        )));
    }
    let mut rng = Rng::seed_from(seed);
    let keep = min_keep + rng.below(max_keep - min_keep + 1);
    let mut dots: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                p[0] * plane_normal[0] + p[1] * plane_normal[1] + p[2] * plane_normal[2],
                i,
            )
        })
        .collect();
    dots.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let kept: Vec<usize> = dots[..keep].iter().map(|&(_, i)| i).collect();
    cloud.select(&kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn cube_corners() -> PointCloud {
        PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 0.0],
            [1.0, 0.0, 1.0],
            [0.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn xyz_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let mut rng = Rng::seed_from(11);
        let points: Vec<[f64; 3]> = (0..100)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)])
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        write_xyz(&cloud, &path).unwrap();
        let back = read_xyz(&path).unwrap();
        assert!(cloud.multiset_eq(&back, 1e-5));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "1 2\n").unwrap();
        match read_xyz(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error: {other:?}"),
        }
    }

    #[test]
    fn two_point_file_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.xyz");
        fs::write(&path, "# comment\n0 0 0\n1 0 0\n").unwrap();
        let cloud = read_xyz(&path).unwrap();
        assert_eq!(cloud.len(), 2);
    }

    #[test]
    fn empty_file_is_degenerate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.xyz");
        fs::write(&path, "# only a comment\n").unwrap();
        assert!(matches!(read_xyz(&path), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn rejects_nan_on_read_and_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.xyz");
        fs::write(&path, "0 0 NaN\n").unwrap();
        assert!(read_xyz(&path).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn normalize_symmetric_pair() {
        let cloud = PointCloud::new(vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]).unwrap();
        let (norm, center, scale) = normalize(&cloud);
        assert_eq!(center, [0.0, 0.0, 0.0]);
        assert_eq!(scale, 2.0);
        assert!(norm.multiset_eq(
            &PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn normalize_single_point() {
        let cloud = PointCloud::new(vec![[5.0, 5.0, 5.0]]).unwrap();
        let (norm, center, scale) = normalize(&cloud);
        assert_eq!(norm.point(0), [0.0, 0.0, 0.0]);
        assert_eq!(center, [5.0, 5.0, 5.0]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn normalize_roundtrip() {
        let cloud = cube_corners();
        let (norm, center, scale) = normalize(&cloud);
        let back = denormalize(&norm, center, scale);
        assert!(cloud.multiset_eq(&back, 1e-9));
    }

    #[test]
    fn subsample_identity_and_determinism() {
        let cloud = cube_corners();
        let all = random_subsample(&cloud, cloud.len(), 3).unwrap();
        assert!(all.multiset_eq(&cloud, 0.0));
        let a = random_subsample(&cloud, 3, 42).unwrap();
        let b = random_subsample(&cloud, 3, 42).unwrap();
        assert_eq!(a.points(), b.points());
        assert!(random_subsample(&cloud, 9, 1).is_err());
    }

    #[test]
    fn fps_examples() {
        // points at x = 0, 1, 0.4: the pair {0, 1} maximizes min distance
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.4, 0.0, 0.0],
        ])
        .unwrap();
        let idx = farthest_point_sample(&cloud, 2, 0).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(farthest_point_sample(&cloud, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&cloud, 3, 0).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&cloud, 4, 0).is_err());
    }

    #[test]
    fn halfspace_crop_predicate_and_determinism() {
        let mut rng = Rng::seed_from(5);
        let points: Vec<[f64; 3]> = (0..200).map(|_| rng.unit_vector()).collect();
        let cloud = PointCloud::new(points).unwrap();
        let cropped = halfspace_crop(&cloud, [0.0, 0.0, 1.0], 0.4, 9).unwrap();
        let frac = cropped.len() as f64 / cloud.len() as f64;
        assert!((0.4..=0.75).contains(&frac), "kept fraction {frac}");
        // every kept point satisfies z <= t for the implied threshold
        let t = cropped
            .points()
            .iter()
            .map(|p| p[2])
            .fold(f64::NEG_INFINITY, f64::max);
        let excluded_below_t = cloud
            .points()
            .iter()
            .filter(|p| p[2] < t - 1e-12)
            .count();
        assert!(excluded_below_t <= cropped.len());
        let again = halfspace_crop(&cloud, [0.0, 0.0, 1.0], 0.4, 9).unwrap();
        assert_eq!(cropped.points(), again.points());
    }

    #[test]
    fn halfspace_crop_two_point_case() {
        let cloud = PointCloud::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        // forcing exactly one kept point: fraction window [0.5, 0.75] of 2 points = 1 point
        let cropped = halfspace_crop(&cloud, [1.0, 0.0, 0.0], 0.5, 1).unwrap();
        assert_eq!(cropped.len(), 1);
        assert_eq!(cropped.point(0), [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn sample_pair_contract() {
        let gt = cube_corners();
        let partial = random_subsample(&gt, 4, 0).unwrap();
        assert!(SamplePair::new(partial, gt.clone(), "cube", "s0").is_ok());
        let too_big = PointCloud::new(vec![[0.0; 3]; 9]).unwrap();
        assert!(SamplePair::new(too_big, gt, "cube", "s1").is_err());
    }
}

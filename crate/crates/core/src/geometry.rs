//! Point sets and the geometric kernels used by the encoders and the data
//! pipeline. All kernels are plain O(N²) scans.

use rand::Rng;
use seedcloud_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Degenerate(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_radius(&self) -> f64 {
        let c = self.centroid();
        self.points.iter().map(|p| dist2(p, &c)).fold(0.0, f64::max).sqrt()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Row-major `[N, 3]` values.
    pub fn flat<F: Real>(&self) -> Vec<F> {
        self.points.iter().flat_map(|p| p.map(F::of)).collect()
    }

    /// Reads a cloud from a `[N, 3]` slice.
    pub fn from_flat<F: Real>(values: &[F]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::Usage(format!("{} values do not form xyz triples", values.len())));
        }
        let points = values
            .chunks_exact(3)
            .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy(), c[2].to_f64_lossy()])
            .collect();
        PointCloud::new(points)
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(vec![1, self.len(), 3], self.flat()).expect("shape matches data")
    }
}

/// Greedy max-min subset of `m` indices starting from `start`. Ties go to the
/// lowest index.
pub fn farthest_point_sample(pc: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::Range(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Range(format!("start index {start} outside {n} points")));
    }
    let pts = pc.points();
    let mut picked = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        picked.push(current);
        let c = pts[current];
        let mut best = (0, -1.0);
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.1 {
                best = (i, nearest[i]);
            }
        }
        current = best.0;
    }
    Ok(picked)
}

/// Fixed-width neighborhoods: up to `k_max` indices within `radius` of each
/// center in ascending order, padded by repeating the first hit.
pub fn ball_query(pc: &PointCloud, centers: &[usize], radius: f64, k_max: usize) -> Result<Vec<Vec<usize>>> {
    if centers.is_empty() {
        return Err(Error::Usage("ball query needs at least one center".into()));
    }
    if !(radius > 0.0) || k_max == 0 {
        return Err(Error::Config(format!("ball query radius {radius} / size {k_max} must be positive")));
    }
    let pts = pc.points();
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let center = pts
                .get(c)
                .ok_or_else(|| Error::Range(format!("center index {c} outside {} points", pts.len())))?;
            let mut group: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| dist2(p, center) <= r2)
                .map(|(i, _)| i)
                .take(k_max)
                .collect();
            let first = group.first().copied().unwrap_or(c);
            group.resize(k_max, first);
            Ok(group)
        })
        .collect()
}

/// Similarity transform applied by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

/// Centers the cloud on the origin and scales its farthest point to radius 1.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let centroid = pc.centroid();
    let scale = pc.max_radius();
    if !(scale > 0.0) {
        return Err(Error::Degenerate("all points coincide; cannot normalize".into()));
    }
    let points = pc
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] - centroid[k]) / scale))
        .collect();
    Ok((PointCloud { points }, Normalization { centroid, scale }))
}

/// Applies the transform of a previous [`normalize`] call to another cloud.
pub fn renormalize(pc: &PointCloud, t: &Normalization) -> PointCloud {
    let points = pc
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] - t.centroid[k]) / t.scale))
        .collect();
    PointCloud { points }
}

pub fn denormalize(pc: &PointCloud, t: &Normalization) -> PointCloud {
    let points = pc
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|k| p[k] * t.scale + t.centroid[k]))
        .collect();
    PointCloud { points }
}

/// `m` points drawn uniformly with replacement.
pub fn resample(pc: &PointCloud, m: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if m == 0 {
        return Err(Error::Range("resample count must be positive".into()));
    }
    let points = (0..m).map(|_| pc.points[rng.random_range(0..pc.len())]).collect();
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn fps_collinear() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&pc, 2, 0).unwrap(), vec![0, 2]);
        let mut all = farthest_point_sample(&pc, 3, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(farthest_point_sample(&pc, 4, 0), Err(Error::Range(_))));
    }

    #[test]
    fn ball_query_padding() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let g = ball_query(&pc, &[2, 0], 0.5, 4).unwrap();
        assert_eq!(g[0], vec![2, 2, 2, 2]);
        assert_eq!(g[1], vec![0, 1, 0, 0]);
        assert_eq!(ball_query(&pc, &[1], 100.0, 3).unwrap()[0], vec![0, 1, 2]);
        assert!(matches!(ball_query(&pc, &[], 1.0, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn normalize_identical_points_is_degenerate() {
        let pc = cloud(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert!(matches!(normalize(&pc), Err(Error::Degenerate(_))));
    }
}

//! Point-cloud kernels: normalization, farthest point sampling, KNN patch
//! grouping, Chamfer distance, patch masking and Morton serialization.
//!
//! Everything here is brute force; clouds are at most a few thousand points.

use std::cmp::Ordering;

use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensorcore::Array;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("requested {requested} samples from {available} points")]
    TooFew { requested: usize, available: usize },
    #[error("start index {start} out of range for {n} points")]
    StartOutOfRange { start: usize, n: usize },
    #[error("mask ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Point = [f64; 3];

/// An `n × 3` set of finite points, `n ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[n, 3]` array view.
    pub fn to_array(&self) -> Array {
        Array::matrix(self.len(), 3, self.points.iter().flatten().copied().collect())
            .expect("finite by construction")
    }

    pub fn from_array(a: &Array) -> Result<Self, GeometryError> {
        if a.shape().len() != 2 || a.cols() != 3 {
            return Err(GeometryError::Invalid(format!("expected [n, 3], got {:?}", a.shape())));
        }
        Self::new(a.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.len() as f64)
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Local patches grouped around farthest-point-sampled centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// `g` rows of `s` center-relative coordinates.
    pub patches: Vec<Vec<Point>>,
    pub member_indices: Vec<Vec<usize>>,
    /// Morton order of the centers: `order[j]` is the patch at sequence slot `j`.
    pub order: Vec<usize>,
}

impl PatchSet {
    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// Flattened `[g*s, 3]` local coordinates, patch-major.
    pub fn patches_array(&self) -> Array {
        let data: Vec<f64> = self.patches.iter().flatten().flatten().copied().collect();
        Array::matrix(data.len() / 3, 3, data).expect("finite by construction")
    }

    pub fn centers_array(&self) -> Array {
        Array::matrix(self.centers.len(), 3, self.centers.iter().flatten().copied().collect())
            .expect("finite by construction")
    }
}

/// Which patches are hidden from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Nothing masked.
    pub fn none(g: usize) -> Self {
        Self { masked: vec![false; g], ratio: 0.0 }
    }
}

/// Centers the cloud at the origin and scales its farthest point to norm 1.
/// A cloud whose points all coincide is centered but not scaled.
pub fn normalize_cloud(pc: &PointCloud) -> PointCloud {
    let c = pc.centroid();
    let centered: Vec<Point> = pc.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let max_norm = centered.iter().map(|p| dist2(p, &[0.0; 3])).fold(0.0, f64::max).sqrt();
    let points = if max_norm > 0.0 {
        centered.into_iter().map(|p| p.map(|v| v / max_norm)).collect()
    } else {
        centered
    };
    PointCloud { points }
}

/// Greedy farthest point sampling with lowest-index tie breaking.
pub fn fps(pc: &PointCloud, g: usize, start_index: usize) -> Result<Vec<usize>, GeometryError> {
    let n = pc.len();
    if g > n {
        return Err(GeometryError::TooFew { requested: g, available: n });
    }
    if start_index >= n {
        return Err(GeometryError::StartOutOfRange { start: start_index, n });
    }
    if g == 0 {
        return Ok(Vec::new());
    }
    let pts = &pc.points;
    let mut selected = Vec::with_capacity(g);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    while selected.len() < g {
        let cp = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// The `k` nearest points to `query`, nearest first, ties by lowest index.
pub fn knn(points: &[Point], query: &Point, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    let k = k.min(keyed.len());
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// FPS centers, KNN groups (center included) and Morton serialization.
pub fn build_patches(pc: &PointCloud, g: usize, s: usize, start_index: usize) -> Result<PatchSet, GeometryError> {
    if s > pc.len() {
        return Err(GeometryError::TooFew { requested: s, available: pc.len() });
    }
    if s == 0 {
        return Err(GeometryError::Invalid("patch size must be positive".into()));
    }
    let center_idx = fps(pc, g, start_index)?;
    let centers: Vec<Point> = center_idx.iter().map(|&i| pc.points[i]).collect();
    let mut patches = Vec::with_capacity(g);
    let mut member_indices = Vec::with_capacity(g);
    for c in &centers {
        let members = knn(&pc.points, c, s);
        patches.push(
            members
                .iter()
                .map(|&i| {
                    let p = pc.points[i];
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                })
                .collect(),
        );
        member_indices.push(members);
    }
    let order = morton_order(&centers);
    Ok(PatchSet { centers, patches, member_indices, order })
}

/// Symmetric mean of squared nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let side = |x: &[Point], y: &[Point]| -> f64 {
        x.iter().map(|p| y.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    side(&a.points, &b.points) + side(&b.points, &a.points)
}

/// Masks exactly `floor(ratio * g)` patches chosen uniformly without
/// replacement from a generator seeded with `seed`.
pub fn make_mask(g: usize, ratio: f64, seed: u64) -> Result<MaskPlan, GeometryError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(GeometryError::BadRatio(ratio));
    }
    let count = (ratio * g as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; g];
    for i in index::sample(&mut rng, g, count) {
        masked[i] = true;
    }
    Ok(MaskPlan { masked, ratio })
}

const MORTON_BITS: u32 = 10;

fn spread_bits(mut v: u64) -> u64 {
    // Interleave two zero bits between each of the low 10 bits.
    v &= 0x3ff;
    v = (v | (v << 16)) & 0x0300_00ff;
    v = (v | (v << 8)) & 0x0300_f00f;
    v = (v | (v << 4)) & 0x030c_30c3;
    v = (v | (v << 2)) & 0x0924_9249;
    v
}

/// Morton key of each center after 10-bit quantization over the bounding box.
pub fn morton_keys(centers: &[Point]) -> Vec<u64> {
    if centers.is_empty() {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in centers {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let max_q = ((1u64 << MORTON_BITS) - 1) as f64;
    centers
        .iter()
        .map(|p| {
            let mut key = 0u64;
            for k in 0..3 {
                let span = hi[k] - lo[k];
                let q = if span > 0.0 { ((p[k] - lo[k]) / span * max_q).floor().clamp(0.0, max_q) as u64 } else { 0 };
                key |= spread_bits(q) << k;
            }
            key
        })
        .collect()
}

/// Stable ascending sort of the centers by Morton key.
pub fn morton_order(centers: &[Point]) -> Vec<usize> {
    let keys = morton_keys(centers);
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud(&(0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0), rng.random_range(-1.0..1.0)]).collect::<Vec<_>>())
    }

    /// Exhaustive greedy oracle: at every step evaluate the min-distance of
    /// every candidate to the whole selected set from scratch.
    fn fps_oracle(pc: &PointCloud, g: usize, start: usize) -> Vec<usize> {
        let pts = pc.points();
        let mut sel = vec![start];
        while sel.len() < g {
            let mut best = None::<(f64, usize)>;
            for i in 0..pts.len() {
                let d = sel.iter().map(|&j| dist2(&pts[i], &pts[j]).sqrt()).fold(f64::INFINITY, f64::min);
                match best {
                    Some((bd, _)) if d <= bd => {}
                    _ => best = Some((d, i)),
                }
            }
            sel.push(best.unwrap().1);
        }
        sel
    }

    #[test]
    fn normalize_symmetric_pair() {
        let out = normalize_cloud(&cloud(&[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]));
        assert_eq!(out.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_degenerate_cloud_is_only_centered() {
        let out = normalize_cloud(&cloud(&[[2.0, -1.0, 4.0]; 5]));
        assert!(out.points().iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn normalize_rejects_non_finite_input() {
        assert_eq!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]), Err(GeometryError::NonFinite(0)));
    }

    #[test]
    fn fps_square_with_center() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.5, 0.5, 0.0]]);
        assert_eq!(fps(&pc, 3, 0).unwrap(), vec![0, 3, 1]);
        assert_eq!(fps_oracle(&pc, 3, 0), vec![0, 3, 1]);
    }

    #[test]
    fn fps_edge_cases() {
        let pc = random_cloud(1, 20);
        assert_eq!(fps(&pc, 1, 7).unwrap(), vec![7]);
        let mut all = fps(&pc, 20, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(fps(&pc, 21, 0), Err(GeometryError::TooFew { requested: 21, available: 20 }));
    }

    #[test]
    fn patches_of_size_one_are_their_centers() {
        let pc = random_cloud(2, 30);
        let ps = build_patches(&pc, 5, 1, 0).unwrap();
        for (i, patch) in ps.patches.iter().enumerate() {
            assert_eq!(patch, &vec![[0.0; 3]]);
            assert_eq!(pc.points()[ps.member_indices[i][0]], ps.centers[i]);
        }
    }

    #[test]
    fn square_patches_hold_center_and_nearest_corner() {
        // Rectangle so each corner has a unique nearest neighbor.
        let pc = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 1.0, 0.0]]);
        let ps = build_patches(&pc, 2, 2, 0).unwrap();
        // Brute-force oracle: nearest other point by exhaustive scan.
        for (i, members) in ps.member_indices.iter().enumerate() {
            let c = fps(&pc, 2, 0).unwrap()[i];
            let nearest = (0..4).filter(|&j| j != c).min_by(|&a, &b| {
                dist2(&pc.points()[a], &pc.points()[c]).partial_cmp(&dist2(&pc.points()[b], &pc.points()[c])).unwrap()
            });
            assert_eq!(members, &vec![c, nearest.unwrap()]);
        }
    }

    #[test]
    fn default_patching_shapes() {
        let pc = random_cloud(3, 2048);
        let ps = build_patches(&pc, 64, 32, 0).unwrap();
        assert_eq!(ps.centers_array().shape(), &[64, 3]);
        assert_eq!(ps.patches.len(), 64);
        assert!(ps.patches.iter().all(|p| p.len() == 32));
        assert_eq!(ps.patches_array().shape(), &[64 * 32, 3]);
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b), 0.5);
        assert_eq!(chamfer(&b, &b), 0.0);
        let c = random_cloud(4, 17);
        let d = random_cloud(5, 9);
        assert_eq!(chamfer(&c, &d), chamfer(&d, &c));
    }

    #[test]
    fn mask_counts_and_determinism() {
        let plan = make_mask(64, 0.6, 9).unwrap();
        assert_eq!(plan.masked_count(), 38);
        assert_eq!(make_mask(64, 0.0, 9).unwrap().masked_count(), 0);
        assert_eq!(plan, make_mask(64, 0.6, 9).unwrap());
        assert!(make_mask(64, 1.0, 0).is_err());
        assert!(make_mask(64, -0.1, 0).is_err());
    }

    #[test]
    fn morton_collinear_and_reversed() {
        let fwd: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(morton_order(&fwd), (0..10).collect::<Vec<_>>());
        let rev: Vec<Point> = fwd.iter().rev().copied().collect();
        assert_eq!(morton_order(&rev), (0..10).rev().collect::<Vec<_>>());
    }

    #[test]
    fn morton_cube_corners_match_bitwise_oracle() {
        let corners: Vec<Point> = [7, 0, 5, 2, 6, 1, 4, 3]
            .iter()
            .map(|&c: &u32| [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64])
            .collect();
        // Oracle: with 10-bit quantization a unit axis maps to 1023; build
        // the key one bit at a time.
        let oracle_key = |p: &Point| -> u64 {
            let q: Vec<u64> = p.iter().map(|&v| (v * 1023.0) as u64).collect();
            let mut key = 0u64;
            for bit in 0..10 {
                for (axis, qa) in q.iter().enumerate() {
                    key |= ((qa >> bit) & 1) << (3 * bit + axis);
                }
            }
            key
        };
        let mut expected: Vec<usize> = (0..8).collect();
        expected.sort_by_key(|&i| oracle_key(&corners[i]));
        assert_eq!(morton_order(&corners), expected);
        let keys = morton_keys(&corners);
        for (i, c) in corners.iter().enumerate() {
            assert_eq!(keys[i], oracle_key(c));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fps_matches_exhaustive_oracle(seed in 0u64..10_000, n in 1usize..=64, frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
            let pc = random_cloud(seed, n);
            let g = 1 + ((n - 1) as f64 * frac) as usize;
            let start = ((n - 1) as f64 * start_frac) as usize;
            prop_assert_eq!(fps(&pc, g, start).unwrap(), fps_oracle(&pc, g, start));
        }

        #[test]
        fn patch_rows_are_valid(seed in 0u64..10_000, n in 8usize..80) {
            let pc = random_cloud(seed, n);
            let s = n.min(8);
            let ps = build_patches(&pc, 4, s, 0).unwrap();
            for (i, row) in ps.member_indices.iter().enumerate() {
                let mut sorted = row.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), s);
                prop_assert!(row.iter().all(|&j| j < n));
                for (j, &m) in row.iter().enumerate() {
                    let p = pc.points()[m];
                    let c = ps.centers[i];
                    prop_assert_eq!(ps.patches[i][j], [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                }
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..10_000, n in 1usize..50) {
            let once = normalize_cloud(&random_cloud(seed, n));
            let twice = normalize_cloud(&once);
            let c = once.centroid();
            prop_assert!(c.iter().all(|v| v.abs() < 1e-9));
            if n > 1 {
                let m = once.points().iter().map(|p| dist2(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
                prop_assert!((m - 1.0).abs() < 1e-9);
            }
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!(dist2(a, b).sqrt() < 1e-9);
            }
        }

        #[test]
        fn chamfer_is_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, n in 1usize..30, m in 1usize..30) {
            let a = random_cloud(s1, n);
            let b = random_cloud(s2 + 5000, m);
            prop_assert_eq!(chamfer(&a, &a), 0.0);
            prop_assert!(chamfer(&a, &b) >= 0.0);
        }
    }
}

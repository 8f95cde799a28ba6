//! Deterministic geometric kernels: farthest point sampling, k-nearest
//! neighbors, Morton encoding, Morton sorting and patch normalization.
//!
//! Every kernel is a pure function of its inputs. Ties are always resolved
//! in favour of the lowest original index, and all searches are brute force.

use crate::error::{invalid_arg, shape_err, Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An unordered set of `M >= 1` finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn translated(&self, offset: Point) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        Self { points }
    }
}

/// Patch centers selected from a parent cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub centers: Vec<Point>,
    pub source_indices: Vec<usize>,
}

impl CenterSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// `n` patches of `k` points each, stored flat as `n * k` rows.
///
/// Within each patch, rows are ordered by nondecreasing distance to the
/// patch center (ties by lower source index).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub points: Vec<Point>,
    pub source_indices: Vec<usize>,
    pub k: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.points.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn patch(&self, i: usize) -> &[Point] {
        &self.points[i * self.k..(i + 1) * self.k]
    }
}

/// A permutation of `0..n`: `order[r]` is the original index placed at rank `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedSequenceIndex {
    pub order: Vec<usize>,
}

impl SortedSequenceIndex {
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        for &i in &self.order {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

/// Greedy farthest point sampling starting from `seed_index`.
pub fn fps(cloud: &PointCloud, n: usize, seed_index: usize) -> Result<CenterSet> {
    let pts = cloud.points();
    let m = pts.len();
    if n == 0 || n > m {
        return Err(invalid_arg(format!("fps: n = {n} must be in 1..={m}")));
    }
    if seed_index >= m {
        return Err(invalid_arg(format!(
            "fps: seed_index {seed_index} out of range for {m} points"
        )));
    }
    let mut selected = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut order = Vec::with_capacity(n);
    let mut current = seed_index;
    for _ in 0..n {
        selected[current] = true;
        order.push(current);
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(CenterSet {
        centers: order.iter().map(|&i| pts[i]).collect(),
        source_indices: order,
    })
}

/// The `k` nearest cloud points of every center, nearest first.
pub fn knn(centers: &CenterSet, cloud: &PointCloud, k: usize) -> Result<PatchSet> {
    let pts = cloud.points();
    let m = pts.len();
    if k == 0 || k > m {
        return Err(invalid_arg(format!("knn: k = {k} must be in 1..={m}")));
    }
    let mut points = Vec::with_capacity(centers.len() * k);
    let mut source_indices = Vec::with_capacity(centers.len() * k);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for c in &centers.centers {
        keyed.clear();
        keyed.extend(pts.iter().enumerate().map(|(i, p)| (sq_dist(p, c), i)));
        if k < m {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut keyed[..k];
        nearest.sort_unstable_by(cmp);
        for &(_, i) in nearest.iter() {
            points.push(pts[i]);
            source_indices.push(i);
        }
    }
    Ok(PatchSet {
        points,
        source_indices,
        k,
    })
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn from_points(points: &[Point]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self { min, max }
    }
}

/// Interleaved Morton (Z-order) code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MortonKey(pub u64);

pub const MORTON_BITS: u32 = 21;

/// Spreads the low 21 bits of `v` so that bit `b` lands at position `3b`.
#[inline]
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves three axis cells, x in the least significant position.
pub fn interleave(cells: [u32; 3]) -> MortonKey {
    MortonKey(spread_bits(cells[0] as u64) | (spread_bits(cells[1] as u64) << 1) | (spread_bits(cells[2] as u64) << 2))
}

/// Floor-quantizes each axis of `coord` into `[0, 2^bits - 1]` over `bbox`.
pub fn quantize(coord: &Point, bbox: &Aabb, bits_per_axis: u32) -> [u32; 3] {
    let cells = 1u64 << bits_per_axis;
    let top = (cells - 1) as f64;
    let mut out = [0u32; 3];
    for a in 0..3 {
        let extent = bbox.max[a] - bbox.min[a];
        if extent > 0.0 && extent.is_finite() {
            let t = (coord[a] - bbox.min[a]) / extent * cells as f64;
            out[a] = t.floor().clamp(0.0, top) as u32;
        }
    }
    out
}

pub fn morton_encode(coord: &Point, bbox: &Aabb, bits_per_axis: u32) -> Result<MortonKey> {
    if bits_per_axis == 0 || bits_per_axis > MORTON_BITS {
        return Err(invalid_arg(format!(
            "morton_encode: bits_per_axis = {bits_per_axis} must be in 1..=21"
        )));
    }
    Ok(interleave(quantize(coord, bbox, bits_per_axis)))
}

/// Morton keys of the centers over their own bounding box.
pub fn morton_keys(centers: &CenterSet) -> Vec<MortonKey> {
    let bbox = Aabb::from_points(&centers.centers);
    centers
        .centers
        .iter()
        .map(|c| interleave(quantize(c, &bbox, MORTON_BITS)))
        .collect()
}

/// Stable ascending sort of centers (and their patches) by Morton key.
pub fn sort_by_morton(centers: &CenterSet, patches: &PatchSet) -> Result<(SortedSequenceIndex, CenterSet, PatchSet)> {
    let n = centers.len();
    if patches.num_patches() != n {
        return Err(shape_err(format!(
            "sort_by_morton: {n} centers but {} patches",
            patches.num_patches()
        )));
    }
    let keys = morton_keys(centers);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));

    let k = patches.k;
    let mut sorted_centers = Vec::with_capacity(n);
    let mut sorted_src = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n * k);
    let mut patch_src = Vec::with_capacity(n * k);
    for &i in &order {
        sorted_centers.push(centers.centers[i]);
        sorted_src.push(centers.source_indices[i]);
        points.extend_from_slice(patches.patch(i));
        patch_src.extend_from_slice(&patches.source_indices[i * k..(i + 1) * k]);
    }
    Ok((
        SortedSequenceIndex { order },
        CenterSet {
            centers: sorted_centers,
            source_indices: sorted_src,
        },
        PatchSet {
            points,
            source_indices: patch_src,
            k,
        },
    ))
}

/// Re-expresses every patch row relative to its center.
pub fn normalize_patches(patches: &PatchSet, centers: &CenterSet) -> Result<PatchSet> {
    let n = centers.len();
    if patches.num_patches() != n {
        return Err(shape_err(format!(
            "normalize_patches: {n} centers but {} patches",
            patches.num_patches()
        )));
    }
    let k = patches.k;
    let points = patches
        .points
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let c = centers.centers[r / k];
            [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
        })
        .collect();
    Ok(PatchSet {
        points,
        source_indices: patches.source_indices.clone(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(matches!(
            PointCloud::new(vec![[0.0, f64::NAN, 0.0]]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fps_unit_square_picks_opposite_corner() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let s = fps(&c, 2, 0).unwrap();
        assert_eq!(s.source_indices, vec![0, 3]);
        assert_eq!(s.centers[1], [1.0, 1.0, 0.0]);
    }

    #[test]
    fn fps_edge_cases() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        assert_eq!(fps(&c, 1, 0).unwrap().source_indices, vec![0]);
        let all = fps(&c, 4, 0).unwrap();
        assert_eq!(all.source_indices, vec![0, 2, 1, 3]);
        assert!(matches!(fps(&c, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(fps(&c, 0, 0).is_err());
        assert!(fps(&c, 2, 4).is_err());
    }

    #[test]
    fn knn_collinear() {
        let c = cloud(&[
            [3.0, 0.0, 0.0],
            [0.0; 3],
            [4.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ]);
        let centers = CenterSet {
            centers: vec![[0.0; 3]],
            source_indices: vec![1],
        };
        let p = knn(&centers, &c, 3).unwrap();
        let xs: Vec<f64> = p.points.iter().map(|q| q[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0]);
        assert_eq!(p.source_indices, vec![1, 3, 4]);
        assert!(knn(&centers, &c, 6).is_err());
        let full = knn(&centers, &c, 5).unwrap();
        let mut idx = full.source_indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let c = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let centers = CenterSet {
            centers: vec![[0.0; 3]],
            source_indices: vec![2],
        };
        let p = knn(&centers, &c, 2).unwrap();
        assert_eq!(p.source_indices, vec![2, 0]);
    }

    #[test]
    fn morton_corners_and_axes() {
        let bbox = Aabb {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        assert_eq!(morton_encode(&[0.0; 3], &bbox, 21).unwrap(), MortonKey(0));
        assert_eq!(
            morton_encode(&[1.0; 3], &bbox, 21).unwrap(),
            MortonKey((1u64 << 63) - 1)
        );
        assert_eq!(interleave([1, 0, 0]), MortonKey(1));
        assert_eq!(interleave([0, 1, 0]), MortonKey(2));
        assert_eq!(interleave([0, 0, 1]), MortonKey(4));
        // Quarter cells at 2 bits: x = 0.25 lands in cell 1.
        assert_eq!(morton_encode(&[0.25, 0.0, 0.0], &bbox, 2).unwrap(), MortonKey(1));
        assert!(morton_encode(&[0.0; 3], &bbox, 22).is_err());
    }

    #[test]
    fn morton_degenerate_axis_is_cell_zero() {
        let bbox = Aabb {
            min: [0.0, 2.0, 0.0],
            max: [1.0, 2.0, 1.0],
        };
        assert_eq!(quantize(&[1.0, 2.0, 0.0], &bbox, 21), [(1 << 21) - 1, 0, 0]);
    }

    #[test]
    fn normalize_round_trip() {
        let centers = CenterSet {
            centers: vec![[0.5, -1.0, 2.0], [0.0; 3]],
            source_indices: vec![0, 1],
        };
        let patches = PatchSet {
            points: vec![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            source_indices: vec![0, 0, 1, 2],
            k: 2,
        };
        let n = normalize_patches(&patches, &centers).unwrap();
        assert_eq!(n.patch(0), &[[0.0; 3], [0.0; 3]]);
        assert_eq!(n.patch(1), patches.patch(1));
        let restored: Vec<Point> = n
            .points
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let c = centers.centers[r / 2];
                [p[0] + c[0], p[1] + c[1], p[2] + c[2]]
            })
            .collect();
        assert_eq!(restored, patches.points);
    }

    #[test]
    fn sort_single_and_sorted() {
        let centers = CenterSet {
            centers: vec![[0.3, 0.1, 0.2]],
            source_indices: vec![4],
        };
        let patches = PatchSet {
            points: vec![[0.0; 3]],
            source_indices: vec![0],
            k: 1,
        };
        let (o, _, _) = sort_by_morton(&centers, &patches).unwrap();
        assert_eq!(o.order, vec![0]);

        let line = CenterSet {
            centers: vec![[0.0; 3], [0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]],
            source_indices: vec![0, 1, 2, 3],
        };
        let p = PatchSet {
            points: vec![[0.0; 3]; 4],
            source_indices: vec![0; 4],
            k: 1,
        };
        let (o, _, _) = sort_by_morton(&line, &p).unwrap();
        assert_eq!(o.order, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn fps_prefix_property(pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..60), frac in 0.0f64..1.0) {
            let c = cloud(&pts);
            let n = pts.len();
            let m = ((frac * n as f64) as usize).clamp(1, n);
            let full = fps(&c, n, 0).unwrap();
            let prefix = fps(&c, m, 0).unwrap();
            prop_assert_eq!(&full.source_indices[..m], &prefix.source_indices[..]);
            let mut idx = full.source_indices.clone();
            idx.sort();
            idx.dedup();
            prop_assert_eq!(idx.len(), n);
        }

        #[test]
        fn morton_monotone_per_axis(a in 0.0f64..1.0, b in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, axis in 0usize..3) {
            let bbox = Aabb { min: [0.0; 3], max: [1.0; 3] };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut p = [y, z, y];
            p[axis] = lo;
            let k_lo = morton_encode(&p, &bbox, 21).unwrap();
            p[axis] = hi;
            let k_hi = morton_encode(&p, &bbox, 21).unwrap();
            prop_assert!(k_lo <= k_hi);
        }

        #[test]
        fn sort_is_deterministic_permutation(pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..40)) {
            let centers = CenterSet { source_indices: (0..pts.len()).collect(), centers: pts.clone() };
            let patches = PatchSet { points: pts.clone(), source_indices: (0..pts.len()).collect(), k: 1 };
            let (o1, c1, p1) = sort_by_morton(&centers, &patches).unwrap();
            let (o2, c2, p2) = sort_by_morton(&centers, &patches).unwrap();
            prop_assert!(o1.is_permutation());
            prop_assert_eq!(o1, o2);
            prop_assert_eq!(c1, c2);
            prop_assert_eq!(p1, p2);
        }
    }
}

//! Turns a raw cloud into an ordered token sequence: patch partitioning,
//! Morton sorting, mini-PointNet embedding, absolute positional encodings of
//! the sorted centers and relative direction prompts between neighbours.

use rand::Rng;

use crate::error::{invalid_arg, Result};
use crate::geometry::{self, CenterSet, PatchSet, Point, PointCloud, SortedSequenceIndex};
use crate::nncore::{Ctx, Graph, Init, Linear, ParameterSet, Scalar, Tensor, Var};

pub const DEFAULT_POINTS: usize = 1024;
pub const DEFAULT_PATCHES: usize = 64;
pub const DEFAULT_PATCH_SIZE: usize = 32;
const PE_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequencerConfig {
    /// Points per input cloud (M).
    pub points: usize,
    /// Number of patches (n).
    pub patches: usize,
    /// Points per patch (k).
    pub patch_size: usize,
    /// Token channels (D); must be divisible by 6.
    pub channels: usize,
    /// Index of the first farthest-point-sampling center.
    pub fps_seed: usize,
}

impl SequencerConfig {
    pub fn new(patches: usize, patch_size: usize, channels: usize) -> Self {
        Self {
            points: DEFAULT_POINTS,
            patches,
            patch_size,
            channels,
            fps_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.patch_size == 0 {
            return Err(invalid_arg("patch count and patch size must be positive"));
        }
        if self.patches > self.points || self.patch_size > self.points {
            return Err(invalid_arg(format!(
                "n = {} and k = {} must not exceed M = {}",
                self.patches, self.patch_size, self.points
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(6) {
            return Err(invalid_arg(format!(
                "channel count {} must be a positive multiple of 6",
                self.channels
            )));
        }
        Ok(())
    }
}

impl Default for SequencerConfig {
    fn default() -> Self {
        Self::new(DEFAULT_PATCHES, DEFAULT_PATCH_SIZE, 96)
    }
}

/// Sinusoidal encoding of a real 3-vector into `channels` values.
///
/// Each axis owns a contiguous band of `channels / 3` entries laid out as
/// interleaved `(sin, cos)` pairs with frequencies `10000^(-i / pairs)`.
pub fn encode_point(p: &Point, channels: usize, out: &mut [f64]) {
    let band = channels / 3;
    let pairs = band / 2;
    for axis in 0..3 {
        let x = p[axis];
        for i in 0..pairs {
            let freq = PE_BASE.powf(-(i as f64) / pairs as f64);
            let a = x * freq;
            out[axis * band + 2 * i] = a.sin();
            out[axis * band + 2 * i + 1] = a.cos();
        }
    }
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(6) {
        return Err(invalid_arg(format!(
            "channel count {channels} must be a positive multiple of 6"
        )));
    }
    Ok(())
}

/// Absolute positional encoding of every sorted center, `n x D`.
pub fn absolute_positional_encoding(centers: &[Point], channels: usize) -> Result<Tensor<f64>> {
    check_channels(channels)?;
    let mut data = vec![0.0; centers.len() * channels];
    for (c, row) in centers.iter().zip(data.chunks_mut(channels)) {
        encode_point(c, channels, row);
    }
    Ok(Tensor::new(vec![centers.len(), channels], data))
}

/// Unit direction from each sorted center to the next; zero for coincident centers.
///
/// Components are snapped to the nearest `f32`, so the result depends on the
/// direction alone: rescaling the offsets shifts the `f64` quotient by a few
/// ulps, far below the `f32` grid, and the prompts stay bit-identical.
pub fn unit_offsets(centers: &[Point]) -> Vec<Point> {
    centers
        .windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm > 0.0 {
                d.map(|c| (c / norm) as f32 as f64)
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// Relative direction prompts, `(n - 1) x D`.
pub fn relative_direction_prompts(centers: &[Point], channels: usize) -> Result<Tensor<f64>> {
    if centers.len() < 2 {
        return Err(invalid_arg("relative direction prompts need at least two centers"));
    }
    absolute_positional_encoding(&unit_offsets(centers), channels)
}

/// Mini-PointNet patch embedder: shared MLP, max-pool, concat, shared MLP, max-pool.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub first: Linear,
    pub second: Linear,
    pub third: Linear,
    pub fourth: Linear,
    pub channels: usize,
}

impl PatchEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_channels(channels)?;
        let half = channels / 2;
        Ok(Self {
            first: Linear::new(params, &format!("{name}.first.0"), 3, half, Init::FanIn, rng)?,
            second: Linear::new(params, &format!("{name}.first.1"), half, half, Init::FanIn, rng)?,
            third: Linear::new(
                params,
                &format!("{name}.second.0"),
                channels,
                channels,
                Init::FanIn,
                rng,
            )?,
            fourth: Linear::new(
                params,
                &format!("{name}.second.1"),
                channels,
                channels,
                Init::FanIn,
                rng,
            )?,
            channels,
        })
    }

    /// `points` holds `g * k` center-relative rows of 3 coordinates; returns `g x D`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, points: Var, k: usize) -> Var {
        let h = self.first.forward(g, cx, points);
        let h = g.relu(h);
        let local = self.second.forward(g, cx, h);
        let global = g.group_max(local, k);
        let h = g.concat_broadcast(global, local, k);
        let h = self.third.forward(g, cx, h);
        let h = g.relu(h);
        let h = self.fourth.forward(g, cx, h);
        g.group_max(h, k)
    }
}

/// Geometry half of a sequence: everything that does not need parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSequence {
    pub order: SortedSequenceIndex,
    /// Sorted centers `C^s`.
    pub centers: CenterSet,
    /// Sorted center-relative patches `P^s`.
    pub patches: PatchSet,
    pub ape: Tensor<f64>,
    pub rdp: Tensor<f64>,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Prediction targets: sorted patches `1..n`, flat.
    pub fn targets(&self) -> &[Point] {
        &self.patches.points[self.patches.k..]
    }
}

/// Embedded sequence with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub prepared: PreparedSequence,
    /// Patch tokens `T`, `n x D`.
    pub tokens: Tensor<T>,
}

/// Partition, sort and normalize a cloud and compute its encodings.
pub fn prepare_sequence(cloud: &PointCloud, cfg: &SequencerConfig) -> Result<PreparedSequence> {
    check_channels(cfg.channels)?;
    if cfg.patches < 2 {
        return Err(invalid_arg("a sequence needs at least two patches"));
    }
    if cloud.len() < cfg.patches.max(cfg.patch_size) {
        return Err(invalid_arg(format!(
            "cloud has {} points but n = {} and k = {}",
            cloud.len(),
            cfg.patches,
            cfg.patch_size
        )));
    }
    let centers = geometry::fps(cloud, cfg.patches, cfg.fps_seed.min(cloud.len() - 1))?;
    let patches = geometry::knn(&centers, cloud, cfg.patch_size)?;
    let (order, sorted_centers, sorted_patches) = geometry::sort_by_morton(&centers, &patches)?;
    let normalized = geometry::normalize_patches(&sorted_patches, &sorted_centers)?;
    let ape = absolute_positional_encoding(&sorted_centers.centers, cfg.channels)?;
    let rdp = relative_direction_prompts(&sorted_centers.centers, cfg.channels)?;
    Ok(PreparedSequence {
        order,
        centers: sorted_centers,
        patches: normalized,
        ape,
        rdp,
    })
}

/// Flat `(n * k) x 3` tensor of patch coordinates.
pub fn patch_tensor<T: Scalar>(points: &[Point]) -> Tensor<T> {
    Tensor::new(
        vec![points.len(), 3],
        points.iter().flat_map(|p| p.iter().map(|&c| T::c(c))).collect(),
    )
}

pub fn embed_patches<T: Scalar>(patches: &PatchSet, embedder: &PatchEmbedder, params: &ParameterSet<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.input(patch_tensor(&patches.points));
    let cx = Ctx::new(params);
    let t = embedder.forward(&mut g, &cx, x, patches.k);
    g.value(t).clone()
}

/// Full pipeline: partition, sort, normalize, embed, encode.
pub fn build_sequence<T: Scalar>(
    cloud: &PointCloud,
    cfg: &SequencerConfig,
    embedder: &PatchEmbedder,
    params: &ParameterSet<T>,
) -> Result<TokenSequence<T>> {
    let prepared = prepare_sequence(cloud, cfg)?;
    let tokens = embed_patches(&prepared.patches, embedder, params);
    Ok(TokenSequence { prepared, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn origin_encodes_to_sin_zero_cos_one() {
        let mut row = vec![0.0; 12];
        encode_point(&[0.0; 3], 12, &mut row);
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn encoding_matches_direct_formula() {
        let d = 18;
        let t = absolute_positional_encoding(&[[0.5, 0.0, 0.0]], d).unwrap();
        // band 0: pairs = 3, freq_i = 10000^(-i/3)
        for i in 0..3 {
            let a = 0.5 / 10000f64.powf(i as f64 / 3.0);
            assert!((t.data()[2 * i] - a.sin()).abs() < 1e-15);
            assert!((t.data()[2 * i + 1] - a.cos()).abs() < 1e-15);
        }
        assert!(t.data()[6..]
            .iter()
            .enumerate()
            .all(|(i, &v)| v == if i % 2 == 0 { 0.0 } else { 1.0 }));
        assert!(absolute_positional_encoding(&[[0.0; 3]], 8).is_err());
    }

    fn rescaled(centers: &[Point], c: f64) -> Vec<Point> {
        let mut out = vec![centers[0]];
        for w in centers.windows(2) {
            let last = *out.last().unwrap();
            out.push(std::array::from_fn(|ax| last[ax] + c * (w[1][ax] - w[0][ax])));
        }
        out
    }

    proptest! {
        #[test]
        fn rdp_ignores_offset_length(
            pts in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 2..12),
            c in 0.05f64..20.0,
        ) {
            let a = relative_direction_prompts(&pts, 12).unwrap();
            let b = relative_direction_prompts(&rescaled(&pts, c), 12).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rdp_scale_invariance_and_collinear() {
        let centers = [[0.0, 0.0, 0.0], [0.3, 0.1, -0.2], [0.5, 0.5, 0.5], [-0.2, 0.9, 0.1]];
        let base = relative_direction_prompts(&centers, 12).unwrap();
        for c in [4.0, 0.37, 13.1] {
            assert_eq!(relative_direction_prompts(&rescaled(&centers, c), 12).unwrap(), base);
        }
        for u in unit_offsets(&centers) {
            assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(base.shape(), &[3, 12]);

        let line: Vec<Point> = (0..5).map(|i| [i as f64 * 0.25, 0.0, 0.0]).collect();
        let r = relative_direction_prompts(&line, 12).unwrap();
        for i in 1..4 {
            assert_eq!(r.row(i), r.row(0));
        }
        let same = relative_direction_prompts(&[[0.1; 3], [0.1; 3]], 6).unwrap();
        assert_eq!(same.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(relative_direction_prompts(&line[..1], 12).is_err());
    }

    fn embedder(d: usize, seed: u64) -> (PatchEmbedder, ParameterSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let e = PatchEmbedder::new(&mut ps, "embed", d, &mut rng).unwrap();
        (e, ps)
    }

    #[test]
    fn embedding_is_permutation_and_duplication_invariant() {
        let (e, ps) = embedder(12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..8)
            .map(|_| {
                [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ]
            })
            .collect();
        let set = |p: Vec<Point>| PatchSet {
            k: p.len(),
            source_indices: vec![0; p.len()],
            points: p,
        };
        let base = embed_patches(&set(pts.clone()), &e, &ps);
        let mut perm = pts.clone();
        perm.reverse();
        perm.swap(0, 3);
        assert_eq!(embed_patches(&set(perm), &e, &ps), base);
        let mut dup = pts.clone();
        dup.extend_from_slice(&pts);
        assert_eq!(embed_patches(&set(dup), &e, &ps), base);
    }
}

//! Synthetic shape corpora, augmentation, the binary dataset file and the
//! split manifest.
//!
//! Five analytic surface classes are sampled uniformly by area. Every shape
//! is built around the origin, scaled so its farthest point has norm one and
//! rounded to `f32`, so that writing and reading a dataset is bit-exact.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::Reader;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{Point, PointCloud};

pub const DATASET_MAGIC: &[u8; 4] = b"PGPT";
pub const DATASET_VERSION: u16 = 1;
pub const DEFAULT_CLOUD_POINTS: usize = 1024;
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sphere", "cube", "cylinder", "cone", "torus"];

/// Analytic surface with its size parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box with full side lengths.
    Cuboid {
        extents: [f64; 3],
    },
    /// Closed cylinder around the z axis.
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Closed cone around the z axis, apex up.
    Cone {
        radius: f64,
        height: f64,
    },
    /// Torus in the xy plane.
    Torus {
        major: f64,
        minor: f64,
    },
}

impl ShapeKind {
    pub fn class(&self) -> usize {
        match self {
            Self::Sphere { .. } => 0,
            Self::Cuboid { .. } => 1,
            Self::Cylinder { .. } => 2,
            Self::Cone { .. } => 3,
            Self::Torus { .. } => 4,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sphere { radius } => radius > 0.0,
            Self::Cuboid { extents } => extents.iter().all(|&e| e > 0.0),
            Self::Cylinder { radius, height } | Self::Cone { radius, height } => radius > 0.0 && height > 0.0,
            Self::Torus { major, minor } => minor > 0.0 && major > minor,
        };
        if ok && self.params().iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(invalid_arg(format!("invalid shape parameters {self:?}")))
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Self::Sphere { radius } => vec![radius],
            Self::Cuboid { extents } => extents.to_vec(),
            Self::Cylinder { radius, height } | Self::Cone { radius, height } => vec![radius, height],
            Self::Torus { major, minor } => vec![major, minor],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub label: usize,
}

impl ShapeSpec {
    /// Spec labelled with the shape's own class.
    pub fn new(kind: ShapeKind) -> Self {
        Self {
            label: kind.class(),
            kind,
        }
    }
}

/// Where a generated record came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub spec: ShapeSpec,
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudRecord {
    pub cloud: PointCloud,
    pub label: usize,
    /// Absent for records read back from a file.
    pub provenance: Option<Provenance>,
}

/// Samples `m` points uniformly by area on the raw, unnormalized surface.
pub fn sample_surface<R: Rng + ?Sized>(kind: &ShapeKind, m: usize, rng: &mut R) -> Result<Vec<Point>> {
    kind.validate()?;
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        out.push(match *kind {
            ShapeKind::Sphere { radius } => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [radius * v[0] / n, radius * v[1] / n, radius * v[2] / n];
                }
            },
            ShapeKind::Cuboid { extents } => sample_cuboid(extents, rng),
            ShapeKind::Cylinder { radius, height } => {
                let lateral = TAU * radius * height;
                let cap = PI * radius * radius;
                let u = rng.random::<f64>() * (lateral + 2.0 * cap);
                if u < lateral {
                    let a = rng.random::<f64>() * TAU;
                    let z = (rng.random::<f64>() - 0.5) * height;
                    [radius * a.cos(), radius * a.sin(), z]
                } else {
                    let z = if u < lateral + cap { 0.5 * height } else { -0.5 * height };
                    let (x, y) = disk(radius, rng);
                    [x, y, z]
                }
            }
            ShapeKind::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let lateral = PI * radius * slant;
                let base = PI * radius * radius;
                if rng.random::<f64>() * (lateral + base) < lateral {
                    // distance from the apex grows with the square root for uniform area
                    let t = rng.random::<f64>().sqrt();
                    let a = rng.random::<f64>() * TAU;
                    [radius * t * a.cos(), radius * t * a.sin(), 0.5 * height - t * height]
                } else {
                    let (x, y) = disk(radius, rng);
                    [x, y, -0.5 * height]
                }
            }
            ShapeKind::Torus { major, minor } => {
                // area element is proportional to (R + r cos v)
                let v = loop {
                    let v = rng.random::<f64>() * TAU;
                    if rng.random::<f64>() * (major + minor) <= major + minor * v.cos() {
                        break v;
                    }
                };
                let u = rng.random::<f64>() * TAU;
                let ring = major + minor * v.cos();
                [ring * u.cos(), ring * u.sin(), minor * v.sin()]
            }
        });
    }
    Ok(out)
}

fn disk<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random::<f64>() * TAU;
    (r * a.cos(), r * a.sin())
}

fn sample_cuboid<R: Rng + ?Sized>(e: [f64; 3], rng: &mut R) -> Point {
    // faces normal to x, y, z come in pairs with areas e1*e2, e0*e2, e0*e1
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total = areas.iter().sum::<f64>();
    let mut u = rng.random::<f64>() * total;
    let mut axis = 2;
    for (i, &a) in areas.iter().enumerate() {
        if u < a {
            axis = i;
            break;
        }
        u -= a;
    }
    let mut p = [0.0; 3];
    for (i, c) in p.iter_mut().enumerate() {
        *c = (rng.random::<f64>() - 0.5) * e[i];
    }
    p[axis] = if rng.random::<bool>() {
        0.5 * e[axis]
    } else {
        -0.5 * e[axis]
    };
    p
}

/// Scales origin-centred points so the farthest has norm one, then rounds to `f32`.
pub fn normalize_unit_ball(points: &mut [Point]) {
    let max = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let inv = if max > 0.0 { 1.0 / max } else { 1.0 };
    for p in points.iter_mut() {
        for c in p.iter_mut() {
            *c = ((*c * inv) as f32) as f64;
        }
    }
}

pub fn generate_shape<R: Rng + ?Sized>(spec: &ShapeSpec, m: usize, rng: &mut R) -> Result<CloudRecord> {
    if m == 0 {
        return Err(invalid_arg("need at least one point"));
    }
    if spec.label >= u16::MAX as usize {
        return Err(invalid_arg("label does not fit the dataset format"));
    }
    let mut points = sample_surface(&spec.kind, m, rng)?;
    normalize_unit_ball(&mut points);
    Ok(CloudRecord {
        cloud: PointCloud::new(points)?,
        label: spec.label,
        provenance: None,
    })
}

/// Shape parameter pools; B uses ranges disjoint from A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    A,
    B,
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(invalid_arg(format!("unknown pool {other}"))),
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl Pool {
    /// Draws the parameters of a shape of class `class`.
    pub fn draw<R: Rng + ?Sized>(self, class: usize, rng: &mut R) -> ShapeKind {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        // aspect ranges of the two pools do not overlap
        match (self, class % NUM_CLASSES) {
            (Pool::A, 0) => ShapeKind::Sphere { radius: u(0.5, 1.0) },
            (Pool::B, 0) => ShapeKind::Sphere { radius: u(1.0, 1.5) },
            (Pool::A, 1) => ShapeKind::Cuboid {
                extents: [u(0.5, 1.0), u(0.5, 1.0), u(0.5, 1.0)],
            },
            (Pool::B, 1) => ShapeKind::Cuboid {
                extents: [u(1.0, 2.0), u(0.3, 0.5), u(1.0, 2.0)],
            },
            (Pool::A, 2) => {
                let radius = u(0.3, 0.6);
                ShapeKind::Cylinder {
                    radius,
                    height: radius * u(1.5, 3.0),
                }
            }
            (Pool::B, 2) => {
                let radius = u(0.6, 0.9);
                ShapeKind::Cylinder {
                    radius,
                    height: radius * u(0.6, 1.5),
                }
            }
            (Pool::A, 3) => {
                let radius = u(0.3, 0.6);
                ShapeKind::Cone {
                    radius,
                    height: radius * u(1.5, 3.0),
                }
            }
            (Pool::B, 3) => {
                let radius = u(0.6, 0.9);
                ShapeKind::Cone {
                    radius,
                    height: radius * u(0.6, 1.5),
                }
            }
            (Pool::A, _) => {
                let major = u(0.6, 0.9);
                ShapeKind::Torus {
                    major,
                    minor: major * u(0.2, 0.4),
                }
            }
            (Pool::B, _) => {
                let major = u(0.9, 1.2);
                ShapeKind::Torus {
                    major,
                    minor: major * u(0.4, 0.6),
                }
            }
        }
    }
}

/// Independent generator for record `index` of a corpus seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` records with labels cycling through the classes.
pub fn generate_pool(pool: Pool, count: usize, points: usize, seed: u64) -> Result<Vec<CloudRecord>> {
    (0..count)
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let spec = ShapeSpec::new(pool.draw(i % NUM_CLASSES, &mut rng));
            let mut rec = generate_shape(&spec, points, &mut rng)?;
            rec.provenance = Some(Provenance {
                spec,
                seed,
                index: i as u64,
            });
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Random rotation about the up (z) axis.
    pub rotate: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.2,
            rotate: true,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            rotate: false,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }
}

pub fn rotate_about_up(points: &[Point], angle: f64) -> Vec<Point> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect()
}

/// Random scale, rotation about z and clipped Gaussian jitter.
pub fn augment<R: Rng + ?Sized>(record: &CloudRecord, rng: &mut R, cfg: &AugmentConfig) -> Result<CloudRecord> {
    if !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) || cfg.jitter_sigma < 0.0 || cfg.jitter_clip < 0.0 {
        return Err(invalid_arg(format!("invalid augmentation config {cfg:?}")));
    }
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    };
    let mut points: Vec<Point> = if cfg.rotate {
        rotate_about_up(record.cloud.points(), rng.random::<f64>() * TAU)
    } else {
        record.cloud.points().to_vec()
    };
    for p in points.iter_mut() {
        for c in p.iter_mut() {
            *c *= scale;
            if cfg.jitter_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                *c += (cfg.jitter_sigma * n).clamp(-cfg.jitter_clip, cfg.jitter_clip);
            }
        }
    }
    Ok(CloudRecord {
        cloud: PointCloud::new(points)?,
        label: record.label,
        provenance: record.provenance,
    })
}

pub fn encode_dataset(records: &[CloudRecord]) -> Result<Vec<u8>> {
    let count = u32::try_from(records.len()).map_err(|_| invalid_arg("too many records"))?;
    let mut out = Vec::with_capacity(10 + records.iter().map(|r| 6 + 12 * r.cloud.len()).sum::<usize>());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let label = u16::try_from(r.label).map_err(|_| invalid_arg(format!("label {} exceeds u16", r.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&(r.cloud.len() as u32).to_le_bytes());
        for p in r.cloud.points() {
            for &c in p {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<CloudRecord>> {
    let mut r = Reader::new(bytes, "dataset");
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(r.remaining() / 6));
    for i in 0..count {
        let label = r.u16()? as usize;
        let n = r.u32()? as usize;
        if n.checked_mul(12).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Format(format!(
                "truncated dataset: record {i} declares {n} points"
            )));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
        }
        let cloud = PointCloud::new(points).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        records.push(CloudRecord {
            cloud,
            label,
            provenance: None,
        });
    }
    if !r.is_done() {
        return Err(Error::Format(format!("{} trailing bytes after dataset", r.remaining())));
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[CloudRecord]) -> Result<()> {
    fs::write(path, encode_dataset(records)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<CloudRecord>> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Format(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Manifest with every record in the train split.
    pub fn from_records(records: &[CloudRecord], seed: u64) -> Self {
        Self {
            seed,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            entries: records
                .iter()
                .enumerate()
                .map(|(index, r)| ManifestEntry {
                    index,
                    label: r.label,
                    split: Split::Train,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.index)
            .collect()
    }

    /// `# seed` and `# classes` header lines, then `index<TAB>label<TAB>split`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed = {}\n# classes = {}\n", self.seed, self.class_names.join(","));
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.index, e.label, e.split));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut class_names = Vec::new();
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    match k.trim() {
                        "seed" => {
                            seed = v
                                .trim()
                                .parse()
                                .map_err(|_| Error::Format(format!("manifest line {}: bad seed", ln + 1)))?
                        }
                        "classes" => class_names = v.trim().split(',').map(str::to_string).collect(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("manifest line {}: expected index<TAB>label<TAB>split", ln + 1));
            let mut f = line.split('\t');
            let (Some(i), Some(l), Some(s), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            entries.push(ManifestEntry {
                index: i.parse().map_err(|_| bad())?,
                label: l.parse().map_err(|_| bad())?,
                split: s.parse()?,
            });
        }
        Ok(Self {
            seed,
            class_names,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Seeded, class-stratified train/val/test assignment.
///
/// Each class is shuffled independently and divided by largest remainder,
/// so per-class split sizes are within one record of their targets. Every
/// split with a positive fraction receives at least one record per class.
pub fn make_splits(manifest: &DatasetManifest, seed: u64, fractions: [f64; 3]) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid_arg(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (pos, e) in manifest.entries.iter().enumerate() {
        if by_class.len() <= e.label {
            by_class.resize(e.label + 1, Vec::new());
        }
        by_class[e.label].push(pos);
    }
    let mut out = manifest.clone();
    out.seed = seed;
    for (class, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < needed {
            return Err(Error::UnderfilledClass {
                class,
                available: n,
                needed,
            });
        }
        let mut rng = record_rng(seed, class as u64);
        members.shuffle(&mut rng);
        let counts = split_counts(n, fractions);
        let mut it = members.iter();
        for (split, &c) in Split::ALL.iter().zip(&counts) {
            for &pos in it.by_ref().take(c) {
                out.entries[pos].split = *split;
            }
        }
    }
    Ok(out)
}

fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let targets = fractions.map(|f| f * n as f64);
    let mut counts = targets.map(|t| t.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        (targets[b] - targets[b].floor())
            .total_cmp(&(targets[a] - targets[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn unit_sphere_norms() {
        let rec = generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: 1.0 }), 2000, &mut rng()).unwrap();
        for p in rec.cloud.points() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-6, "{n}");
        }
    }

    #[test]
    fn cube_points_lie_on_faces() {
        let pts = sample_surface(
            &ShapeKind::Cuboid {
                extents: [2.0, 1.0, 0.5],
            },
            3000,
            &mut rng(),
        )
        .unwrap();
        let half = [1.0, 0.5, 0.25];
        for p in &pts {
            assert!((0..3).any(|i| p[i].abs() == half[i]));
        }
    }

    #[test]
    fn cube_face_counts_are_area_uniform() {
        let m = 100_000;
        let pts = sample_surface(&ShapeKind::Cuboid { extents: [1.0; 3] }, m, &mut rng()).unwrap();
        let mut faces = [0usize; 6];
        for p in &pts {
            let axis = (0..3).find(|&i| p[i].abs() == 0.5).unwrap();
            faces[2 * axis + usize::from(p[axis] > 0.0)] += 1;
        }
        let expect = m as f64 / 6.0;
        let sigma = (m as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in faces {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "{faces:?}");
        }
    }

    #[test]
    fn every_class_is_normalized() {
        for pool in [Pool::A, Pool::B] {
            for rec in generate_pool(pool, 10, 256, 3).unwrap() {
                let max = rec
                    .cloud
                    .points()
                    .iter()
                    .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                    .fold(0.0, f64::max);
                assert!(max <= 1.0 + 1e-6 && max > 0.999, "{max}");
                assert_eq!(rec.label, rec.provenance.unwrap().spec.label);
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(sample_surface(&ShapeKind::Sphere { radius: 0.0 }, 1, &mut rng()).is_err());
        assert!(sample_surface(&ShapeKind::Torus { major: 0.1, minor: 0.2 }, 1, &mut rng()).is_err());
        assert!(generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: 1.0 }), 0, &mut rng()).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_pool(Pool::A, 7, 64, 5).unwrap(),
            generate_pool(Pool::A, 7, 64, 5).unwrap()
        );
        assert_ne!(
            generate_pool(Pool::A, 7, 64, 5).unwrap(),
            generate_pool(Pool::A, 7, 64, 6).unwrap()
        );
    }

    #[test]
    fn identity_and_full_turn_augmentation() {
        let rec = &generate_pool(Pool::A, 1, 128, 1).unwrap()[0];
        let same = augment(rec, &mut rng(), &AugmentConfig::identity()).unwrap();
        assert_eq!(&same, rec);
        let turned = rotate_about_up(rec.cloud.points(), TAU);
        for (a, b) in turned.iter().zip(rec.cloud.points()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn augmentation_scale_bounds() {
        let rec = CloudRecord {
            cloud: PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap(),
            label: 2,
            provenance: None,
        };
        let cfg = AugmentConfig {
            jitter_sigma: 0.0,
            ..AugmentConfig::default()
        };
        let mut r = rng();
        for _ in 0..10_000 {
            let out = augment(&rec, &mut r, &cfg).unwrap();
            let p = out.cloud.points()[0];
            let s = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((0.8 - 1e-12..=1.2 + 1e-12).contains(&s));
            assert_eq!(out.label, 2);
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let rec = CloudRecord {
            cloud: PointCloud::new(vec![[0.0; 3]; 1000]).unwrap(),
            label: 0,
            provenance: None,
        };
        let cfg = AugmentConfig {
            jitter_sigma: 1.0,
            ..AugmentConfig::identity()
        };
        let out = augment(&rec, &mut rng(), &cfg).unwrap();
        assert!(out
            .cloud
            .points()
            .iter()
            .flatten()
            .all(|c| c.abs() <= 0.0 + cfg.jitter_clip));
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let recs = generate_pool(Pool::B, 6, 50, 9).unwrap();
        let bytes = encode_dataset(&recs).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.cloud, b.cloud);
            assert_eq!(a.label, b.label);
        }
        let empty = encode_dataset(&[]).unwrap();
        assert_eq!(empty.len(), 10);
        assert!(decode_dataset(&empty).unwrap().is_empty());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode_dataset(&ver), Err(Error::Version { found: 2, .. })));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn manifest_text_round_trip() {
        let recs = generate_pool(Pool::A, 20, 8, 1).unwrap();
        let m = make_splits(&DatasetManifest::from_records(&recs, 0), 4, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse("1\t2\n").is_err());
    }

    #[test]
    fn split_properties() {
        let recs = generate_pool(Pool::A, 53, 4, 2).unwrap();
        let base = DatasetManifest::from_records(&recs, 0);
        let all = make_splits(&base, 1, [1.0, 0.0, 0.0]).unwrap();
        assert!(all.entries.iter().all(|e| e.split == Split::Train));
        let a = make_splits(&base, 7, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(a, make_splits(&base, 7, [0.7, 0.1, 0.2]).unwrap());
        for class in 0..NUM_CLASSES {
            let members: Vec<_> = a.entries.iter().filter(|e| e.label == class).collect();
            let train = members.iter().filter(|e| e.split == Split::Train).count() as f64;
            assert!((train - 0.7 * members.len() as f64).abs() <= 1.0);
        }
        let tiny = DatasetManifest::from_records(&recs[..10], 0);
        assert!(matches!(
            make_splits(&tiny, 0, [0.4, 0.3, 0.3]),
            Err(Error::UnderfilledClass {
                available: 2,
                needed: 3,
                ..
            })
        ));
        assert!(make_splits(&base, 0, [0.5, 0.2, 0.2]).is_err());
    }
}

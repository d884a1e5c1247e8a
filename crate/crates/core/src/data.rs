//! Synthetic shapes, point-cloud files, occlusion, splits and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{normalize, renormalize, Point, PointCloud};

/// Analytic surfaces with their shape parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { size: [f64; 3] },
    /// Closed cylinder along z.
    Cylinder { radius: f64, height: f64 },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
    /// Square plate in the xy plane with a centered circular hole.
    PlaneWithHole { width: f64, depth: f64, hole_radius: f64 },
    /// Seat, four legs and a back rest built from boxes.
    Chair { seat: [f64; 3], leg_height: f64, leg_width: f64, back_height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Shape,
    pub n_points: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug)]
enum Patch {
    /// Parallelogram `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
    Rect { origin: Point, u: Point, v: Point },
    Sphere { radius: f64 },
    CylinderSide { radius: f64, z0: f64, height: f64 },
    /// Horizontal disk at height `z`.
    Disk { radius: f64, z: f64 },
    Torus { major: f64, minor: f64 },
    HoledRect { width: f64, depth: f64, hole: f64 },
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Patch {
    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Patch::Rect { u, v, .. } => norm(cross(u, v)),
            Patch::Sphere { radius } => 4.0 * PI * radius * radius,
            Patch::CylinderSide { radius, height, .. } => 2.0 * PI * radius * height,
            Patch::Disk { radius, .. } => PI * radius * radius,
            Patch::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Patch::HoledRect { width, depth, hole } => width * depth - PI * hole * hole,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        use std::f64::consts::TAU;
        match *self {
            Patch::Rect { origin, u, v } => {
                let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
                [0, 1, 2].map(|k| origin[k] + s * u[k] + t * v[k])
            }
            Patch::Sphere { radius } => loop {
                let p: Point = [0; 3].map(|_| StandardNormal.sample(rng));
                let n = norm(p);
                if n > 1e-12 {
                    break p.map(|c| radius * c / n);
                }
            },
            Patch::CylinderSide { radius, z0, height } => {
                let a = rng.random::<f64>() * TAU;
                [radius * a.cos(), radius * a.sin(), z0 + rng.random::<f64>() * height]
            }
            Patch::Disk { radius, z } => {
                let (r, a) = (radius * rng.random::<f64>().sqrt(), rng.random::<f64>() * TAU);
                [r * a.cos(), r * a.sin(), z]
            }
            Patch::Torus { major, minor } => loop {
                let (u, v) = (rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
                let ring = major + minor * v.cos();
                if rng.random::<f64>() * (major + minor) <= ring {
                    break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            },
            Patch::HoledRect { width, depth, hole } => loop {
                let x = (rng.random::<f64>() - 0.5) * width;
                let y = (rng.random::<f64>() - 0.5) * depth;
                if x * x + y * y >= hole * hole {
                    break [x, y, 0.0];
                }
            },
        }
    }
}

/// The six faces of an axis-aligned box with corner `lo` and extent `size`.
fn box_faces(lo: Point, size: [f64; 3]) -> Vec<Patch> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut u = [0.0; 3];
        let mut v = [0.0; 3];
        u[a] = size[a];
        v[b] = size[b];
        for side in [0.0, size[axis]] {
            let mut origin = lo;
            origin[axis] += side;
            faces.push(Patch::Rect { origin, u, v });
        }
    }
    faces
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let positive = |vals: &[f64]| vals.iter().all(|v| v.is_finite() && *v > 0.0);
        let ok = match self {
            Shape::Sphere { radius } => positive(&[*radius]),
            Shape::Box { size } => positive(size),
            Shape::Cylinder { radius, height } => positive(&[*radius, *height]),
            Shape::Torus { major, minor } => positive(&[*major, *minor]) && minor < major,
            Shape::PlaneWithHole { width, depth, hole_radius } => {
                positive(&[*width, *depth, *hole_radius]) && 2.0 * hole_radius < width.min(*depth)
            }
            Shape::Chair { seat, leg_height, leg_width, back_height } => {
                positive(seat)
                    && positive(&[*leg_height, *leg_width, *back_height])
                    && 2.0 * leg_width < seat[0].min(seat[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shape parameters {self:?}")))
        }
    }

    fn patches(&self) -> Vec<Patch> {
        match *self {
            Shape::Sphere { radius } => vec![Patch::Sphere { radius }],
            Shape::Box { size } => box_faces(size.map(|s| -s / 2.0), size),
            Shape::Cylinder { radius, height } => vec![
                Patch::CylinderSide { radius, z0: -height / 2.0, height },
                Patch::Disk { radius, z: -height / 2.0 },
                Patch::Disk { radius, z: height / 2.0 },
            ],
            Shape::Torus { major, minor } => vec![Patch::Torus { major, minor }],
            Shape::PlaneWithHole { width, depth, hole_radius } => {
                vec![Patch::HoledRect { width, depth, hole: hole_radius }]
            }
            Shape::Chair { seat, leg_height, leg_width, back_height } => {
                let (w, d, t) = (seat[0], seat[1], seat[2]);
                let mut p = box_faces([-w / 2.0, -d / 2.0, 0.0], seat);
                for (x, y) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                    let lo = [-w / 2.0 + x * (w - leg_width), -d / 2.0 + y * (d - leg_width), -leg_height];
                    p.extend(box_faces(lo, [leg_width, leg_width, leg_height]));
                }
                p.extend(box_faces([-w / 2.0, d / 2.0 - t, t], [w, t, back_height]));
                p
            }
        }
    }
}

/// Area-weighted uniform surface samples plus isotropic Gaussian noise.
pub fn sample_synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<PointCloud> {
    spec.shape.validate()?;
    if spec.n_points == 0 || !(spec.noise_sigma >= 0.0) {
        return Err(Error::Config("synthetic sampling needs n_points ≥ 1 and noise ≥ 0".into()));
    }
    let patches = spec.shape.patches();
    let mut cumulative = Vec::with_capacity(patches.len());
    let mut total = 0.0;
    for p in &patches {
        total += p.area();
        cumulative.push(total);
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let points = (0..spec.n_points)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c <= r).min(patches.len() - 1);
            let p = patches[idx].sample(rng);
            if spec.noise_sigma > 0.0 {
                p.map(|c| c + noise.sample(rng))
            } else {
                p
            }
        })
        .collect();
    PointCloud::new(points)
}

/// Shape classes of the synthetic corpus, each drawing its own parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Box,
    Slab,
    Cylinder,
    Disk,
    Torus,
    PlaneWithHole,
    Chair,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Slab,
        ShapeClass::Cylinder,
        ShapeClass::Disk,
        ShapeClass::Torus,
        ShapeClass::PlaneWithHole,
        ShapeClass::Chair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Slab => "slab",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Disk => "disk",
            ShapeClass::Torus => "torus",
            ShapeClass::PlaneWithHole => "plane_with_hole",
            ShapeClass::Chair => "chair",
        }
    }

    pub fn draw(self, rng: &mut impl Rng) -> Shape {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match self {
            ShapeClass::Sphere => Shape::Sphere { radius: u(0.5, 1.5) },
            ShapeClass::Box => Shape::Box { size: [u(0.6, 1.4), u(0.6, 1.4), u(0.6, 1.4)] },
            ShapeClass::Slab => Shape::Box { size: [u(1.2, 1.8), u(1.2, 1.8), u(0.1, 0.3)] },
            ShapeClass::Cylinder => Shape::Cylinder { radius: u(0.3, 0.5), height: u(1.2, 2.0) },
            ShapeClass::Disk => Shape::Cylinder { radius: u(0.8, 1.0), height: u(0.1, 0.25) },
            ShapeClass::Torus => Shape::Torus { major: u(0.8, 1.0), minor: u(0.2, 0.4) },
            ShapeClass::PlaneWithHole => Shape::PlaneWithHole {
                width: u(1.5, 2.0),
                depth: u(1.5, 2.0),
                hole_radius: u(0.3, 0.6),
            },
            ShapeClass::Chair => Shape::Chair {
                seat: [u(0.9, 1.1), u(0.9, 1.1), u(0.08, 0.15)],
                leg_height: u(0.6, 0.9),
                leg_width: u(0.08, 0.12),
                back_height: u(0.8, 1.2),
            },
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub label: usize,
    pub cloud: PointCloud,
    pub partial: Option<PointCloud>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&ShapeRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Stratified assignment of records to train/val/test. Global split sizes
/// follow the ratios by largest remainder; within each class the records are
/// shuffled and interleaved across splits in proportion.
pub fn make_splits(labels: &[usize], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = labels.len();
    let used = ratios.iter().filter(|r| **r > 0.0).count();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count > 0 && count < used {
            return Err(Error::Config(format!("class {c} has {count} records, fewer than the {used} splits")));
        }
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut target: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - target.iter().sum::<usize>();
    for &j in order.iter().take(short) {
        target[j] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequence = Vec::with_capacity(n);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        sequence.extend(members);
    }
    let mut assigned = [0usize; 3];
    let mut out = vec![Split::Train; n];
    for (k, &i) in sequence.iter().enumerate() {
        let due = |j: usize| target[j] as f64 * (k + 1) as f64 / n as f64 - assigned[j] as f64;
        let j = (0..3)
            .filter(|&j| assigned[j] < target[j])
            .max_by(|&a, &b| due(a).total_cmp(&due(b)).then(b.cmp(&a)))
            .expect("capacity remains");
        assigned[j] += 1;
        out[i] = Split::ALL[j];
    }
    Ok(out)
}

/// Keeps the `round((1 − fraction)·N)` points lying least far along
/// `direction`, as seen by a scanner looking from that side.
pub fn occlude(pc: &PointCloud, direction: Point, fraction: f64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("occlusion fraction {fraction} outside [0, 1)")));
    }
    let len = (direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2]).sqrt();
    if !(len > 0.0) {
        return Err(Error::Config("occlusion direction must be nonzero".into()));
    }
    let keep = ((1.0 - fraction) * pc.len() as f64).round() as usize;
    if keep < 16.min(pc.len()) || keep == 0 {
        return Err(Error::Degenerate(format!(
            "occluding {fraction} of {} points leaves only {keep}",
            pc.len()
        )));
    }
    let proj: Vec<f64> = pc.points().iter().map(|p| p[0] * direction[0] + p[1] * direction[1] + p[2] * direction[2]).collect();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(pc.select(&kept))
}

pub fn random_direction(rng: &mut impl Rng) -> Point {
    loop {
        let p: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = norm(p);
        if n > 1e-9 {
            return p.map(|c| c / n);
        }
    }
}

/// Brings a cloud to exactly `m` points: a random subset when it has more,
/// padding with random repeats when it has fewer.
pub fn fit_count(pc: &PointCloud, m: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if m == 0 {
        return Err(Error::Range("target point count must be positive".into()));
    }
    let n = pc.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if n >= m {
        let (chosen, _) = idx.partial_shuffle(rng, m);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        Ok(pc.select(&chosen))
    } else {
        idx.extend((n..m).map(|_| rng.random_range(0..n)));
        Ok(pc.select(&idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    Xyz,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            _ => Err(Error::Usage(format!("cannot infer point cloud format of {}", path.display()))),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_coords(path: &Path, line_no: usize, fields: &[&str], columns: [usize; 3]) -> Result<Point> {
    let mut p = [0.0; 3];
    for (k, &c) in columns.iter().enumerate() {
        let raw = fields
            .get(c)
            .ok_or_else(|| parse_err(path, line_no, format!("expected at least {} values", c + 1)))?;
        p[k] = raw
            .parse::<f64>()
            .map_err(|_| parse_err(path, line_no, format!("`{raw}` is not a number")))?;
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, line_no, "non-finite coordinate"));
    }
    Ok(p)
}

/// Parses ASCII PLY text; `path` only labels errors.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic line")),
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(path, no, format!("unsupported format `{other}`"))),
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertices = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| parse_err(path, no, format!("bad vertex count `{count}`")))?,
                    );
                } else if vertices.is_none() {
                    return Err(parse_err(path, no, "elements before `vertex` are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, no, "list properties on vertices are not supported"))
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, no, format!("unexpected header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, text.lines().count(), "missing `end_header`"));
    }
    let count = vertices.ok_or_else(|| parse_err(path, 1, "no vertex element"))?;
    let col = |axis: &str| {
        props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| parse_err(path, 1, format!("vertex has no `{axis}` property")))
    };
    let columns = [col("x")?, col("y")?, col("z")?];
    let mut points = Vec::with_capacity(count);
    let mut last = 0;
    for (no, line) in lines {
        last = no;
        if points.len() == count {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != props.len() {
            return Err(parse_err(path, no, format!("expected {} values, found {}", props.len(), fields.len())));
        }
        points.push(parse_coords(path, no, &fields, columns)?);
    }
    if points.len() != count {
        return Err(parse_err(path, last + 1, format!("header declares {count} vertices, found {}", points.len())));
    }
    PointCloud::new(points).map_err(|e| parse_err(path, 1, e.to_string()))
}

/// Parses whitespace-separated `x y z` rows; extra columns are ignored and
/// blank lines skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        points.push(parse_coords(path, i + 1, &fields, [0, 1, 2])?);
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    PointCloud::new(points).map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match format {
        CloudFormat::PlyAscii => parse_ply(&text, path),
        CloudFormat::Xyz => parse_xyz(&text, path),
    }
}

/// Coordinates are written as 32-bit floats in shortest round-trip form.
pub fn format_ply(pc: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    );
    for p in pc.points() {
        s.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
    }
    s
}

pub fn format_xyz(pc: &PointCloud) -> String {
    pc.points()
        .iter()
        .map(|p| format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32))
        .collect()
}

pub fn write_cloud(path: &Path, pc: &PointCloud, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::PlyAscii => format_ply(pc),
        CloudFormat::Xyz => format_xyz(pc),
    };
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, file, label, split] = fields.as_slice() else {
            return Err(parse_err(path, i + 1, format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let label = label
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad label `{label}`")))?;
        let split = split.trim().parse().map_err(|e: Error| parse_err(path, i + 1, e.to_string()))?;
        out.push(ManifestEntry { id: id.to_string(), path: PathBuf::from(file), label, split });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.path.display(), e.label, e.split))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Manifest file for `source = "manifest"`; paths inside are relative to it.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: Vec<ShapeClass>,
    pub shapes_per_class: usize,
    pub points: usize,
    pub noise: f64,
    pub splits: [f64; 3],
    /// Fraction of each shape hidden from the completion input; 0 disables
    /// partial clouds.
    #[serde(default)]
    pub occlusion: f64,
}

fn default_classes() -> Vec<ShapeClass> {
    vec![ShapeClass::Sphere, ShapeClass::Box, ShapeClass::Cylinder, ShapeClass::Torus]
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            manifest: None,
            classes: default_classes(),
            shapes_per_class: 200,
            points: 1024,
            noise: 0.0,
            splits: [0.8, 0.1, 0.1],
            occlusion: 0.0,
        }
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn attach_partial(cloud: &PointCloud, fraction: f64, points: usize, rng: &mut ChaCha8Rng) -> Result<Option<PointCloud>> {
    if fraction <= 0.0 {
        return Ok(None);
    }
    let cut = occlude(cloud, random_direction(rng), fraction)?;
    Ok(Some(fit_count(&cut, points, rng)?))
}

/// Builds the corpus described by `cfg`. Every record draws from its own
/// random stream, so records are independent of evaluation order.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.points == 0 {
        return Err(Error::Config("data.points must be positive".into()));
    }
    match cfg.source {
        DataSource::Synthetic => build_synthetic(cfg, seed),
        DataSource::Manifest => {
            let path = cfg
                .manifest
                .as_ref()
                .ok_or_else(|| Error::Config("data.source = \"manifest\" needs data.manifest".into()))?;
            build_from_manifest(cfg, path, seed)
        }
    }
}

fn build_synthetic(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.classes.is_empty() || cfg.shapes_per_class == 0 {
        return Err(Error::Config("synthetic corpus needs classes and shapes_per_class > 0".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.classes.len())
        .flat_map(|c| (0..cfg.shapes_per_class).map(move |i| (c, i)))
        .collect();
    let labels: Vec<usize> = jobs.iter().map(|&(c, _)| c).collect();
    let splits = make_splits(&labels, cfg.splits, seed)?;
    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(c, i))| {
            let mut rng = record_rng(seed, k);
            let class = cfg.classes[c];
            let spec = SyntheticSpec { shape: class.draw(&mut rng), n_points: cfg.points, noise_sigma: cfg.noise };
            let (cloud, t) = normalize(&sample_synthetic(&spec, &mut rng)?)?;
            // The partial input is cut from a separate scan of the same surface.
            let partial = if cfg.occlusion > 0.0 {
                let scan = renormalize(&sample_synthetic(&spec, &mut rng)?, &t);
                attach_partial(&scan, cfg.occlusion, cfg.points, &mut rng)?
            } else {
                None
            };
            Ok(ShapeRecord { id: format!("{}-{i:04}", class.name()), label: c, cloud, partial, split: splits[k] })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { class_names: cfg.classes.iter().map(|c| c.name().to_string()).collect(), records })
}

fn build_from_manifest(cfg: &DataConfig, path: &Path, seed: u64) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let entries = parse_manifest(&text, path)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no shapes", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let records = entries
        .par_iter()
        .enumerate()
        .map(|(k, e)| {
            let mut rng = record_rng(seed, k);
            let file = base.join(&e.path);
            let raw = load_cloud(&file, CloudFormat::from_path(&file)?)?;
            let (cloud, _) = normalize(&fit_count(&raw, cfg.points, &mut rng)?)?;
            let partial = attach_partial(&cloud, cfg.occlusion, cfg.points, &mut rng)?;
            Ok(ShapeRecord { id: e.id.clone(), label: e.label, cloud, partial, split: e.split })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let class_names = (0..classes)
        .map(|c| cfg.classes.get(c).map_or_else(|| format!("class{c}"), |k| k.name().to_string()))
        .collect();
    Ok(Dataset { class_names, records })
}

/// Shuffled mini-batches of `indices` for one epoch.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

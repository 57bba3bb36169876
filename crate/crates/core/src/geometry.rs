//! Point clouds, rigid transforms, synthetic objects and model statistics.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A position in meters (or normalized units once a model is normalized).
pub type Point3 = Vector3<f64>;

pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Clouds up to this size get an exact O(n²) diameter.
pub const EXACT_DIAMETER_LIMIT: usize = 5000;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed vertex on line {line}: {reason}")]
    MalformedVertex { line: usize, reason: String },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("zero diameter")]
    ZeroDiameter,
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("invalid synthetic object: {0}")]
    InvalidShape(String),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredPoint {
    pub position: Point3,
    pub color: [f64; 3],
}

impl ColoredPoint {
    pub fn new(position: Point3) -> Self {
        Self {
            position,
            color: DEFAULT_COLOR,
        }
    }

    pub fn with_color(position: Point3, color: [f64; 3]) -> Self {
        Self {
            position,
            color: color.map(|c| c.clamp(0.0, 1.0)),
        }
    }
}

/// Ordered surface samples. Point order is part of the cloud's identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<ColoredPoint>,
}

impl PointCloud {
    pub fn from_positions<I: IntoIterator<Item = Point3>>(positions: I) -> Self {
        Self {
            points: positions.into_iter().map(ColoredPoint::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = &Point3> + '_ {
        self.points.iter().map(|p| &p.position)
    }

    pub fn position_vec(&self) -> Vec<Point3> {
        self.positions().copied().collect()
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min_corner: Point3,
    pub max_corner: Point3,
}

impl Aabb {
    /// Corner `index` in binary order: bit 0 picks x-max, bit 1 y-max, bit 2 z-max.
    pub fn corner(&self, index: usize) -> Point3 {
        let pick = |bit: usize, axis: usize| {
            if index & (1 << bit) != 0 {
                self.max_corner[axis]
            } else {
                self.min_corner[axis]
            }
        };
        Point3::new(pick(0, 0), pick(1, 1), pick(2, 2))
    }

    pub fn corners(&self) -> [Point3; 8] {
        std::array::from_fn(|i| self.corner(i))
    }

    pub fn extents(&self) -> Point3 {
        self.max_corner - self.min_corner
    }
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Point3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Point3::zeros(),
        }
    }

    /// Validates the rotation: orthonormal within 1e-9 per entry and det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Point3) -> Result<Self, GeometryError> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Point3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Point3, angle: f64, translation: Point3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        let rotation = *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix();
        Self {
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.rotation.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > 1e-9 {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from identity by {off:e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidRotation(format!("det = {det}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle between two rotations, in degrees.
    pub fn rotation_angle_deg(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> Result<PointCloud, GeometryError> {
    transform.validate()?;
    Ok(PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| ColoredPoint {
                position: transform.apply(&p.position),
                color: p.color,
            })
            .collect(),
    })
}

/// An object's surface cloud with its frame metadata.
///
/// The normalized frame maps `p ↦ (p − norm_offset) · norm_scale`, putting the
/// centroid at the origin and the diameter at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub id: String,
    pub cloud: PointCloud,
    pub centroid: Point3,
    pub diameter: f64,
    pub norm_scale: f64,
    pub norm_offset: Point3,
}

impl ObjectModel {
    pub fn new(id: impl Into<String>, cloud: PointCloud) -> Result<Self, GeometryError> {
        let stats = object_stats(&cloud)?;
        if !(stats.diameter > 0.0) {
            return Err(GeometryError::ZeroDiameter);
        }
        Ok(Self {
            id: id.into(),
            cloud,
            centroid: stats.centroid,
            diameter: stats.diameter,
            norm_scale: 1.0 / stats.diameter,
            norm_offset: stats.centroid,
        })
    }

    pub fn to_normalized(&self, p: &Point3) -> Point3 {
        (p - self.norm_offset) * self.norm_scale
    }

    pub fn from_normalized(&self, p: &Point3) -> Point3 {
        p * self.diameter + self.norm_offset
    }

    pub fn aabb(&self) -> Aabb {
        aabb_of(self.cloud.positions())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectStats {
    pub aabb: Aabb,
    pub centroid: Point3,
    pub diameter: f64,
}

fn aabb_of<'a>(mut positions: impl Iterator<Item = &'a Point3>) -> Aabb {
    let first = positions.next().copied().unwrap_or_else(Point3::zeros);
    let (min_corner, max_corner) = positions.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    Aabb {
        min_corner,
        max_corner,
    }
}

pub fn object_stats(cloud: &PointCloud) -> Result<ObjectStats, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if !cloud.positions().all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite);
    }
    let aabb = aabb_of(cloud.positions());
    let sum: Point3 = cloud.positions().sum();
    let centroid = sum / cloud.len() as f64;
    let positions = cloud.position_vec();
    let diameter = if positions.len() <= EXACT_DIAMETER_LIMIT {
        exact_diameter(&positions)
    } else {
        approximate_diameter(&positions)
    };
    Ok(ObjectStats {
        aabb,
        centroid,
        diameter,
    })
}

fn exact_diameter(points: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Repeated farthest-point sweeps from the extreme points of each axis.
/// Always a lower bound on the true diameter; exact for most convex shapes.
fn approximate_diameter(points: &[Point3]) -> f64 {
    let farthest = |from: &Point3| -> (usize, f64) {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - from).norm_squared()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let mut best = 0.0f64;
    for axis in 0..3 {
        let start = points
            .iter()
            .enumerate()
            .fold(0, |acc, (i, p)| if p[axis] < points[acc][axis] { i } else { acc });
        let mut current = start;
        for _ in 0..4 {
            let (next, d2) = farthest(&points[current]);
            best = best.max(d2);
            if next == current {
                break;
            }
            current = next;
        }
    }
    best.sqrt()
}

pub fn normalize_object(model: &ObjectModel) -> Result<ObjectModel, GeometryError> {
    if !(model.diameter > 0.0) {
        return Err(GeometryError::ZeroDiameter);
    }
    let cloud = PointCloud {
        points: model
            .cloud
            .points
            .iter()
            .map(|p| ColoredPoint {
                position: model.to_normalized(&p.position),
                color: p.color,
            })
            .collect(),
    };
    ObjectModel::new(model.id.clone(), cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    /// Full side lengths.
    Box,
    /// Semi-axes.
    Ellipsoid,
    /// L-shaped prism: outer footprint x×y with wall thickness a quarter of the
    /// smaller footprint side, extruded along z.
    LBracket,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Box => "box",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::LBracket => "l-bracket",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ShapeKind,
    pub extents: [f64; 3],
    pub n_points: usize,
}

/// Planar patch `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
struct Patch {
    origin: Point3,
    u: Point3,
    v: Point3,
}

impl Patch {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

fn box_patches(e: [f64; 3]) -> Vec<Patch> {
    let h = Point3::new(e[0], e[1], e[2]) * 0.5;
    let (x, y, z) = (Point3::x() * e[0], Point3::y() * e[1], Point3::z() * e[2]);
    let lo = -h;
    vec![
        Patch { origin: lo, u: y, v: z },
        Patch { origin: lo + x, u: y, v: z },
        Patch { origin: lo, u: x, v: z },
        Patch { origin: lo + y, u: x, v: z },
        Patch { origin: lo, u: x, v: y },
        Patch { origin: lo + z, u: x, v: y },
    ]
}

fn l_bracket_patches(e: [f64; 3]) -> Vec<Patch> {
    let (w, h, d) = (e[0], e[1], e[2]);
    let t = 0.25 * w.min(h);
    let p = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    let zv = p(0.0, 0.0, d);
    // footprint outline, counter-clockwise
    let outline = [
        (0.0, 0.0),
        (w, 0.0),
        (w, t),
        (t, t),
        (t, h),
        (0.0, h),
    ];
    let mut patches = Vec::new();
    for i in 0..outline.len() {
        let (a, b) = (outline[i], outline[(i + 1) % outline.len()]);
        patches.push(Patch {
            origin: p(a.0, a.1, 0.0),
            u: p(b.0 - a.0, b.1 - a.1, 0.0),
            v: zv,
        });
    }
    for z in [0.0, d] {
        patches.push(Patch {
            origin: p(0.0, 0.0, z),
            u: p(w, 0.0, 0.0),
            v: p(0.0, t, 0.0),
        });
        patches.push(Patch {
            origin: p(0.0, t, z),
            u: p(t, 0.0, 0.0),
            v: p(0.0, h - t, 0.0),
        });
    }
    patches
}

fn sample_patches(patches: &[Patch], n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let areas: Vec<f64> = patches.iter().map(Patch::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = patches.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    chosen = i;
                    break;
                }
                pick -= a;
            }
            let patch = &patches[chosen];
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            patch.origin + patch.u * s + patch.v * t
        })
        .collect()
}

/// Area-uniform ellipsoid samples by rejection on the sphere's area element.
fn sample_ellipsoid(e: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let (a, b, c) = (e[0], e[1], e[2]);
    let bound = (b * c).max(a * c).max(a * b);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = loop {
            let v = Point3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            let r2 = v.norm_squared();
            if r2 > 1e-12 && r2 <= 1.0 {
                break v / r2.sqrt();
            }
        };
        let weight = Point3::new(b * c * u.x, a * c * u.y, a * b * u.z).norm() / bound;
        if rng.random::<f64>() <= weight {
            out.push(Point3::new(a * u.x, b * u.y, c * u.z));
        }
    }
    out
}

pub fn make_synthetic_object(
    id: impl Into<String>,
    spec: &SyntheticSpec,
    rng_seed: u64,
) -> Result<ObjectModel, GeometryError> {
    if spec.extents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(GeometryError::InvalidShape(format!(
            "extents must be positive, got {:?}",
            spec.extents
        )));
    }
    if spec.n_points < 4 {
        return Err(GeometryError::InvalidShape(format!(
            "need at least 4 points, got {}",
            spec.n_points
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let positions = match spec.kind {
        ShapeKind::Box => sample_patches(&box_patches(spec.extents), spec.n_points, &mut rng),
        ShapeKind::LBracket => sample_patches(&l_bracket_patches(spec.extents), spec.n_points, &mut rng),
        ShapeKind::Ellipsoid => sample_ellipsoid(spec.extents, spec.n_points, &mut rng),
    };
    ObjectModel::new(id, PointCloud::from_positions(positions))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    PlyAscii,
    ObjVertices,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(CloudFormat::PlyAscii),
            "obj" => Some(CloudFormat::ObjVertices),
            _ => None,
        }
    }
}

pub fn load_point_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, GeometryError> {
    let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        CloudFormat::PlyAscii => parse_ply_ascii(&text),
        CloudFormat::ObjVertices => parse_obj_vertices(&text),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ColorScale {
    /// Integer channels in 0..=255.
    Byte,
    /// Float channels already in [0, 1].
    Unit,
}

pub fn parse_ply_ascii(text: &str) -> Result<PointCloud, GeometryError> {
    let header_err = |m: &str| GeometryError::MalformedHeader(m.to_owned());
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(header_err("missing 'ply' magic")),
    }

    let mut format_ok = false;
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_vertex_element = false;
    // element name and count of non-vertex elements preceding the vertex element
    let mut skip_before = 0usize;
    let mut props: Vec<String> = Vec::new();
    let mut color_scale = ColorScale::Byte;
    let mut ended = false;

    for (_, raw) in lines.by_ref() {
        let line = raw.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(header_err("only 'format ascii 1.0' is supported"));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| header_err("element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_err("element count is not an integer"))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                    seen_vertex_element = true;
                } else if !seen_vertex_element {
                    skip_before += count;
                }
            }
            Some("property") => {
                if in_vertex {
                    let parts: Vec<&str> = tok.collect();
                    if parts.first() == Some(&"list") {
                        return Err(header_err("list property on vertex element"));
                    }
                    if parts.len() != 2 {
                        return Err(header_err("property needs a type and a name"));
                    }
                    let name = parts[1].to_owned();
                    if matches!(name.as_str(), "red" | "green" | "blue")
                        && matches!(parts[0], "float" | "float32" | "double" | "float64")
                    {
                        color_scale = ColorScale::Unit;
                    }
                    props.push(name);
                }
            }
            Some("end_header") => {
                ended = true;
                break;
            }
            Some(other) => return Err(header_err(&format!("unexpected header keyword '{other}'"))),
        }
    }
    if !ended {
        return Err(header_err("missing end_header"));
    }
    if !format_ok {
        return Err(header_err("missing format line"));
    }
    let count = vertex_count.ok_or_else(|| header_err("no vertex element"))?;
    let find = |n: &str| props.iter().position(|p| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(header_err("vertex element lacks x/y/z")),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    if count == 0 {
        return Err(GeometryError::EmptyCloud);
    }

    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for _ in 0..skip_before {
        body.next();
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (lineno, raw) = body.next().ok_or(GeometryError::MalformedVertex {
            line: 0,
            reason: format!("file ends after {} of {count} vertices", points.len()),
        })?;
        let fields: Vec<f64> = raw
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::MalformedVertex {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if fields.len() < props.len() {
            return Err(GeometryError::MalformedVertex {
                line: lineno + 1,
                reason: format!("expected {} values, found {}", props.len(), fields.len()),
            });
        }
        let position = Point3::new(fields[ix], fields[iy], fields[iz]);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let color = match rgb {
            Some((r, g, b)) => {
                let c = [fields[r], fields[g], fields[b]];
                match color_scale {
                    ColorScale::Byte => c.map(|v| v / 255.0),
                    ColorScale::Unit => c,
                }
            }
            None => DEFAULT_COLOR,
        };
        points.push(ColoredPoint::with_color(position, color));
    }
    Ok(PointCloud { points })
}

/// ASCII PLY with float color channels; [`parse_ply_ascii`] reads it back exactly.
pub fn write_ply_ascii(cloud: &PointCloud) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property float red\nproperty float green\nproperty float blue\nend_header\n",
        cloud.len()
    );
    for p in &cloud.points {
        let (v, c) = (p.position, p.color);
        out.push_str(&format!("{} {} {} {} {} {}\n", v.x, v.y, v.z, c[0], c[1], c[2]));
    }
    out
}

/// Parses `v x y z [r g b]` lines; everything else is ignored.
pub fn parse_obj_vertices(text: &str) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let mut tok = raw.split_whitespace();
        if tok.next() != Some("v") {
            continue;
        }
        let vals: Vec<f64> = tok
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::MalformedVertex {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if vals.len() < 3 {
            return Err(GeometryError::MalformedVertex {
                line: lineno + 1,
                reason: "vertex needs three coordinates".into(),
            });
        }
        let position = Point3::new(vals[0], vals[1], vals[2]);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let color = if vals.len() >= 6 {
            [vals[3], vals[4], vals[5]]
        } else {
            DEFAULT_COLOR
        };
        points.push(ColoredPoint::with_color(position, color));
    }
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    Ok(PointCloud { points })
}

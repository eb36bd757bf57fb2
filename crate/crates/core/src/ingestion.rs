//! Scene manifests, point cloud and mesh files, and analytic synthetic
//! scenes with a known volume.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraView, Intrinsics, Mask, Mat3, PointCloud, Pose, Vec3};
use crate::mesh::TriangleMesh;
use crate::metrics::M3_TO_ML;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const POINT_CLOUD_MAGIC: &[u8; 8] = b"VOLEPC1\0";
pub const SYNTHETIC_CLOUD_POINTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PoseConvention {
    #[default]
    #[serde(rename = "w2c")]
    WorldToCamera,
    #[serde(rename = "c2w")]
    CameraToWorld,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub volume_ml: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_g: Option<f64>,
}

/// One image record as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_center: Option<[f64; 3]>,
    pub intrinsics: Intrinsics,
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// The manifest document exactly as serialized. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub scene_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<GroundTruth>,
    #[serde(default)]
    pub pose_convention: PoseConvention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_cloud: Option<String>,
    pub images: Vec<ImageEntry>,
}

impl ManifestDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            offset: line_col_to_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Rewrites every relative path as an absolute one under `base`.
    pub fn rebased(&self, base: &Path) -> ManifestDocument {
        let abs = |p: &str| base.join(p).to_string_lossy().into_owned();
        let mut doc = self.clone();
        doc.point_cloud = doc.point_cloud.as_deref().map(abs);
        for e in &mut doc.images {
            e.image = abs(&e.image);
            e.mask = e.mask.as_deref().map(abs);
        }
        doc
    }
}

/// A validated scene: world-to-camera views with decoded masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_name: String,
    pub gt: Option<GroundTruth>,
    pub views: Vec<CameraView>,
    /// Metric camera centers from the capture device, per view.
    pub ar_centers: Vec<Option<Vec3>>,
    pub point_cloud: Option<PointCloud>,
}

impl SceneManifest {
    pub fn ar_center_count(&self) -> usize {
        self.ar_centers.iter().flatten().count()
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: e.utf8_error().valid_up_to(),
        message: "not valid UTF-8".into(),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn line_col_to_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode_image(path)?;
    let (w, h) = (img.width(), img.height());
    let data = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|b| b != 0).collect(),
        other => other.to_rgb8().pixels().map(|p| p.0.iter().any(|&c| c != 0)).collect(),
    };
    Mask::new(w, h, data)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([if mask.get(x, y) { 255 } else { 0 }])
    });
    save_gray(&img, path)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(decode_image(path)?.into_luma8())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn decode_image(path: &Path) -> Result<DynamicImage> {
    require_file(path)?;
    let img_err = |e: &dyn std::fmt::Display| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| img_err(&e))
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let doc = ManifestDocument::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest_from_document(&doc, base)
}

/// Validates `doc`, resolving its paths against `base`.
fn detail(err: Error) -> String {
    match err {
        Error::Validation { message, .. } => message,
        other => other.to_string(),
    }
}

pub fn manifest_from_document(doc: &ManifestDocument, base: &Path) -> Result<SceneManifest> {
    if doc.images.is_empty() {
        return Err(Error::validation("images", "at least one image is required"));
    }
    if let Some(gt) = &doc.gt {
        if !(gt.volume_ml.is_finite() && gt.volume_ml > 0.0) {
            return Err(Error::validation(
                "gt.volume_ml",
                format!("must be positive, got {}", gt.volume_ml),
            ));
        }
        if let Some(m) = gt.mass_g {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::validation("gt.mass_g", format!("must be non-negative, got {m}")));
            }
        }
    }
    let mut views = Vec::with_capacity(doc.images.len());
    let mut ar_centers = Vec::with_capacity(doc.images.len());
    for (i, e) in doc.images.iter().enumerate() {
        let field = |f: &str| format!("images[{i}] ({}).{f}", e.image);
        let image_path = base.join(&e.image);
        require_file(&image_path)?;
        e.intrinsics
            .validate()
            .map_err(|err| Error::validation(field("intrinsics"), detail(err)))?;
        if e.rotation.iter().chain(&e.translation).any(|x| !x.is_finite()) {
            return Err(Error::validation(field("rotation"), "non-finite pose entry"));
        }
        let r = Mat3::from_row_slice(&e.rotation);
        let t = Vec3::from_column_slice(&e.translation);
        let pose = match doc.pose_convention {
            PoseConvention::WorldToCamera => Pose::new(r, t),
            PoseConvention::CameraToWorld => Pose::from_camera_to_world(r, t),
        }
        .map_err(|err| Error::validation(field("rotation"), detail(err)))?;
        let mask = match &e.mask {
            Some(m) => {
                let mask = load_mask(&base.join(m))?;
                if (mask.width(), mask.height()) != (e.intrinsics.width, e.intrinsics.height) {
                    return Err(Error::validation(
                        field("mask"),
                        format!(
                            "mask is {}x{} but intrinsics say {}x{}",
                            mask.width(),
                            mask.height(),
                            e.intrinsics.width,
                            e.intrinsics.height
                        ),
                    ));
                }
                Some(mask)
            }
            None => None,
        };
        let ar = match e.ar_center {
            Some(c) if c.iter().all(|x| x.is_finite()) => Some(Vec3::from(c)),
            Some(_) => return Err(Error::validation(field("ar_center"), "non-finite coordinate")),
            None => None,
        };
        views.push(CameraView::new(e.intrinsics, pose, mask, image_path.to_string_lossy())?);
        ar_centers.push(ar);
    }
    let n_ar = ar_centers.iter().flatten().count();
    if n_ar > 0 && n_ar < 3 {
        return Err(Error::validation(
            "images[].ar_center",
            format!("{n_ar} AR centers given; alignment needs at least 3"),
        ));
    }
    let point_cloud = match &doc.point_cloud {
        Some(p) => {
            let mut cloud = load_point_cloud(&base.join(p))?;
            // without AR centers the reconstruction frame is taken as metric
            cloud.metric = n_ar == 0;
            cloud.frame_label = if n_ar == 0 { "world" } else { "reconstruction" }.into();
            Some(cloud)
        }
        None => None,
    };
    Ok(SceneManifest {
        scene_name: doc.scene_name.clone(),
        gt: doc.gt,
        views,
        ar_centers,
        point_cloud,
    })
}

// ---------------------------------------------------------------------------
// point clouds and meshes

/// Dispatches on content: the native magic, otherwise ASCII PLY.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(POINT_CLOUD_MAGIC) {
        return decode_native(&bytes, path);
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: e.utf8_error().valid_up_to(),
        message: "neither a native point cloud nor ASCII PLY".into(),
    })?;
    let ply = parse_ply(&text, &path.display().to_string())?;
    Ok(PointCloud::new(ply.vertices, "world", true))
}

/// Native format when the extension is `.vpc`, ASCII PLY otherwise.
pub fn save_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "vpc") {
        fs::write(path, encode_native(cloud))?;
    } else {
        fs::write(path, ply_text(&cloud.points, &[]))?;
    }
    Ok(())
}

pub fn encode_native(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 24 * cloud.len());
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for c in p.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn decode_native(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        offset,
        message,
    };
    let header = POINT_CLOUD_MAGIC.len();
    let count_bytes: [u8; 8] = bytes
        .get(header..header + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| err(header, "truncated point count".into()))?;
    let count = u64::from_le_bytes(count_bytes);
    let body = header + 8;
    let expected = count
        .checked_mul(24)
        .and_then(|n| n.checked_add(body as u64))
        .ok_or_else(|| err(header, format!("point count {count} overflows")))?;
    if bytes.len() as u64 != expected {
        return Err(err(
            bytes.len().min(expected as usize),
            format!("expected {expected} bytes for {count} points, found {}", bytes.len()),
        ));
    }
    let points = bytes[body..]
        .chunks_exact(24)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
            Vec3::new(f(0), f(1), f(2))
        })
        .collect();
    Ok(PointCloud::new(points, "world", true))
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = read_text(path)?;
    let ply = parse_ply(&text, &path.display().to_string())?;
    Ok(TriangleMesh::new(ply.vertices, ply.triangles))
}

pub fn save_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    fs::write(path, ply_text(&mesh.vertices, &mesh.triangles))?;
    Ok(())
}

/// `{}` on f64 prints the shortest string that parses back to the same
/// value, so the ASCII form round-trips exactly.
fn ply_text(vertices: &[Vec3], triangles: &[[u32; 3]]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if !triangles.is_empty() {
        let _ = writeln!(s, "element face {}", triangles.len());
        s.push_str("property list uchar uint vertex_indices\n");
    }
    s.push_str("end_header\n");
    for v in vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for t in triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

struct PlyData {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

enum PlyProperty {
    Scalar(String),
    List,
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line with its byte offset, newline stripped.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest.find('\n').map_or(rest.len(), |i| i + 1);
        self.pos += end;
        Some((start, rest[..end].trim_end_matches(['\n', '\r'])))
    }

    /// Next line holding at least one token.
    fn next_data(&mut self) -> Option<(usize, &'a str)> {
        loop {
            let (off, line) = self.next_line()?;
            if !line.trim().is_empty() {
                return Some((off, line));
            }
        }
    }
}

/// Whitespace-separated tokens with their absolute byte offsets.
fn tokens(offset: usize, line: &str) -> impl Iterator<Item = (usize, &str)> {
    let base = line.as_ptr() as usize;
    line.split_whitespace()
        .map(move |t| (offset + (t.as_ptr() as usize - base), t))
}

fn parse_ply(text: &str, path: &str) -> Result<PlyData> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_string(),
        offset,
        message,
    };
    let mut lines = Lines { text, pos: 0 };
    match lines.next_line() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(0, "missing 'ply' magic line".into())),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    loop {
        let (off, line) = lines
            .next_line()
            .ok_or_else(|| err(text.len(), "header ends without end_header".into()))?;
        let toks: Vec<(usize, &str)> = tokens(off, line).collect();
        let Some(&(_, keyword)) = toks.first() else {
            continue;
        };
        match keyword {
            "format" => {
                match toks.get(1) {
                    Some((_, "ascii")) => {}
                    Some(&(o, other)) => return Err(err(o, format!("unsupported PLY format '{other}'"))),
                    None => return Err(err(off, "format line without a format".into())),
                }
                format_seen = true;
            }
            "comment" | "obj_info" => {}
            "element" => {
                let (Some(&(_, name)), Some(&(co, count))) = (toks.get(1), toks.get(2)) else {
                    return Err(err(off, "element line needs a name and a count".into()));
                };
                let count = count
                    .parse()
                    .map_err(|_| err(co, format!("invalid element count '{count}'")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(off, "property before any element".into()))?;
                let prop = match toks.get(1) {
                    Some((_, "list")) if toks.len() == 5 => PlyProperty::List,
                    Some(_) if toks.len() == 3 => PlyProperty::Scalar(toks[2].1.to_string()),
                    _ => return Err(err(off, "malformed property line".into())),
                };
                el.properties.push(prop);
            }
            "end_header" => break,
            other => return Err(err(off, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !format_seen {
        return Err(err(lines.pos, "header declares no format".into()));
    }

    let mut data = PlyData {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    for el in &elements {
        let truncated = |what: &str| err(text.len(), format!("file ends inside {what} data"));
        match el.name.as_str() {
            "vertex" => {
                let column = |axis: &str| {
                    el.properties
                        .iter()
                        .position(|p| matches!(p, PlyProperty::Scalar(n) if n == axis))
                        .ok_or_else(|| err(0, format!("vertex element has no '{axis}' property")))
                };
                let (ix, iy, iz) = (column("x")?, column("y")?, column("z")?);
                if el.properties.iter().any(|p| matches!(p, PlyProperty::List)) {
                    return Err(err(0, "list properties on vertices are not supported".into()));
                }
                data.vertices.reserve(el.count);
                for _ in 0..el.count {
                    let (off, line) = lines.next_data().ok_or_else(|| truncated("vertex"))?;
                    let toks: Vec<(usize, &str)> = tokens(off, line).collect();
                    if toks.len() != el.properties.len() {
                        return Err(err(
                            off,
                            format!("expected {} values, found {}", el.properties.len(), toks.len()),
                        ));
                    }
                    let num = |i: usize| {
                        let (o, t) = toks[i];
                        t.parse::<f64>().map_err(|_| err(o, format!("invalid number '{t}'")))
                    };
                    data.vertices.push(Vec3::new(num(ix)?, num(iy)?, num(iz)?));
                }
            }
            "face" => {
                if el.properties.len() != 1 || !matches!(el.properties[0], PlyProperty::List) {
                    return Err(err(0, "face element must hold a single index list".into()));
                }
                data.triangles.reserve(el.count);
                for _ in 0..el.count {
                    let (off, line) = lines.next_data().ok_or_else(|| truncated("face"))?;
                    let toks: Vec<(usize, &str)> = tokens(off, line).collect();
                    let int = |i: usize| {
                        let (o, t) = toks[i];
                        t.parse::<u32>().map_err(|_| err(o, format!("invalid index '{t}'")))
                    };
                    let n = int(0)? as usize;
                    if n < 3 || toks.len() != n + 1 {
                        return Err(err(
                            off,
                            format!("face needs at least 3 indices and exactly {n} values"),
                        ));
                    }
                    let idx: Vec<u32> = (1..=n).map(int).collect::<Result<_>>()?;
                    for (k, &v) in idx.iter().enumerate() {
                        if v as usize >= data.vertices.len() {
                            return Err(err(toks[k + 1].0, format!("vertex index {v} out of range")));
                        }
                    }
                    // polygons are fanned from their first corner
                    for k in 1..n - 1 {
                        data.triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    lines.next_data().ok_or_else(|| truncated(&el.name))?;
                }
            }
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolidKind {
    Sphere {
        radius: f64,
    },
    /// Full edge lengths along x, y, z.
    Box {
        extents: [f64; 3],
    },
    /// Axis along z.
    Cylinder {
        radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSolid {
    pub kind: SolidKind,
    pub center: [f64; 3],
}

impl SyntheticSolid {
    pub fn sphere(radius: f64) -> Self {
        Self::at_origin(SolidKind::Sphere { radius })
    }

    pub fn cuboid(x: f64, y: f64, z: f64) -> Self {
        Self::at_origin(SolidKind::Box { extents: [x, y, z] })
    }

    pub fn cylinder(radius: f64, height: f64) -> Self {
        Self::at_origin(SolidKind::Cylinder { radius, height })
    }

    fn at_origin(kind: SolidKind) -> Self {
        SyntheticSolid { kind, center: [0.0; 3] }
    }

    pub fn with_center(mut self, c: Vec3) -> Self {
        self.center = [c.x, c.y, c.z];
        self
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SolidKind::Sphere { .. } => "sphere",
            SolidKind::Box { .. } => "box",
            SolidKind::Cylinder { .. } => "cylinder",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims: Vec<f64> = match self.kind {
            SolidKind::Sphere { radius } => vec![radius],
            SolidKind::Box { extents } => extents.to_vec(),
            SolidKind::Cylinder { radius, height } => vec![radius, height],
        };
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "{} extents must be positive",
                self.name()
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("solid center must be finite".into()));
        }
        Ok(())
    }

    pub fn volume_m3(&self) -> f64 {
        use std::f64::consts::PI;
        match self.kind {
            SolidKind::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            SolidKind::Box { extents } => extents.iter().product(),
            SolidKind::Cylinder { radius, height } => PI * radius * radius * height,
        }
    }

    pub fn volume_ml(&self) -> f64 {
        self.volume_m3() * M3_TO_ML
    }

    pub fn half_extents(&self) -> Vec3 {
        match self.kind {
            SolidKind::Sphere { radius } => Vec3::repeat(radius),
            SolidKind::Box { extents } => Vec3::from(extents) * 0.5,
            SolidKind::Cylinder { radius, height } => Vec3::new(radius, radius, height * 0.5),
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        let h = self.half_extents();
        Aabb::new(self.center() - h, self.center() + h)
    }

    /// Radius of a sphere about the center that encloses the solid.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            SolidKind::Sphere { radius } => radius,
            _ => self.half_extents().norm(),
        }
    }

    /// Largest full extent along any axis.
    pub fn max_extent(&self) -> f64 {
        self.half_extents().max() * 2.0
    }

    /// The solid grown by `d` in every direction (a superset of its
    /// Minkowski sum with a ball of radius `d`).
    pub fn dilated(&self, d: f64) -> SyntheticSolid {
        let kind = match self.kind {
            SolidKind::Sphere { radius } => SolidKind::Sphere { radius: radius + d },
            SolidKind::Box { extents } => SolidKind::Box {
                extents: extents.map(|e| e + 2.0 * d),
            },
            SolidKind::Cylinder { radius, height } => SolidKind::Cylinder {
                radius: radius + d,
                height: height + 2.0 * d,
            },
        };
        SyntheticSolid { kind, ..*self }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let q = p - self.center();
        match self.kind {
            SolidKind::Sphere { radius } => q.norm_squared() <= radius * radius,
            SolidKind::Box { .. } => {
                let h = self.half_extents();
                (0..3).all(|a| q[a].abs() <= h[a])
            }
            SolidKind::Cylinder { radius, height } => {
                q.x * q.x + q.y * q.y <= radius * radius && q.z.abs() <= height * 0.5
            }
        }
    }

    /// Whether the ray `origin + t·dir`, t > 0, meets the solid.
    pub fn ray_hits(&self, origin: &Vec3, dir: &Vec3) -> bool {
        let o = origin - self.center();
        let (lo, hi) = match self.kind {
            SolidKind::Sphere { radius } => {
                let Some(iv) = quadratic_interval(dir.norm_squared(), o.dot(dir), o.norm_squared() - radius * radius)
                else {
                    return false;
                };
                iv
            }
            SolidKind::Box { .. } => slab_interval(&o, dir, &self.half_extents(), [true; 3]),
            SolidKind::Cylinder { radius, height } => {
                let a = dir.x * dir.x + dir.y * dir.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let side = if a == 0.0 {
                    if c > 0.0 {
                        return false;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    match quadratic_interval(a, o.x * dir.x + o.y * dir.y, c) {
                        Some(iv) => iv,
                        None => return false,
                    }
                };
                let caps = slab_interval(&o, dir, &Vec3::new(0.0, 0.0, height * 0.5), [false, false, true]);
                (side.0.max(caps.0), side.1.min(caps.1))
            }
        };
        lo <= hi && hi > 0.0
    }

    /// Uniform surface samples (area-weighted across faces).
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        use std::f64::consts::TAU;
        let c = self.center();
        (0..n)
            .map(|_| {
                let local = match self.kind {
                    SolidKind::Sphere { radius } => {
                        let z: f64 = rng.random_range(-1.0..=1.0);
                        let phi = rng.random_range(0.0..TAU);
                        let r = (1.0 - z * z).max(0.0).sqrt();
                        Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
                    }
                    SolidKind::Box { .. } => {
                        let h = self.half_extents();
                        let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                        let face = pick_weighted(&areas, rng);
                        let axis = face / 2;
                        let mut p = Vec3::new(
                            rng.random_range(-h.x..=h.x),
                            rng.random_range(-h.y..=h.y),
                            rng.random_range(-h.z..=h.z),
                        );
                        p[axis] = if face.is_multiple_of(2) { -h[axis] } else { h[axis] };
                        p
                    }
                    SolidKind::Cylinder { radius, height } => {
                        let cap = std::f64::consts::PI * radius * radius;
                        let side = TAU * radius * height;
                        let phi = rng.random_range(0.0..TAU);
                        match pick_weighted(&[side, cap, cap], rng) {
                            0 => Vec3::new(
                                radius * phi.cos(),
                                radius * phi.sin(),
                                rng.random_range(-height / 2.0..=height / 2.0),
                            ),
                            k => {
                                let r = radius * rng.random::<f64>().sqrt();
                                let z = if k == 1 { -height / 2.0 } else { height / 2.0 };
                                Vec3::new(r * phi.cos(), r * phi.sin(), z)
                            }
                        }
                    }
                };
                c + local
            })
            .collect()
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Roots of a·t² + 2·b·t + c as an interval.
fn quadratic_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((-b - s) / a, (-b + s) / a))
}

/// Parameter interval inside |o + t·d| ≤ h on the selected axes.
fn slab_interval(o: &Vec3, d: &Vec3, h: &Vec3, axes: [bool; 3]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in (0..3).filter(|&a| axes[a]) {
        if d[a] == 0.0 {
            if o[a].abs() > h[a] {
                return (1.0, 0.0);
            }
            continue;
        }
        let t1 = (-h[a] - o[a]) / d[a];
        let t2 = (h[a] - o[a]) / d[a];
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (lo, hi)
}

/// `n` nearly uniform unit directions.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub manifest: SceneManifest,
    pub solid: SyntheticSolid,
    pub analytic_volume_ml: f64,
}

/// Renders an analytic scene: cameras on a Fibonacci sphere of radius
/// 4 × the largest extent, all looking at the solid's center, masks from
/// ray tests at pixel centers, and a surface cloud drawn with `seed`.
///
/// Masks are traced against the solid dilated by the largest distance
/// between a point and the ray through the pixel center it rounds to, so
/// every interior point lands on foreground in every view.
pub fn synthesize_scene(
    solid: &SyntheticSolid,
    n_views: usize,
    resolution: (u32, u32),
    seed: u64,
) -> Result<SyntheticScene> {
    solid.validate()?;
    if n_views < 4 {
        return Err(Error::InvalidConfig(format!(
            "at least 4 views are required, got {n_views}"
        )));
    }
    let (w, h) = resolution;
    if w < 16 || h < 16 {
        return Err(Error::InvalidConfig(format!("image size {w}x{h} is too small")));
    }
    let center = solid.center();
    let dist = 4.0 * solid.max_extent();
    let rb = solid.bounding_radius();
    // the bounding sphere fills 80% of the shorter half-frame
    let half_angle_tan = (rb / dist).asin().tan();
    let f = 0.8 * (w.min(h) as f64 / 2.0) / half_angle_tan;
    let intr = Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)?;
    let grow = (dist + rb) * 0.5 * (1.0 / (f * f) * 2.0).sqrt() * (1.0 + 1e-6);
    let traced = solid.dilated(grow);

    let views: Vec<CameraView> = fibonacci_sphere(n_views)
        .into_iter()
        .enumerate()
        .map(|(i, dir)| {
            let eye = center + dir * dist;
            let up = if dir.z.abs() > 0.99 { Vec3::x() } else { Vec3::z() };
            let pose = Pose::look_at(eye, center, up)?;
            let mask = render_mask(&intr, &pose, &traced);
            CameraView::new(intr, pose, Some(mask), format!("images/{i:04}.png"))
        })
        .collect::<Result<_>>()?;
    let ar_centers = views.iter().map(|v| Some(v.camera_center())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = PointCloud::new(solid.sample_surface(SYNTHETIC_CLOUD_POINTS, &mut rng), "world", true);
    let analytic_volume_ml = solid.volume_ml();
    Ok(SyntheticScene {
        manifest: SceneManifest {
            scene_name: format!("synthetic-{}", solid.name()),
            gt: Some(GroundTruth {
                volume_ml: analytic_volume_ml,
                mass_g: None,
            }),
            views,
            ar_centers,
            point_cloud: Some(cloud),
        },
        solid: *solid,
        analytic_volume_ml,
    })
}

fn render_mask(intr: &Intrinsics, pose: &Pose, solid: &SyntheticSolid) -> Mask {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let eye = pose.camera_center();
    let rt = pose.rotation().transpose();
    // rays outside the cone around the bounding sphere cannot hit
    let to_center = solid.center() - eye;
    let dist = to_center.norm();
    let cos_cone = (1.0 - (solid.bounding_radius() / dist).min(1.0).powi(2)).sqrt();
    let axis = to_center / dist;
    let mut data = vec![false; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let d_cam = Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let d = rt * d_cam;
            *px = d.dot(&axis) >= cos_cone * d.norm() * (1.0 - 1e-12) && solid.ray_hits(&eye, &d);
        }
    });
    Mask::new(intr.width, intr.height, data).expect("mask size matches")
}

/// A grayscale frame for a mask: bright object over a background whose
/// gradient depends on the view index.
pub fn render_frame(mask: &Mask, index: usize) -> GrayImage {
    let (w, h) = (mask.width(), mask.height());
    GrayImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            Luma([210])
        } else {
            let t = ((x as usize * 3 + y as usize + index * 17) % 256) as f64;
            Luma([(20.0 + 0.25 * t) as u8])
        }
    })
}

/// Re-expresses the scene's reconstruction (poses and cloud) in another
/// gauge, as an SfM run would, leaving the metric AR centers untouched.
pub fn regauge(scene: &SceneManifest, xf: &crate::alignment::SimilarityTransform) -> SceneManifest {
    let mut out = scene.clone();
    out.views = crate::alignment::apply_similarity_to_views(xf, &scene.views);
    if let Some(c) = &scene.point_cloud {
        out.point_cloud = Some(PointCloud::new(
            c.points.iter().map(|p| xf.apply(p)).collect(),
            "reconstruction",
            false,
        ));
    }
    out
}

/// Writes a scene directory: manifest, masks, frames and the cloud.
/// Returns the manifest path.
pub fn write_scene(scene: &SceneManifest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut images = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        let image = format!("images/{i:04}.png");
        let mask = match &v.mask {
            Some(m) => {
                let rel = format!("masks/{i:04}.png");
                save_mask(m, &dir.join(&rel))?;
                save_gray(&render_frame(m, i), &dir.join(&image))?;
                Some(rel)
            }
            None => {
                let blank = GrayImage::from_pixel(v.intrinsics.width, v.intrinsics.height, Luma([20]));
                save_gray(&blank, &dir.join(&image))?;
                None
            }
        };
        let r = v.pose.rotation();
        images.push(ImageEntry {
            image,
            mask,
            ar_center: scene.ar_centers.get(i).copied().flatten().map(|c| [c.x, c.y, c.z]),
            intrinsics: v.intrinsics,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: {
                let t = v.pose.translation();
                [t.x, t.y, t.z]
            },
        });
    }
    let point_cloud = match &scene.point_cloud {
        Some(c) => {
            save_point_cloud(c, &dir.join("points.ply"))?;
            Some("points.ply".to_string())
        }
        None => None,
    };
    let doc = ManifestDocument {
        scene_name: scene.scene_name.clone(),
        gt: scene.gt,
        pose_convention: PoseConvention::WorldToCamera,
        point_cloud,
        images,
    };
    let path = dir.join(MANIFEST_FILE);
    doc.write(&path)?;
    Ok(path)
}

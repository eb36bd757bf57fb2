//! Silhouette carving on a regular grid and surface extraction by
//! marching cubes.
//!
//! A voxel is occupied when its center passes the same multi-view mask
//! predicate used for point-cloud masking, so the carved set is a sampled
//! visual hull. The marching-cubes pass then turns the binary field into a
//! closed, consistently oriented triangle mesh.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraView, PointCloud, Vec3};
use crate::masking::{masked_bounding_box, masked_views, passes_quota, MaskingConfig};
use crate::mesh::TriangleMesh;

pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 1024;
pub const DEFAULT_RESOLUTION: usize = 512;
pub const MAX_VOXELS: u64 = 1 << 30;
/// Padding applied to the masked cloud's bounding box.
pub const EXTENT_PAD: f64 = 0.05;

/// Boolean voxel lattice. `origin` is the center of voxel `(0, 0, 0)`;
/// voxel `(i, j, k)` sits at `origin + spacing·(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    occupancy: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: Vec3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidConfig(format!("grid spacing {spacing} must be positive")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidConfig(format!("grid dims {dims:?} must be ≥ 2")));
        }
        let voxels = dims.iter().map(|&d| d as u64).product::<u64>();
        if voxels > MAX_VOXELS {
            return Err(Error::GridTooLarge { voxels });
        }
        Ok(OccupancyGrid {
            origin,
            spacing,
            dims,
            occupancy: vec![false; voxels as usize],
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)]
    }

    /// Out-of-range coordinates read as empty.
    #[inline]
    pub fn get_signed(&self, i: isize, j: isize, k: isize) -> bool {
        if i < 0 || j < 0 || k < 0 {
            return false;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
            return false;
        }
        self.occupancy[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.index(i, j, k);
        self.occupancy[idx] = value;
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    pub fn voxel_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn boundary_is_empty(&self) -> bool {
        let [nx, ny, nz] = self.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let on_shell = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                    if on_shell && self.get(i, j, k) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Lattice covering `bbox` whose largest axis has `resolution` voxels,
    /// including one shell voxel on every side.
    pub fn fitted(bbox: &Aabb, resolution: usize) -> Result<Self> {
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
            return Err(Error::InvalidConfig(format!(
                "resolution {resolution} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]"
            )));
        }
        let ext = bbox.extent();
        let max_ext = ext.max();
        if !(max_ext.is_finite() && max_ext > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "bounding box extent {max_ext} cannot be gridded"
            )));
        }
        let interior = (resolution - 2) as f64;
        let spacing = max_ext / interior;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = ((ext[a] / spacing) - 1e-9).ceil().max(1.0) as usize;
            dims[a] = n.min(resolution - 2) + 2;
        }
        let half_span = Vec3::new((dims[0] - 1) as f64, (dims[1] - 1) as f64, (dims[2] - 1) as f64) * (0.5 * spacing);
        OccupancyGrid::new(bbox.center() - half_span, spacing, dims)
    }
}

/// Marks every interior voxel whose center passes the mask predicate.
pub fn carve_occupancy(
    views: &[CameraView],
    bbox: &Aabb,
    resolution: usize,
    cfg: &MaskingConfig,
) -> Result<OccupancyGrid> {
    cfg.validate()?;
    let masked = masked_views(views);
    if masked.is_empty() {
        return Err(Error::NoMaskedViews);
    }
    if masked.len() < 4 {
        log::warn!(
            "carving with only {} masked views; the hull will be loose",
            masked.len()
        );
    }
    let mut grid = OccupancyGrid::fitted(bbox, resolution)?;
    let required = cfg.required_views(masked.len());
    let [nx, ny, nz] = grid.dims;
    let slab = nx * ny;
    let origin = grid.origin;
    let spacing = grid.spacing;
    grid.occupancy.par_chunks_mut(slab).enumerate().for_each(|(k, cells)| {
        if k == 0 || k == nz - 1 {
            return;
        }
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let p = origin + Vec3::new(i as f64, j as f64, k as f64) * spacing;
                cells[i + nx * j] = passes_quota(&masked, &p, required, cfg.min_depth);
            }
        }
    });
    Ok(grid)
}

// Cube corner c has offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Edges as (lower corner, axis); the upper corner is `lower | (1 << axis)`.
const EDGES: [(usize, usize); 12] = [
    (0, 0),
    (2, 0),
    (4, 0),
    (6, 0),
    (0, 1),
    (1, 1),
    (4, 1),
    (5, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

fn edge_between(a: usize, b: usize) -> usize {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as usize;
    EDGES
        .iter()
        .position(|&(c, ax)| c == lo && ax == axis)
        .expect("corners are adjacent")
}

fn corner_pos(c: usize) -> Vec3 {
    let o = CORNER_OFFSETS[c];
    Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
}

fn edge_midpoint(e: usize) -> Vec3 {
    let (c, axis) = EDGES[e];
    let mut p = corner_pos(c);
    p[axis] += 0.5;
    p
}

/// The six cube faces, corners counter-clockwise seen from outside.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0usize; 4]; 6];
    for (f, slot) in out.iter_mut().enumerate() {
        let axis = f / 2;
        let side = f % 2;
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let base = side << axis;
        let mut quad = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)];
        // (u, v, axis) is right-handed, so this order circles +axis.
        // The upper face (side 1) faces +axis as wanted; flip the lower one.
        if side == 0 {
            quad.reverse();
        }
        *slot = quad;
    }
    out
}

/// One closed contour of a cube configuration, as cube-edge ids in the
/// winding that makes triangles face the empty side.
#[derive(Debug, Clone)]
struct Contour {
    edges: Vec<u8>,
    /// Triangulate around the contour centroid instead of a corner fan.
    centroid: bool,
}

/// Contours for all 256 corner configurations.
///
/// Every face is cut the same way from both adjacent cubes: each corner
/// transition from occupied to empty (walking the face counter-clockwise
/// from outside) is joined to the next transition. On a face with two
/// diagonal occupied corners this keeps the occupied corners connected.
/// Because the rule depends only on the face's own corners, neighbouring
/// cubes produce identical face segments and the surface closes up.
fn contour_table() -> &'static [Vec<Contour>; 256] {
    static TABLE: OnceLock<[Vec<Contour>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = faces();
        std::array::from_fn(|config| {
            let occ = |c: usize| config & (1 << c) != 0;
            // successor of each cube edge along the contour
            let mut next = [usize::MAX; 12];
            for quad in &faces {
                let crossing: Vec<usize> = (0..4).filter(|&i| occ(quad[i]) != occ(quad[(i + 1) % 4])).collect();
                for (n, &i) in crossing.iter().enumerate() {
                    if occ(quad[i]) {
                        let j = crossing[(n + 1) % crossing.len()];
                        let from = edge_between(quad[i], quad[(i + 1) % 4]);
                        let to = edge_between(quad[j], quad[(j + 1) % 4]);
                        next[from] = to;
                    }
                }
            }
            let mut seen = [false; 12];
            let mut contours = Vec::new();
            for start in 0..12 {
                if next[start] == usize::MAX || seen[start] {
                    continue;
                }
                let mut ring = Vec::new();
                let mut e = start;
                while !seen[e] {
                    seen[e] = true;
                    ring.push(e as u8);
                    e = next[e];
                }
                // walking exit→entry circles the occupied corner the wrong
                // way round; reverse so normals point at empty space
                ring.reverse();
                let centroid = ring.len() > 3 && fan_crosses_face(&ring, &faces);
                contours.push(Contour { edges: ring, centroid });
            }
            contours
        })
    })
}

/// Whether a fan from the first vertex would draw a diagonal lying in a
/// cube face, where it could collide with the neighbouring cube's fan.
fn fan_crosses_face(ring: &[u8], faces: &[[usize; 4]; 6]) -> bool {
    let on_face = |e: usize, quad: &[usize; 4]| {
        let (c, axis) = EDGES[e];
        let hi = c | (1 << axis);
        quad.contains(&c) && quad.contains(&hi)
    };
    let v0 = ring[0] as usize;
    ring[2..ring.len() - 1]
        .iter()
        .any(|&vk| faces.iter().any(|q| on_face(v0, q) && on_face(vk as usize, q)))
}

#[derive(Clone, Copy)]
enum VertexRef {
    /// Grid edge key: `(lattice point index) * 3 + axis` in the padded lattice.
    Edge(u64),
    /// Index into the layer's centroid list.
    Centroid(u32),
}

#[derive(Default)]
struct Layer {
    triangles: Vec<[VertexRef; 3]>,
    centroids: Vec<Vec3>,
}

/// Closed mesh of the 0.5 level set of the binary field. Vertices sit at
/// midpoints between neighbouring voxel centers; cells outside the grid
/// read as empty so the result is closed even when content touches the
/// boundary.
pub fn marching_cubes(grid: &OccupancyGrid) -> Result<TriangleMesh> {
    if grid.occupied_count() == 0 {
        return Err(Error::EmptyGrid);
    }
    let table = contour_table();
    let [nx, ny, nz] = grid.dims;
    // padded lattice coordinates run over -1..=n, shifted by +1 for keys
    let (px, py) = ((nx + 2) as u64, (ny + 2) as u64);
    let key = |i: isize, j: isize, k: isize, axis: usize| -> u64 {
        let lin = (i + 1) as u64 + px * ((j + 1) as u64 + py * (k + 1) as u64);
        lin * 3 + axis as u64
    };
    let h = grid.spacing;
    let origin = grid.origin;

    let layers: Vec<Layer> = (-1..nz as isize)
        .into_par_iter()
        .map(|k| {
            let mut layer = Layer::default();
            for j in -1..ny as isize {
                for i in -1..nx as isize {
                    let mut config = 0usize;
                    for (c, o) in CORNER_OFFSETS.iter().enumerate() {
                        if grid.get_signed(i + o[0] as isize, j + o[1] as isize, k + o[2] as isize) {
                            config |= 1 << c;
                        }
                    }
                    if config == 0 || config == 255 {
                        continue;
                    }
                    let base = Vec3::new(i as f64, j as f64, k as f64);
                    for contour in &table[config] {
                        let refs: Vec<(VertexRef, Vec3)> = contour
                            .edges
                            .iter()
                            .map(|&e| {
                                let (c, axis) = EDGES[e as usize];
                                let o = CORNER_OFFSETS[c];
                                let r = key(i + o[0] as isize, j + o[1] as isize, k + o[2] as isize, axis);
                                (VertexRef::Edge(r), base + edge_midpoint(e as usize))
                            })
                            .collect();
                        if contour.centroid {
                            let c = refs.iter().fold(Vec3::zeros(), |a, (_, p)| a + p) / refs.len() as f64;
                            let cref = VertexRef::Centroid(layer.centroids.len() as u32);
                            layer.centroids.push(origin + c * h);
                            for n in 0..refs.len() {
                                layer.triangles.push([cref, refs[n].0, refs[(n + 1) % refs.len()].0]);
                            }
                        } else {
                            for n in 1..refs.len() - 1 {
                                layer.triangles.push([refs[0].0, refs[n].0, refs[n + 1].0]);
                            }
                        }
                    }
                }
            }
            layer
        })
        .collect();

    let mut vertices = Vec::new();
    let mut lookup: HashMap<u64, u32> = HashMap::new();
    let mut triangles = Vec::with_capacity(layers.iter().map(|l| l.triangles.len()).sum());
    let edge_position = |r: u64| -> Vec3 {
        let axis = (r % 3) as usize;
        let lin = r / 3;
        let i = (lin % px) as f64 - 1.0;
        let j = ((lin / px) % py) as f64 - 1.0;
        let k = (lin / (px * py)) as f64 - 1.0;
        let mut p = Vec3::new(i, j, k);
        p[axis] += 0.5;
        origin + p * h
    };
    for layer in layers {
        let mut centroid_ids = vec![u32::MAX; layer.centroids.len()];
        for tri in layer.triangles {
            let mut out = [0u32; 3];
            for (slot, r) in out.iter_mut().zip(tri) {
                *slot = match r {
                    VertexRef::Edge(key) => *lookup.entry(key).or_insert_with(|| {
                        vertices.push(edge_position(key));
                        (vertices.len() - 1) as u32
                    }),
                    VertexRef::Centroid(c) => {
                        let id = &mut centroid_ids[c as usize];
                        if *id == u32::MAX {
                            vertices.push(layer.centroids[c as usize]);
                            *id = (vertices.len() - 1) as u32;
                        }
                        *id
                    }
                };
            }
            triangles.push(out);
        }
    }
    Ok(TriangleMesh::new(vertices, triangles))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub grid: OccupancyGrid,
    pub mesh: TriangleMesh,
}

/// Carves within the padded bounding box of `cloud` (or the given box)
/// and extracts the surface.
pub fn reconstruct(
    views: &[CameraView],
    cloud: Option<&PointCloud>,
    bbox: Option<Aabb>,
    resolution: usize,
    cfg: &MaskingConfig,
) -> Result<Reconstruction> {
    let extent = match (cloud, bbox) {
        (Some(c), _) => masked_bounding_box(c, EXTENT_PAD)?,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::MissingExtent),
    };
    let grid = carve_occupancy(views, &extent, resolution, cfg)?;
    let mesh = marching_cubes(&grid)?;
    Ok(Reconstruction { grid, mesh })
}

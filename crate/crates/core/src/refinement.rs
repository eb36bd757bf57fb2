//! Mesh clean-up after extraction: vertex-clustering simplification and
//! Taubin (λ|μ) smoothing.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    /// λ/μ step pairs.
    pub smooth_iters: usize,
    pub smooth_lambda: f64,
    pub taubin_mu: f64,
    /// Clustering cell size in meters; 0 disables simplification.
    pub simplify_cell: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            smooth_iters: 5,
            smooth_lambda: 0.5,
            taubin_mu: -0.53,
            simplify_cell: 0.0,
        }
    }
}

impl RefinementConfig {
    pub fn off() -> Self {
        RefinementConfig {
            smooth_iters: 0,
            simplify_cell: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_lambda > 0.0 && self.smooth_lambda < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "smooth_lambda must be in (0, 1), got {}",
                self.smooth_lambda
            )));
        }
        if !(self.taubin_mu > -1.0 && self.taubin_mu < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "taubin_mu must be in (-1, 0), got {}",
                self.taubin_mu
            )));
        }
        if !(self.simplify_cell >= 0.0 && self.simplify_cell.is_finite()) {
            return Err(Error::InvalidConfig("simplify_cell must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Sorted one-ring of every vertex.
fn neighbours(mesh: &TriangleMesh) -> Vec<Vec<u32>> {
    let mut sets: Vec<Vec<u32>> = vec![Vec::new(); mesh.vertices.len()];
    for t in &mesh.triangles {
        for k in 0..3 {
            let a = t[k];
            let b = t[(k + 1) % 3];
            sets[a as usize].push(b);
            sets[b as usize].push(a);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
        s.dedup();
    }
    sets
}

fn umbrella_step(vertices: &[Vec3], ring: &[Vec<u32>], factor: f64) -> Vec<Vec3> {
    vertices
        .par_iter()
        .zip(ring.par_iter())
        .map(|(v, nb)| {
            if nb.is_empty() {
                return *v;
            }
            let mean = nb.iter().fold(Vec3::zeros(), |acc, &j| acc + vertices[j as usize]) / nb.len() as f64;
            v + (mean - v) * factor
        })
        .collect()
}

/// Taubin smoothing with uniform umbrella weights. Connectivity is left
/// untouched; each of the `smooth_iters` passes is a shrinking λ step
/// followed by an inflating μ step.
pub fn smooth(mesh: &TriangleMesh, cfg: &RefinementConfig) -> Result<TriangleMesh> {
    cfg.validate()?;
    if cfg.smooth_iters == 0 {
        return Ok(mesh.clone());
    }
    let ring = neighbours(mesh);
    let mut vertices = mesh.vertices.clone();
    for _ in 0..cfg.smooth_iters {
        vertices = umbrella_step(&vertices, &ring, cfg.smooth_lambda);
        vertices = umbrella_step(&vertices, &ring, cfg.taubin_mu);
    }
    Ok(TriangleMesh::new(vertices, mesh.triangles.clone()))
}

type CellKey = (i64, i64, i64);

fn cluster_key(v: &Vec3, origin: &Vec3, cell: f64) -> CellKey {
    let r = (v - origin) / cell;
    (r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64)
}

/// Collapses `mesh` through the vertex → cluster map. Degenerate faces and
/// pairs of coincident, opposite faces are removed. Also returns the
/// cluster id of every surviving vertex.
fn collapse(mesh: &TriangleMesh, cluster_of: &[u32], centroids: &[Vec3]) -> (TriangleMesh, Vec<u32>) {
    let mut faces: Vec<[u32; 3]> = Vec::with_capacity(mesh.triangles.len());
    for t in &mesh.triangles {
        let m = t.map(|i| cluster_of[i as usize]);
        if m[0] != m[1] && m[1] != m[2] && m[0] != m[2] {
            faces.push(m);
        }
    }
    // canonical rotation and orientation-free key for cancellation
    let mut by_set: HashMap<[u32; 3], Vec<usize>> = HashMap::new();
    for (i, f) in faces.iter().enumerate() {
        let mut s = *f;
        s.sort_unstable();
        by_set.entry(s).or_default().push(i);
    }
    let mut drop = vec![false; faces.len()];
    for idx in by_set.values() {
        if idx.len() > 1 {
            for &i in idx {
                drop[i] = true;
            }
        }
    }
    let mut remap = vec![u32::MAX; centroids.len()];
    let mut vertices = Vec::new();
    let mut origin = Vec::new();
    let mut triangles = Vec::new();
    for (f, d) in faces.into_iter().zip(drop) {
        if d {
            continue;
        }
        triangles.push(f.map(|c| {
            let slot = &mut remap[c as usize];
            if *slot == u32::MAX {
                *slot = vertices.len() as u32;
                vertices.push(centroids[c as usize]);
                origin.push(c);
            }
            *slot
        }));
    }
    (TriangleMesh::new(vertices, triangles), origin)
}

/// Vertices that touch a non-manifold or boundary edge, or whose fan is
/// not a single disc.
fn bad_vertices(mesh: &TriangleMesh) -> HashSet<u32> {
    let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let mut bad = HashSet::new();
    for (&(a, b), &n) in &directed {
        if n != 1 || directed.get(&(b, a)) != Some(&1) {
            bad.insert(a);
            bad.insert(b);
        }
    }
    // vertex link must be one cycle (rules out pinched vertices)
    let mut outgoing: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            // around vertex t[k], the opposite edge goes t[k+1] -> t[k+2]
            outgoing.entry(t[k]).or_default().push((t[(k + 1) % 3], t[(k + 2) % 3]));
        }
    }
    for (v, edges) in outgoing {
        if bad.contains(&v) {
            continue;
        }
        let link: HashMap<u32, u32> = edges.iter().copied().collect();
        if link.len() != edges.len() {
            bad.insert(v);
            continue;
        }
        let start = edges[0].0;
        let mut cur = start;
        let mut steps = 0;
        while let Some(&n) = link.get(&cur) {
            cur = n;
            steps += 1;
            if cur == start || steps > edges.len() {
                break;
            }
        }
        if cur != start || steps != edges.len() {
            bad.insert(v);
        }
    }
    bad
}

/// Vertex clustering on a grid of `simplify_cell`. Each occupied cell's
/// vertices merge to their centroid. Cells whose merge would break the
/// manifold property are split back to their original vertices until the
/// result is clean, so a watertight input stays watertight.
pub fn simplify(mesh: &TriangleMesh, cfg: &RefinementConfig) -> Result<TriangleMesh> {
    cfg.validate()?;
    if cfg.simplify_cell <= 0.0 {
        return Err(Error::InvalidConfig("simplify_cell must be positive".into()));
    }
    let bb = Aabb::from_points(&mesh.vertices).ok_or(Error::EmptyMesh)?;
    let cell = cfg.simplify_cell;
    let keys: Vec<CellKey> = mesh.vertices.iter().map(|v| cluster_key(v, &bb.min, cell)).collect();
    // BTreeMap gives a deterministic cluster numbering
    let mut members: BTreeMap<CellKey, Vec<u32>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        members.entry(*k).or_default().push(i as u32);
    }
    let mut split: HashSet<CellKey> = HashSet::new();
    loop {
        let mut cluster_of = vec![0u32; mesh.vertices.len()];
        let mut centroids = Vec::new();
        // cell of each cluster, None for vertices already split out
        let mut cluster_cell: Vec<Option<CellKey>> = Vec::new();
        for (key, idx) in &members {
            if split.contains(key) || idx.len() == 1 {
                for &i in idx {
                    cluster_of[i as usize] = centroids.len() as u32;
                    centroids.push(mesh.vertices[i as usize]);
                    cluster_cell.push(None);
                }
            } else {
                let c = idx.iter().fold(Vec3::zeros(), |a, &i| a + mesh.vertices[i as usize]) / idx.len() as f64;
                for &i in idx {
                    cluster_of[i as usize] = centroids.len() as u32;
                }
                centroids.push(c);
                cluster_cell.push(Some(*key));
            }
        }
        let (out, origin) = collapse(mesh, &cluster_of, &centroids);
        let bad = bad_vertices(&out);
        let cell_of = |v: u32| cluster_cell[origin[v as usize] as usize];
        let mut offending: Vec<CellKey> = bad.iter().filter_map(|&v| cell_of(v)).collect();
        // a broken original vertex is fixed by splitting merged neighbours
        for t in &out.triangles {
            if t.iter().any(|v| bad.contains(v) && cell_of(*v).is_none()) {
                offending.extend(t.iter().filter_map(|&v| cell_of(v)));
            }
        }
        offending.retain(|k| !split.contains(k));
        if offending.is_empty() {
            if out.vertices.len() < 4 {
                return Err(Error::CollapseToDegenerate {
                    vertices: out.vertices.len(),
                });
            }
            if !bad.is_empty() {
                log::warn!("simplify: {} non-manifold vertices remain", bad.len());
            }
            return Ok(out);
        }
        offending.sort_unstable();
        split.extend(offending);
    }
}

/// Simplification (when enabled) followed by smoothing.
pub fn refine(mesh: &TriangleMesh, cfg: &RefinementConfig) -> Result<TriangleMesh> {
    cfg.validate()?;
    let simplified = if cfg.simplify_cell > 0.0 {
        simplify(mesh, cfg)?
    } else {
        mesh.clone()
    };
    smooth(&simplified, cfg)
}

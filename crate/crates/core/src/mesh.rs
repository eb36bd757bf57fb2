//! Indexed triangle meshes and their topological checks.

use std::collections::HashMap;

use crate::geometry::Vec3;

/// Indexed triangle mesh. Triangles are counter-clockwise seen from outside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        TriangleMesh { vertices, triangles }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    pub fn indices_in_range(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().flatten().all(|&i| i < n)
    }

    /// Each directed edge occurs once and its reverse occurs once: the mesh
    /// is closed, edge-manifold and consistently oriented.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() || !self.indices_in_range() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for k in 0..3 {
                let e = (t[k], t[(k + 1) % 3]);
                if e.0 == e.1 {
                    return false;
                }
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]))))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// Vertices referenced by at least one triangle.
    pub fn referenced_vertex_count(&self) -> usize {
        let mut used = vec![false; self.vertices.len()];
        for &i in self.triangles.iter().flatten() {
            used[i as usize] = true;
        }
        used.into_iter().filter(|&u| u).count()
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        self.referenced_vertex_count() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    pub fn min_triangle_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| self.triangle_area(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn flipped(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    pub fn translated(&self, offset: &Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v * s).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Drops unreferenced vertices, keeping the remaining order.
    pub fn compact(&self) -> TriangleMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut triangles = Vec::with_capacity(self.triangles.len());
        for t in &self.triangles {
            let mut out = [0u32; 3];
            for k in 0..3 {
                let i = t[k] as usize;
                if remap[i] == u32::MAX {
                    remap[i] = vertices.len() as u32;
                    vertices.push(self.vertices[i]);
                }
                out[k] = remap[i];
            }
            triangles.push(out);
        }
        TriangleMesh { vertices, triangles }
    }

    /// Axis-aligned box `[min, max]³` with 12 outward triangles.
    pub fn cube(min: Vec3, max: Vec3) -> TriangleMesh {
        let v = |x: bool, y: bool, z: bool| {
            Vec3::new(
                if x { max.x } else { min.x },
                if y { max.y } else { min.y },
                if z { max.z } else { min.z },
            )
        };
        let vertices = vec![
            v(false, false, false),
            v(true, false, false),
            v(true, true, false),
            v(false, true, false),
            v(false, false, true),
            v(true, false, true),
            v(true, true, true),
            v(false, true, true),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriangleMesh { vertices, triangles }
    }

    /// Icosahedron subdivided `level` times, vertices pushed onto the sphere.
    pub fn icosphere(center: Vec3, radius: f64, level: u32) -> TriangleMesh {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut triangles: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
            let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for &[a, b, c] in &triangles {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        TriangleMesh {
            vertices: vertices.into_iter().map(|v| center + v * radius).collect(),
            triangles,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_is_closed_genus_zero() {
        let m = TriangleMesh::cube(Vec3::zeros(), Vec3::repeat(1.0));
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn flipped_mesh_is_still_consistent() {
        let m = TriangleMesh::cube(Vec3::zeros(), Vec3::repeat(1.0)).flipped();
        assert!(m.is_watertight());
    }

    #[test]
    fn open_mesh_is_not_watertight() {
        let mut m = TriangleMesh::cube(Vec3::zeros(), Vec3::repeat(1.0));
        m.triangles.pop();
        assert!(!m.is_watertight());
        // one inconsistently wound triangle
        let mut m = TriangleMesh::cube(Vec3::zeros(), Vec3::repeat(1.0));
        let [a, b, c] = m.triangles[0];
        m.triangles[0] = [a, c, b];
        assert!(!m.is_watertight());
    }

    #[test]
    fn icosphere_counts() {
        let m = TriangleMesh::icosphere(Vec3::zeros(), 1.0, 2);
        assert_eq!(m.triangles.len(), 20 * 16);
        assert_eq!(m.vertices.len(), 162);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn compact_drops_orphans() {
        let mut m = TriangleMesh::cube(Vec3::zeros(), Vec3::repeat(1.0));
        m.vertices.push(Vec3::repeat(9.0));
        let c = m.compact();
        assert_eq!(c.vertices.len(), 8);
        assert!(c.is_watertight());
    }
}

//! Marching cubes over a regular scalar grid, with vertices shared between
//! neighbouring cells.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::mcubes_tables::{EDGE_TABLE, TRIANGLE_TABLE};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Largest number of triangles sharing one undirected edge.
    pub fn max_edge_share(&self) -> usize {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().copied().max().unwrap_or(0)
    }

    /// Indexed-triangle text: `v x y z` lines, then `f i j k` (0-based).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# vertices {} triangles {}", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0], t[1], t[2]);
        }
        s
    }
}

/// Regular sample grid: `n` points per axis from `origin` with `spacing`,
/// stored x-fastest.
#[derive(Clone, Debug)]
pub struct Grid {
    pub n: usize,
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl Grid {
    /// Samples `f` on the cube `[-half, half]³` with `cells` cells per axis.
    pub fn sample(cells: usize, half: f64, f: impl Fn(Vec3) -> f64) -> Self {
        let n = cells + 1;
        let spacing = 2.0 * half / cells as f64;
        let origin = [-half; 3];
        let mut values = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    values.push(f(point(origin, spacing, x, y, z)));
                }
            }
        }
        Self {
            n,
            origin,
            spacing,
            values,
        }
    }

    /// Points of the grid in storage order.
    pub fn points(cells: usize, half: f64) -> Vec<Vec3> {
        let n = cells + 1;
        let spacing = 2.0 * half / cells as f64;
        let origin = [-half; 3];
        let mut out = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    out.push(point(origin, spacing, x, y, z));
                }
            }
        }
        out
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(z * self.n + y) * self.n + x]
    }
}

fn point(origin: Vec3, h: f64, x: usize, y: usize, z: usize) -> Vec3 {
    [
        origin[0] + h * x as f64,
        origin[1] + h * y as f64,
        origin[2] + h * z as f64,
    ]
}

const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

/// Edge `e` joins corners `EDGES[e]`.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (3, 2),
    (0, 3),
    (4, 5),
    (5, 6),
    (7, 6),
    (4, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Surface where the grid crosses `iso`; values above `iso` are inside.
pub fn marching_cubes(grid: &Grid, iso: f64) -> Mesh {
    let n = grid.n;
    let mut mesh = Mesh::default();
    if n < 2 {
        return mesh;
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    let pid = |x: usize, y: usize, z: usize| (z * n + y) * n + x;
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let mut vals = [0.0; 8];
                let mut index = 0usize;
                for (i, (dx, dy, dz)) in CORNERS.iter().enumerate() {
                    vals[i] = grid.at(x + dx, y + dy, z + dz);
                    if vals[i] < iso {
                        index |= 1 << i;
                    }
                }
                let edges = EDGE_TABLE[index];
                if edges == 0 {
                    continue;
                }
                let mut ids = [usize::MAX; 12];
                for (e, (a, b)) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (CORNERS[*a], CORNERS[*b]);
                    let ka = pid(x + ca.0, y + ca.1, z + ca.2);
                    let kb = pid(x + cb.0, y + cb.1, z + cb.2);
                    let key = (ka.min(kb), ka.max(kb));
                    ids[e] = *shared.entry(key).or_insert_with(|| {
                        let pa = point(grid.origin, grid.spacing, x + ca.0, y + ca.1, z + ca.2);
                        let pb = point(grid.origin, grid.spacing, x + cb.0, y + cb.1, z + cb.2);
                        let (va, vb) = (vals[*a], vals[*b]);
                        let t = if (vb - va).abs() > 1e-300 {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        } else {
                            0.5
                        };
                        mesh.vertices.push([
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ]);
                        mesh.vertices.len() - 1
                    });
                }
                let row = &TRIANGLE_TABLE[index];
                for tri in row.chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::norm;

    #[test]
    fn empty_field_gives_empty_mesh() {
        let g = Grid::sample(8, 1.0, |_| 0.0);
        assert!(marching_cubes(&g, 1.0).is_empty());
    }

    #[test]
    fn ball_is_closed_and_near_its_radius() {
        let g = Grid::sample(24, 1.0, |p| 0.5 - norm(p));
        let m = marching_cubes(&g, 0.0);
        assert!(!m.is_empty());
        assert_eq!(m.max_edge_share(), 2);
        let h = 2.0 / 24.0;
        for v in &m.vertices {
            assert!((norm(*v) - 0.5).abs() < h);
        }
    }

    #[test]
    fn text_export_lists_everything() {
        let g = Grid::sample(6, 1.0, |p| 0.5 - norm(p));
        let m = marching_cubes(&g, 0.0);
        let t = m.to_text();
        assert_eq!(t.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(t.lines().filter(|l| l.starts_with("f ")).count(), m.triangles.len());
    }
}

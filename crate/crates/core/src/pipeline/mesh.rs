//! Zero-surface extraction to Wavefront OBJ by marching tetrahedra.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Result};
use crate::grid::TsdfGrid;
use crate::vec3::{cross, dot, sub, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Six tetrahedra sharing the cube diagonal 0-6.
const TETS: [[usize; 4]; 6] = [
    [0, 6, 1, 2],
    [0, 6, 2, 3],
    [0, 6, 3, 7],
    [0, 6, 7, 4],
    [0, 6, 4, 5],
    [0, 6, 5, 1],
];

struct Builder<'a> {
    grid: &'a TsdfGrid,
    mesh: TriangleMesh,
    cache: HashMap<(usize, usize), usize>,
}

impl Builder<'_> {
    fn pos(&self, i: usize) -> Vec3 {
        let s = self.grid.resolution();
        [(i % s) as f64, ((i / s) % s) as f64, (i / (s * s)) as f64]
    }

    fn value(&self, i: usize) -> f64 {
        self.grid.values()[i] as f64
    }

    /// Crossing point on the edge between flat indices `a` and `b`.
    fn vertex(&mut self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        let (va, vb) = (self.value(key.0), self.value(key.1));
        let t = va / (va - vb);
        let (pa, pb) = (self.pos(key.0), self.pos(key.1));
        let p = [
            pa[0] + t * (pb[0] - pa[0]),
            pa[1] + t * (pb[1] - pa[1]),
            pa[2] + t * (pb[2] - pa[2]),
        ];
        self.mesh.vertices.push(p);
        let id = self.mesh.vertices.len() - 1;
        self.cache.insert(key, id);
        id
    }

    /// Emits a triangle facing from inside (negative) to outside.
    fn triangle(&mut self, v: [usize; 3], inside: Vec3) {
        let p: Vec<Vec3> = v.iter().map(|&i| self.mesh.vertices[i]).collect();
        let n = cross(sub(p[1], p[0]), sub(p[2], p[0]));
        if dot(n, sub(p[0], inside)) < 0.0 {
            self.mesh.triangles.push([v[0], v[2], v[1]]);
        } else {
            self.mesh.triangles.push(v);
        }
    }

    fn tet(&mut self, idx: [usize; 4]) {
        let inside: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| self.value(i) < 0.0)
            .collect();
        let outside: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| self.value(i) >= 0.0)
            .collect();
        if inside.is_empty() || outside.is_empty() {
            return;
        }
        let centroid = |b: &Self, set: &[usize]| {
            let mut c = [0.0; 3];
            for &i in set {
                let p = b.pos(i);
                for k in 0..3 {
                    c[k] += p[k] / set.len() as f64;
                }
            }
            c
        };
        let reference = centroid(self, &inside);
        match inside.len() {
            1 | 3 => {
                let (lone, others) = if inside.len() == 1 {
                    (inside[0], &outside)
                } else {
                    (outside[0], &inside)
                };
                let v = [
                    self.vertex(lone, others[0]),
                    self.vertex(lone, others[1]),
                    self.vertex(lone, others[2]),
                ];
                self.triangle(v, reference);
            }
            _ => {
                let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
                let q = [
                    self.vertex(a, c),
                    self.vertex(a, d),
                    self.vertex(b, d),
                    self.vertex(b, c),
                ];
                self.triangle([q[0], q[1], q[2]], reference);
                self.triangle([q[0], q[2], q[3]], reference);
            }
        }
    }
}

/// Triangulated `value = 0` surface with vertices in voxel coordinates.
pub fn extract_mesh(grid: &TsdfGrid) -> TriangleMesh {
    let s = grid.resolution();
    let mut b = Builder {
        grid,
        mesh: TriangleMesh::default(),
        cache: HashMap::new(),
    };
    if s < 2 {
        return b.mesh;
    }
    for z in 0..s - 1 {
        for y in 0..s - 1 {
            for x in 0..s - 1 {
                let corner =
                    |c: usize| grid.index(x + CORNERS[c][0], y + CORNERS[c][1], z + CORNERS[c][2]);
                for t in TETS {
                    b.tet([corner(t[0]), corner(t[1]), corner(t[2]), corner(t[3])]);
                }
            }
        }
    }
    b.mesh
}

pub fn mesh_to_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn save_obj(grid: &TsdfGrid, path: &Path) -> Result<()> {
    std::fs::write(path, mesh_to_obj(&extract_mesh(grid))).map_err(|e| io_err(path, e))
}

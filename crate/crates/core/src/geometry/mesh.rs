use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::{Error, Result};

/// Indexed triangle mesh in the model frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    colors: Option<Vec<Vector3<f64>>>,
    diameter: f64,
    centroid: Vector3<f64>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        colors: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::Data("mesh has no vertices".into()));
        }
        if let Some(bad) = faces.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::Data(format!(
                "face index {bad} out of range for {} vertices",
                vertices.len()
            )));
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(Error::Data("color count differs from vertex count".into()));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::Data("non-finite vertex".into()));
        }
        let diameter = max_pairwise_distance(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::Data("mesh diameter must be positive".into()));
        }
        let centroid = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
        Ok(Self {
            vertices,
            faces,
            colors,
            diameter,
            centroid,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Vector3<f64>]> {
        self.colors.as_deref()
    }

    /// Maximum pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Mean of the vertices.
    pub fn centroid(&self) -> Vector3<f64> {
        self.centroid
    }

    /// Appends `other`'s geometry; colors default to mid gray where missing.
    pub fn merged(&self, other: &TriMesh) -> Result<TriMesh> {
        let offset = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(
            other
                .faces
                .iter()
                .map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]),
        );
        let colors = match (&self.colors, &other.colors) {
            (None, None) => None,
            (a, b) => {
                let gray = Vector3::repeat(0.5);
                let mut c = a.clone().unwrap_or_else(|| vec![gray; self.vertices.len()]);
                c.extend(b.clone().unwrap_or_else(|| vec![gray; other.vertices.len()]));
                Some(c)
            }
        };
        TriMesh::new(vertices, faces, colors)
    }

    pub fn translated(&self, d: Vector3<f64>) -> Result<TriMesh> {
        TriMesh::new(
            self.vertices.iter().map(|v| v + d).collect(),
            self.faces.clone(),
            self.colors.clone(),
        )
    }

    /// Axis-aligned box centered at the origin, one flat color per face pair.
    pub fn cuboid(sx: f64, sy: f64, sz: f64) -> Result<TriMesh> {
        let h = Vector3::new(sx, sy, sz) * 0.5;
        let palette = [
            Vector3::new(0.85, 0.25, 0.2),
            Vector3::new(0.2, 0.7, 0.3),
            Vector3::new(0.25, 0.35, 0.9),
        ];
        let mut vertices = Vec::with_capacity(24);
        let mut colors = Vec::with_capacity(24);
        let mut faces = Vec::with_capacity(12);
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let base = vertices.len();
                for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * h[axis];
                    p[u] = a * h[u];
                    p[v] = b * h[v];
                    vertices.push(p);
                    let shade = if sign > 0.0 { 1.0 } else { 0.6 };
                    colors.push(palette[axis] * shade);
                }
                // counter-clockwise seen from outside
                if sign > 0.0 {
                    faces.push([base, base + 1, base + 2]);
                    faces.push([base, base + 2, base + 3]);
                } else {
                    faces.push([base, base + 2, base + 1]);
                    faces.push([base, base + 3, base + 2]);
                }
            }
        }
        TriMesh::new(vertices, faces, Some(colors))
    }

    /// Sphere tessellated as a subdivided icosahedron.
    pub fn sphere(radius: f64, level: u32) -> Result<TriMesh> {
        let (v, f) = crate::viewspace::subdivided_icosahedron(level)?;
        let colors = v
            .iter()
            .map(|p| Vector3::new(0.55 + 0.3 * p.z, 0.5, 0.45 - 0.3 * p.z))
            .collect();
        TriMesh::new(v.into_iter().map(|p| p * radius).collect(), f, Some(colors))
    }

    /// Closed cylinder around the model z-axis, centered at the origin.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> Result<TriMesh> {
        if segments < 3 {
            return Err(Error::Config("cylinder needs at least 3 segments".into()));
        }
        let h = 0.5 * height;
        let mut vertices = vec![Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, -h)];
        let mut colors = vec![Vector3::new(0.9, 0.8, 0.3), Vector3::new(0.5, 0.45, 0.2)];
        for k in 0..segments {
            let a = std::f64::consts::TAU * k as f64 / segments as f64;
            let (s, c) = a.sin_cos();
            vertices.push(Vector3::new(radius * c, radius * s, h));
            vertices.push(Vector3::new(radius * c, radius * s, -h));
            colors.push(Vector3::new(0.3, 0.6, 0.85));
            colors.push(Vector3::new(0.2, 0.4, 0.6));
        }
        let mut faces = Vec::with_capacity(4 * segments);
        for k in 0..segments {
            let (t0, b0) = (2 + 2 * k, 3 + 2 * k);
            let (t1, b1) = (2 + 2 * ((k + 1) % segments), 3 + 2 * ((k + 1) % segments));
            faces.push([0, t0, t1]);
            faces.push([1, b1, b0]);
            faces.push([t0, b0, b1]);
            faces.push([t0, b1, t1]);
        }
        TriMesh::new(vertices, faces, Some(colors))
    }

    /// Asymmetric test object: a box with an off-center block on top and a
    /// peg on one side. About 0.2 m across.
    pub fn toy() -> Result<TriMesh> {
        let body = TriMesh::cuboid(0.12, 0.08, 0.06)?;
        let block = TriMesh::cuboid(0.05, 0.05, 0.05)?.translated(Vector3::new(0.03, 0.01, 0.055))?;
        let peg = TriMesh::cuboid(0.04, 0.02, 0.02)?.translated(Vector3::new(-0.075, -0.02, -0.01))?;
        let merged = body.merged(&block)?.merged(&peg)?;
        let c = merged.centroid();
        merged.translated(-c)
    }

    pub fn from_ply_path(path: impl AsRef<Path>) -> Result<TriMesh> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ply(f).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Reads ASCII PLY: vertex x/y/z with optional red/green/blue, and face
    /// index lists (polygons are fan-triangulated).
    pub fn read_ply(reader: impl Read) -> Result<TriMesh> {
        let mut lines = BufReader::new(reader).lines();
        let mut next_line = || -> Result<Option<String>> {
            lines
                .next()
                .transpose()
                .map_err(|e| Error::Data(format!("ply read failed: {e}")))
        };
        let bad = |m: &str| Error::Data(format!("ply: {m}"));
        if next_line()?.as_deref().map(str::trim) != Some("ply") {
            return Err(bad("missing magic"));
        }
        let mut n_vertices = 0usize;
        let mut n_faces = 0usize;
        let mut vertex_props: Vec<(String, String)> = Vec::new();
        let mut current = String::new();
        let mut saw_format = false;
        loop {
            let line = next_line()?.ok_or_else(|| bad("truncated header"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["format", "ascii", _] => saw_format = true,
                ["format", ..] => return Err(bad("only ascii format is supported")),
                ["element", name, count] => {
                    current = name.to_string();
                    let count: usize = count.parse().map_err(|_| bad("element count"))?;
                    match *name {
                        "vertex" => n_vertices = count,
                        "face" => n_faces = count,
                        _ if count == 0 => {}
                        _ => return Err(bad(&format!("unsupported element {name}"))),
                    }
                }
                ["property", "list", ..] => {}
                ["property", ty, name] if current == "vertex" => {
                    vertex_props.push((ty.to_string(), name.to_string()))
                }
                ["end_header"] => break,
                _ => {}
            }
        }
        if !saw_format {
            return Err(bad("missing format line"));
        }
        let idx = |n: &str| vertex_props.iter().position(|(_, p)| p == n);
        let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(bad("vertex needs x, y, z")),
        };
        let rgb = match (idx("red"), idx("green"), idx("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        let mut vertices = Vec::with_capacity(n_vertices);
        let mut colors = rgb.map(|_| Vec::with_capacity(n_vertices));
        for _ in 0..n_vertices {
            let line = next_line()?.ok_or_else(|| bad("truncated vertex list"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("non-numeric vertex value"))?;
            if vals.len() < vertex_props.len() {
                return Err(bad("short vertex line"));
            }
            vertices.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some(cols), Some(ch)) = (colors.as_mut(), rgb) {
                let scale = |k: usize| {
                    if vertex_props[ch[k]].0.contains("float") {
                        vals[ch[k]]
                    } else {
                        vals[ch[k]] / 255.0
                    }
                };
                cols.push(Vector3::new(scale(0), scale(1), scale(2)));
            }
        }
        let mut faces = Vec::with_capacity(n_faces);
        for _ in 0..n_faces {
            let line = next_line()?.ok_or_else(|| bad("truncated face list"))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad face index"))?;
            let (&n, rest) = vals.split_first().ok_or_else(|| bad("empty face line"))?;
            if n < 3 || rest.len() < n {
                return Err(bad("face needs at least 3 indices"));
            }
            for k in 1..n - 1 {
                faces.push([rest[0], rest[k], rest[k + 1]]);
            }
        }
        TriMesh::new(vertices, faces, colors)
    }

    pub fn write_ply(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z")?;
        if self.colors.is_some() {
            writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
        }
        writeln!(w, "element face {}", self.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices\nend_header")?;
        for (i, v) in self.vertices.iter().enumerate() {
            write!(w, "{} {} {}", v.x, v.y, v.z)?;
            if let Some(c) = &self.colors {
                let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                write!(w, " {} {} {}", q(c[i].x), q(c[i].y), q(c[i].z))?;
            }
            writeln!(w)?;
        }
        for f in &self.faces {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
        Ok(())
    }
}

fn max_pairwise_distance(v: &[Vector3<f64>]) -> f64 {
    let row_max = |i: usize| {
        v[i + 1..]
            .iter()
            .map(|q| (v[i] - q).norm_squared())
            .fold(0.0f64, f64::max)
    };
    let best = if v.len() > 2000 {
        (0..v.len()).into_par_iter().map(row_max).reduce(|| 0.0, f64::max)
    } else {
        (0..v.len()).map(row_max).fold(0.0, f64::max)
    };
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_diameter(m: &TriMesh) -> f64 {
        let mut best = 0.0f64;
        for a in m.vertices() {
            for b in m.vertices() {
                best = best.max((a - b).norm());
            }
        }
        best
    }

    #[test]
    fn cuboid_diameter_is_space_diagonal() {
        let m = TriMesh::cuboid(0.1, 0.2, 0.3).unwrap();
        let expect = (0.01f64 + 0.04 + 0.09).sqrt();
        assert!((m.diameter() - expect).abs() < 1e-12);
        assert_eq!(m.faces().len(), 12);
        assert!(m.centroid().norm() < 1e-12);
    }

    #[test]
    fn diameters_match_brute_force() {
        for m in [
            TriMesh::toy().unwrap(),
            TriMesh::sphere(0.05, 1).unwrap(),
            TriMesh::cylinder(0.03, 0.1, 12).unwrap(),
        ] {
            assert!((m.diameter() - brute_diameter(&m)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_indices_and_degenerate_meshes() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]], None).is_err());
        assert!(TriMesh::new(vec![Vector3::zeros()], vec![], None).is_err());
        assert!(TriMesh::new(vec![], vec![], None).is_err());
    }

    #[test]
    fn ply_roundtrip_and_quads() {
        let m = TriMesh::toy().unwrap();
        let mut buf = Vec::new();
        m.write_ply(&mut buf).unwrap();
        let back = TriMesh::read_ply(buf.as_slice()).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(back.colors().is_some());

        let quad = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let q = TriMesh::read_ply(quad.as_bytes()).unwrap();
        assert_eq!(q.faces(), &[[0, 1, 2], [0, 2, 3]]);
        assert!(q.colors().is_none());
    }

    #[test]
    fn ply_errors() {
        assert!(TriMesh::read_ply("plx\n".as_bytes()).is_err());
        let binary = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(TriMesh::read_ply(binary.as_bytes()).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(TriMesh::read_ply(short.as_bytes()).is_err());
    }
}

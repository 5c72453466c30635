//! Structured Q1 meshes: the 2D rectangle and the 3D ellipsoidal shell.

use std::f64::consts::PI;
use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

/// Which formula produces the `z` coordinate of the ellipsoidal map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMode {
    /// `z = c(r) sin θ` (elevation angle, non-degenerate shell).
    Standard,
    /// `z = c(r) sin φ`, the literal published form. Degenerate in θ.
    Literal,
}

/// Semi-axis ranges and angular ranges of the ellipsoidal shell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidGeometry {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub c: [f64; 2],
    pub theta: [f64; 2],
    pub phi: [f64; 2],
    pub z_mode: ZMode,
}

impl Default for EllipsoidGeometry {
    fn default() -> Self {
        EllipsoidGeometry {
            a: [2.2, 3.3],
            b: [2.2, 3.3],
            c: [5.9, 6.4],
            theta: [-3.0 * PI / 8.0, PI / 8.0],
            phi: [-3.0 * PI / 2.0, PI / 2.0],
            z_mode: ZMode::Standard,
        }
    }
}

impl EllipsoidGeometry {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(r[0] > 0.0 && r[1] > 0.0 && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::invalid(format!("semi-axis range {name} must be positive")));
            }
        }
        for (name, r) in [("theta", self.theta), ("phi", self.phi)] {
            if !(r[1] > r[0]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::invalid(format!("degenerate angle range {name}: {r:?}")));
            }
        }
        Ok(())
    }

    /// Semi-axes at normalized depth `r`, linearly interpolated.
    pub fn semi_axes(&self, r: f64) -> [f64; 3] {
        let lerp = |s: [f64; 2]| s[0] + r * (s[1] - s[0]);
        [lerp(self.a), lerp(self.b), lerp(self.c)]
    }

    /// Parameter box in `(θ, r, φ)` order.
    pub fn parameter_box(&self) -> [[f64; 2]; 3] {
        [self.theta, [0.0, 1.0], self.phi]
    }
}

const RANGE_SLACK: f64 = 1e-12;

/// Maps curvilinear `(r, θ, φ)` to cartesian coordinates (cm).
pub fn ellipsoid_map(r: f64, theta: f64, phi: f64, geom: &EllipsoidGeometry) -> Result<[f64; 3]> {
    let inside = |v: f64, lo: f64, hi: f64| {
        v.is_finite() && v >= lo - RANGE_SLACK * (1.0 + lo.abs()) && v <= hi + RANGE_SLACK * (1.0 + hi.abs())
    };
    if !inside(r, 0.0, 1.0) {
        return Err(Error::invalid(format!("r = {r} outside [0, 1]")));
    }
    if !inside(theta, geom.theta[0], geom.theta[1]) {
        return Err(Error::invalid(format!("theta = {theta} outside {:?}", geom.theta)));
    }
    if !inside(phi, geom.phi[0], geom.phi[1]) {
        return Err(Error::invalid(format!("phi = {phi} outside {:?}", geom.phi)));
    }
    Ok(ellipsoid_point(r, theta, phi, geom))
}

/// Unchecked map, also used for the φ-tangent fiber field.
pub(crate) fn ellipsoid_point(r: f64, theta: f64, phi: f64, geom: &EllipsoidGeometry) -> [f64; 3] {
    let [a, b, c] = geom.semi_axes(r);
    let z = match geom.z_mode {
        ZMode::Standard => c * theta.sin(),
        ZMode::Literal => c * phi.sin(),
    };
    [a * theta.cos() * phi.cos(), b * theta.cos() * phi.sin(), z]
}

/// Structured Q1 grid with flat connectivity (4 or 8 node ids per element).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredGrid {
    dim: usize,
    counts: Vec<usize>,
    nodes: Vec<[f64; 3]>,
    connectivity: Vec<usize>,
    /// Per-node `(θ, r, φ)` for the ellipsoidal shell.
    curvilinear: Option<(EllipsoidGeometry, Vec<[f64; 3]>)>,
}

pub fn build_rect_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<StructuredGrid> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("element counts must be at least 1"));
    }
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::invalid("domain lengths must be positive"));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([i as f64 * hx, j as f64 * hy, 0.0]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut connectivity = Vec::with_capacity(4 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            connectivity.extend_from_slice(&[id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Ok(StructuredGrid {
        dim: 2,
        counts: vec![nx, ny],
        nodes,
        connectivity,
        curvilinear: None,
    })
}

/// Hexahedral shell grid: axis `i` runs along φ, `j` along θ, `k` along r.
pub fn build_ellipsoid_grid(
    ni: usize,
    nj: usize,
    nk: usize,
    geom: &EllipsoidGeometry,
) -> Result<StructuredGrid> {
    if ni == 0 || nj == 0 || nk == 0 {
        return Err(Error::invalid("element counts must be at least 1"));
    }
    geom.validate()?;
    let lattice = |range: [f64; 2], n: usize, idx: usize| {
        range[0] + (range[1] - range[0]) * idx as f64 / n as f64
    };
    let n_nodes = (ni + 1) * (nj + 1) * (nk + 1);
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut curv = Vec::with_capacity(n_nodes);
    for k in 0..=nk {
        let r = k as f64 / nk as f64;
        for j in 0..=nj {
            let theta = lattice(geom.theta, nj, j);
            for i in 0..=ni {
                let phi = lattice(geom.phi, ni, i);
                nodes.push(ellipsoid_point(r, theta, phi, geom));
                curv.push([theta, r, phi]);
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| (k * (nj + 1) + j) * (ni + 1) + i;
    let mut connectivity = Vec::with_capacity(8 * ni * nj * nk);
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                connectivity.extend_from_slice(&[
                    id(i, j, k),
                    id(i + 1, j, k),
                    id(i + 1, j + 1, k),
                    id(i, j + 1, k),
                    id(i, j, k + 1),
                    id(i + 1, j, k + 1),
                    id(i + 1, j + 1, k + 1),
                    id(i, j + 1, k + 1),
                ]);
            }
        }
    }
    Ok(StructuredGrid {
        dim: 3,
        counts: vec![ni, nj, nk],
        nodes,
        connectivity,
        curvilinear: Some((*geom, curv)),
    })
}

impl StructuredGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Elements per axis.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        1 << self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.connectivity.len() / self.nodes_per_element()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let npe = self.nodes_per_element();
        &self.connectivity[e * npe..(e + 1) * npe]
    }

    pub fn element_coords(&self, e: usize) -> Vec<[f64; 3]> {
        self.element(e).iter().map(|&n| self.nodes[n]).collect()
    }

    pub fn centroid(&self, e: usize) -> [f64; 3] {
        let ids = self.element(e);
        let mut c = [0.0; 3];
        for &n in ids {
            for d in 0..3 {
                c[d] += self.nodes[n][d];
            }
        }
        c.map(|v| v / ids.len() as f64)
    }

    pub fn geometry(&self) -> Option<&EllipsoidGeometry> {
        self.curvilinear.as_ref().map(|(g, _)| g)
    }

    /// Node `(θ, r, φ)` coordinates, present for shell grids.
    pub fn curvilinear_coords(&self) -> Option<&[[f64; 3]]> {
        self.curvilinear.as_ref().map(|(_, c)| c.as_slice())
    }

    /// Axis-aligned bounding box `(min, max)` of the node cloud.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Minimum edge length over all elements along their local axes.
    pub fn min_edge(&self) -> f64 {
        let edges: &[(usize, usize)] = if self.dim == 2 {
            &[(0, 1), (1, 2), (2, 3), (3, 0)]
        } else {
            &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
        };
        let mut h = f64::INFINITY;
        for e in 0..self.n_elements() {
            let ids = self.element(e);
            for &(a, b) in edges {
                h = h.min(dist(&self.nodes[ids[a]], &self.nodes[ids[b]]));
            }
        }
        h
    }

    const MAGIC: &'static [u8; 8] = b"ECGLGRID";

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(Self::MAGIC, 1);
        w.u32(self.dim as u32);
        for &c in &self.counts {
            w.u32(c as u32);
        }
        w.u64(self.nodes.len() as u64).u64(self.n_elements() as u64);
        for p in &self.nodes {
            w.f64s(p);
        }
        let conn: Vec<u32> = self.connectivity.iter().map(|&n| n as u32).collect();
        w.u32s(&conn);
        match &self.curvilinear {
            None => {
                w.u8(0);
            }
            Some((g, coords)) => {
                w.u8(1);
                w.f64s(&g.a).f64s(&g.b).f64s(&g.c).f64s(&g.theta).f64s(&g.phi);
                w.u8(matches!(g.z_mode, ZMode::Literal) as u8);
                for c in coords {
                    w.f64s(c);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, Self::MAGIC, 1)?;
        let dim = r.u32()? as usize;
        if dim != 2 && dim != 3 {
            return Err(Error::corrupt(format!("bad grid dimension {dim}")));
        }
        let mut counts = Vec::with_capacity(dim);
        for _ in 0..dim {
            counts.push(r.u32()? as usize);
        }
        let n_nodes = r.count(bytes.len() / 24)?;
        let n_elems = r.count(bytes.len() / 16)?;
        let expected_nodes: usize = counts.iter().map(|c| c + 1).product();
        let expected_elems: usize = counts.iter().product();
        if n_nodes != expected_nodes || n_elems != expected_elems {
            return Err(Error::corrupt("grid header counts disagree with lattice size"));
        }
        let flat = r.f64s(3 * n_nodes)?;
        let nodes = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let npe = 1 << dim;
        let connectivity: Vec<usize> = r.u32s(npe * n_elems)?.into_iter().map(|v| v as usize).collect();
        if connectivity.iter().any(|&n| n >= n_nodes) {
            return Err(Error::corrupt("connectivity references missing node"));
        }
        let curvilinear = match r.u8()? {
            0 => None,
            1 => {
                let two = |r: &mut BinReader| -> Result<[f64; 2]> {
                    let v = r.f64s(2)?;
                    Ok([v[0], v[1]])
                };
                let a = two(&mut r)?;
                let b = two(&mut r)?;
                let c = two(&mut r)?;
                let theta = two(&mut r)?;
                let phi = two(&mut r)?;
                let z_mode = if r.u8()? == 1 { ZMode::Literal } else { ZMode::Standard };
                let flat = r.f64s(3 * n_nodes)?;
                let coords = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                Some((EllipsoidGeometry { a, b, c, theta, phi, z_mode }, coords))
            }
            t => return Err(Error::corrupt(format!("bad curvilinear tag {t}"))),
        };
        r.finish()?;
        Ok(StructuredGrid {
            dim,
            counts,
            nodes,
            connectivity,
            curvilinear,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

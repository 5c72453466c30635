//! Pseudo-ECG observation operator.
//!
//! Lead potentials are linear in the nodal potential, so each lead reduces to
//! a transfer vector `z` with `pECG(t) = zᵀ v(t)`:
//!
//! `z_j = −1/(4πσ_b) Σ_e ∫_e (D_i ∇φ_j) · (x − y)/|x − y|³ dy`.
//!
//! 2D tissue is embedded in the plane `z = 0` with unit thickness.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::element;
use crate::fem::quadrature::tensor_rule;
use crate::fem::{ConductivityField, StructuredGrid};
use crate::monodomain::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct LeadSet {
    pub positions: Vec<[f64; 3]>,
    pub sigma_b: f64,
}

impl LeadSet {
    pub fn new(positions: Vec<[f64; 3]>, sigma_b: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("lead set is empty"));
        }
        if !(sigma_b > 0.0) || !sigma_b.is_finite() {
            return Err(Error::invalid("bath conductivity must be positive"));
        }
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite lead position"));
        }
        Ok(LeadSet { positions, sigma_b })
    }

    /// `n` leads evenly spaced over `x ∈ [x0, x1]` at fixed `y` and height `z`.
    pub fn line(n: usize, x0: f64, x1: f64, y: f64, z: f64, sigma_b: f64) -> Result<Self> {
        let positions = (0..n)
            .map(|i| {
                let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                [x0 + s * (x1 - x0), y, z]
            })
            .collect();
        Self::new(positions, sigma_b)
    }

    /// `n` quasi-uniform leads on a sphere (Fibonacci lattice).
    pub fn sphere(n: usize, center: [f64; 3], radius: f64, sigma_b: f64) -> Result<Self> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let positions = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let a = golden * i as f64;
                [
                    center[0] + radius * rho * a.cos(),
                    center[1] + radius * rho * a.sin(),
                    center[2] + radius * z,
                ]
            })
            .collect();
        Self::new(positions, sigma_b)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Every lead must lie strictly outside the grid's bounding box
    /// (for 2D grids, the box is the tissue plane `z = 0`).
    pub fn check_outside(&self, grid: &StructuredGrid) -> Result<()> {
        let (lo, hi) = grid.bounding_box();
        for (i, x) in self.positions.iter().enumerate() {
            let inside = (0..3).all(|d| x[d] >= lo[d] && x[d] <= hi[d]);
            if inside {
                return Err(Error::invalid(format!("lead {i} at {x:?} is not outside the domain")));
            }
        }
        Ok(())
    }
}

/// Transfer vector of a single lead with `order` Gauss points per axis.
pub fn lead_transfer_vector(
    grid: &StructuredGrid,
    di: &ConductivityField,
    lead: &[f64; 3],
    sigma_b: f64,
    order: usize,
) -> Result<Vec<f64>> {
    if di.tensors.len() != grid.n_elements() {
        return Err(Error::invalid("intracellular conductivity field does not match grid"));
    }
    LeadSet::new(vec![*lead], sigma_b)?.check_outside(grid)?;
    if !(1..=8).contains(&order) {
        return Err(Error::invalid("quadrature order must be between 1 and 8"));
    }
    let dim = grid.dim();
    let npe = grid.nodes_per_element();
    let rule = tensor_rule(dim, order);
    let scale = -1.0 / (4.0 * std::f64::consts::PI * sigma_b);
    let blocks: Vec<Vec<f64>> = (0..grid.n_elements())
        .into_par_iter()
        .map(|e| {
            let coords = grid.element_coords(e);
            let d = &di.tensors[e];
            let mut local = vec![0.0; npe];
            for (xi, w) in &rule {
                let p = element::eval(dim, &coords, xi);
                let r = [lead[0] - p.x[0], lead[1] - p.x[1], lead[2] - p.x[2]];
                let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                let k = w * p.det / (r2 * r2.sqrt());
                for (a, g) in p.grad.iter().enumerate() {
                    let dg = d.apply(g);
                    local[a] += k * (dg[0] * r[0] + dg[1] * r[1] + dg[2] * r[2]);
                }
            }
            local
        })
        .collect();
    let mut z = vec![0.0; grid.n_nodes()];
    for (e, local) in blocks.iter().enumerate() {
        for (a, &node) in grid.element(e).iter().enumerate() {
            z[node] += scale * local[a];
        }
    }
    Ok(z)
}

/// Transfer vectors for a whole lead set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn assemble(grid: &StructuredGrid, di: &ConductivityField, leads: &LeadSet, order: usize) -> Result<Self> {
        leads.check_outside(grid)?;
        let rows = leads
            .positions
            .iter()
            .map(|x| lead_transfer_vector(grid, di, x, leads.sigma_b, order))
            .collect::<Result<_>>()?;
        Ok(TransferMatrix { rows })
    }

    pub fn n_leads(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Lead readings for one nodal field.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_nodes() {
            return Err(Error::invalid(format!(
                "field has {} nodes, transfer vectors have {}",
                v.len(),
                self.n_nodes()
            )));
        }
        Ok(self.rows.iter().map(|z| z.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }
}

/// Lead signals on a uniform time grid, stored lead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PecgSignal {
    /// `values[lead][time]`.
    pub values: Vec<Vec<f64>>,
    pub t0: f64,
    pub dt: f64,
}

impl PecgSignal {
    pub fn new(values: Vec<Vec<f64>>, t0: f64, dt: f64) -> Result<Self> {
        let s = PecgSignal { values, t0, dt };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.n_times();
        if self.values.is_empty() || nt < 2 || self.values.iter().any(|r| r.len() != nt) {
            return Err(Error::invalid("signal needs ≥ 1 lead and ≥ 2 equal-length samples"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("signal dt must be positive"));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("signal contains NaN or Inf"));
        }
        Ok(())
    }

    pub fn n_leads(&self) -> usize {
        self.values.len()
    }

    pub fn n_times(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times()).map(|j| self.t0 + j as f64 * self.dt).collect()
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + (self.n_times() - 1) as f64 * self.dt
    }

    /// Linear interpolation onto `n_t` uniform points spanning the same interval.
    pub fn resample(&self, n_t: usize) -> Result<Self> {
        if n_t < 2 {
            return Err(Error::invalid("resampling needs at least 2 points"));
        }
        let m = self.n_times();
        let span = self.t_end() - self.t0;
        let new_dt = span / (n_t - 1) as f64;
        let values = self
            .values
            .iter()
            .map(|row| {
                (0..n_t)
                    .map(|j| {
                        // Position in source sample units.
                        let s = j as f64 * (m - 1) as f64 / (n_t - 1) as f64;
                        let k = (s.floor() as usize).min(m - 2);
                        let f = s - k as f64;
                        row[k] + f * (row[k + 1] - row[k])
                    })
                    .collect()
            })
            .collect();
        PecgSignal::new(values, self.t0, new_dt)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 0..self.n_leads() {
            let _ = write!(out, ",lead_{i}");
        }
        out.push('\n');
        for (j, t) in self.times().into_iter().enumerate() {
            let _ = write!(out, "{t}");
            for row in &self.values {
                let _ = write!(out, ",{}", row[j]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::corrupt("empty signal CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let expected = (0..cols.len().saturating_sub(1)).map(|i| format!("lead_{i}"));
        if cols.first() != Some(&"t") || cols.len() < 2 || !cols[1..].iter().zip(expected).all(|(c, e)| *c == e) {
            return Err(Error::corrupt("signal CSV header must be `t,lead_0,…`"));
        }
        let n_leads = cols.len() - 1;
        let mut times = Vec::new();
        let mut values = vec![Vec::new(); n_leads];
        for (ln, line) in lines.enumerate() {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::corrupt(format!("signal CSV row {}: {e}", ln + 2)))?;
            if fields.len() != n_leads + 1 {
                return Err(Error::corrupt(format!("signal CSV row {} has {} fields", ln + 2, fields.len())));
            }
            times.push(fields[0]);
            for (i, v) in fields[1..].iter().enumerate() {
                values[i].push(*v);
            }
        }
        if times.len() < 2 {
            return Err(Error::corrupt("signal CSV needs at least two rows"));
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        let uniform = times
            .iter()
            .enumerate()
            .all(|(j, t)| (t - (times[0] + j as f64 * dt)).abs() <= 1e-6 * dt.abs().max(1e-12));
        if !uniform {
            return Err(Error::corrupt("signal CSV time column is not uniform"));
        }
        PecgSignal::new(values, times[0], dt)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Streaming accumulation of lead readings from simulation snapshots.
#[derive(Debug, Clone)]
pub struct PecgRecorder<'a> {
    transfer: &'a TransferMatrix,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl<'a> PecgRecorder<'a> {
    pub fn new(transfer: &'a TransferMatrix) -> Self {
        PecgRecorder {
            transfer,
            times: vec![],
            values: vec![Vec::new(); transfer.n_leads()],
        }
    }

    pub fn push(&mut self, t: f64, v: &[f64]) -> Result<()> {
        let r = self.transfer.apply(v)?;
        self.times.push(t);
        for (row, x) in self.values.iter_mut().zip(r) {
            row.push(x);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PecgSignal> {
        if self.times.len() < 2 {
            return Err(Error::invalid("need at least two snapshots for a signal"));
        }
        let dt = self.times[1] - self.times[0];
        PecgSignal::new(self.values, self.times[0], dt)
    }
}

/// `values[i][j] = z_iᵀ v(t_j)` for a stored trajectory.
pub fn compute_pecg(traj: &Trajectory, transfer: &TransferMatrix) -> Result<PecgSignal> {
    let mut rec = PecgRecorder::new(transfer);
    for (t, v) in traj.times.iter().zip(&traj.snapshots) {
        rec.push(*t, v)?;
    }
    rec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{build_rect_grid, Tensor};

    fn iso(grid: &StructuredGrid) -> ConductivityField {
        ConductivityField::uniform(grid, Tensor::scalar(grid.dim(), 1.0))
    }

    #[test]
    fn constant_field_reads_zero() {
        let g = build_rect_grid(16, 4, 2.0, 0.5).unwrap();
        let z = lead_transfer_vector(&g, &iso(&g), &[0.7, -0.3, 1.0], 1.0, 2).unwrap();
        let l1: f64 = z.iter().map(|x| x.abs()).sum();
        let reading: f64 = z.iter().map(|x| x * -80.0).sum();
        assert!(reading.abs() <= 1e-9 * l1 * 80.0);
    }

    #[test]
    fn mirror_leads_agree_on_symmetric_field() {
        let (nx, ny) = (20, 6);
        let g = build_rect_grid(nx, ny, 2.0, 0.6).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| (-((x[0] - 1.0).powi(2) + (x[1] - 0.3).powi(2)) * 4.0).exp()).collect();
        let leads = LeadSet::new(vec![[0.4, 0.3, 1.5], [1.6, 0.3, 1.5]], 1.0).unwrap();
        let tm = TransferMatrix::assemble(&g, &iso(&g), &leads, 2).unwrap();
        let r = tm.apply(&v).unwrap();
        assert!((r[0] - r[1]).abs() < 1e-8);
    }

    #[test]
    fn single_element_matches_refined_quadrature() {
        let g = build_rect_grid(1, 1, 1.0, 1.0).unwrap();
        let lead = [3.0, 2.0, 1.5];
        let z = lead_transfer_vector(&g, &iso(&g), &lead, 1.0, 2).unwrap();
        let v = [0.3, -1.2, 2.0, 0.7];
        let reading: f64 = z.iter().zip(&v).map(|(a, b)| a * b).sum();
        // Oracle: composite midpoint rule on 20×20 cells of the bilinear field
        // v = v0(1−x)(1−y) + v1 x(1−y) + v2(1−x)y + v3 xy.
        let m = 20;
        let h = 1.0 / m as f64;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                let gx = (v[1] - v[0]) * (1.0 - y) + (v[3] - v[2]) * y;
                let gy = (v[2] - v[0]) * (1.0 - x) + (v[3] - v[1]) * x;
                let r = [lead[0] - x, lead[1] - y, lead[2]];
                let d3 = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).powf(1.5);
                acc += h * h * (gx * r[0] + gy * r[1]) / d3;
            }
        }
        let oracle = -acc / (4.0 * std::f64::consts::PI);
        assert!((reading - oracle).abs() < 0.01 * oracle.abs(), "{reading} vs {oracle}");
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let g = build_rect_grid(32, 8, 2.0, 0.5).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| (3.0 * x[0]).sin() * (1.0 + x[1])).collect();
        let lead = [1.0, -0.5, 0.5];
        let r2: f64 = lead_transfer_vector(&g, &iso(&g), &lead, 1.0, 2).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
        let r3: f64 = lead_transfer_vector(&g, &iso(&g), &lead, 1.0, 3).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((r2 - r3).abs() < 0.01 * r3.abs());
    }

    #[test]
    fn lead_inside_domain_rejected() {
        let g = build_rect_grid(4, 2, 1.0, 0.5).unwrap();
        assert!(lead_transfer_vector(&g, &iso(&g), &[0.5, 0.25, 0.0], 1.0, 2).is_err());
        assert!(lead_transfer_vector(&g, &iso(&g), &[0.5, 0.25, 1e-3], 1.0, 2).is_ok());
        assert!(LeadSet::new(vec![[0.0, 0.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn flat_baseline_and_linearity() {
        let g = build_rect_grid(8, 4, 1.0, 0.5).unwrap();
        let leads = LeadSet::line(5, 0.0, 1.0, 0.0, 2.0, 1.0).unwrap();
        let tm = TransferMatrix::assemble(&g, &iso(&g), &leads, 2).unwrap();
        let n = g.n_nodes();
        let rest = Trajectory { times: vec![0.0, 1.0, 2.0], snapshots: vec![vec![-80.0; n]; 3] };
        let s = compute_pecg(&rest, &tm).unwrap();
        for row in &s.values {
            assert!(row.iter().all(|&x| x == row[0]));
        }
        let a: Vec<Vec<f64>> = (0..3).map(|k| (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|k| (0..n).map(|i| ((i * 5 + k) % 13) as f64 - 6.0).collect()).collect();
        let (alpha, beta) = (2.0, -0.5);
        let mix: Vec<Vec<f64>> =
            a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| alpha * p + beta * q).collect()).collect();
        let sig = |snaps: Vec<Vec<f64>>| compute_pecg(&Trajectory { times: vec![0.0, 1.0, 2.0], snapshots: snaps }, &tm).unwrap();
        let (sa, sb, sm) = (sig(a), sig(b), sig(mix));
        for i in 0..5 {
            for j in 0..3 {
                let expect = alpha * sa.values[i][j] + beta * sb.values[i][j];
                assert!((sm.values[i][j] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn csv_round_trip_and_resample() {
        let s = PecgSignal::new(vec![vec![0.0, 1.0, 4.0], vec![1.5, -2.0, 0.25]], 0.0, 0.5).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("t,lead_0,lead_1\n"));
        assert_eq!(PecgSignal::from_csv(&csv).unwrap(), s);
        let r = s.resample(5).unwrap();
        assert_eq!(r.values[0], vec![0.0, 0.5, 1.0, 2.5, 4.0]);
        assert!((r.dt - 0.25).abs() < 1e-15);
        assert!(PecgSignal::from_csv("x,lead_0\n0,1\n1,2\n").is_err());
        assert!(PecgSignal::new(vec![vec![f64::NAN, 1.0]], 0.0, 1.0).is_err());
    }
}

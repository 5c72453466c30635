use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::element;
use crate::fem::grid::StructuredGrid;
use crate::fem::quadrature::tensor_rule;
use crate::fem::sparse::SparseSpdMatrix;
use crate::fem::tensor::ConductivityField;

/// Gauss points per axis used for mass and stiffness.
const ORDER: usize = 2;

/// Element matrices are computed in parallel and scattered serially in element order.
fn assemble<F>(grid: &StructuredGrid, local: F) -> SparseSpdMatrix
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let npe = grid.nodes_per_element();
    let blocks: Vec<Vec<f64>> = (0..grid.n_elements()).into_par_iter().map(&local).collect();
    let mut triplets = Vec::with_capacity(blocks.len() * npe * npe);
    for (e, block) in blocks.iter().enumerate() {
        let ids = grid.element(e);
        for a in 0..npe {
            for b in 0..npe {
                triplets.push((ids[a], ids[b], block[a * npe + b]));
            }
        }
    }
    SparseSpdMatrix::from_triplets(grid.n_nodes(), triplets)
}

/// Consistent Q1 mass matrix.
pub fn assemble_mass(grid: &StructuredGrid) -> SparseSpdMatrix {
    let rule = tensor_rule(grid.dim(), ORDER);
    let npe = grid.nodes_per_element();
    assemble(grid, |e| {
        let coords = grid.element_coords(e);
        let mut block = vec![0.0; npe * npe];
        for (xi, w) in &rule {
            let p = element::eval(grid.dim(), &coords, xi);
            let dv = w * p.det;
            for a in 0..npe {
                for b in 0..npe {
                    block[a * npe + b] += dv * p.n[a] * p.n[b];
                }
            }
        }
        // Exact symmetry regardless of summation order.
        for a in 0..npe {
            for b in (a + 1)..npe {
                block[b * npe + a] = block[a * npe + b];
            }
        }
        block
    })
}

/// Row-sum lumped mass matrix.
pub fn assemble_lumped_mass(grid: &StructuredGrid) -> SparseSpdMatrix {
    assemble_mass(grid).lumped()
}

/// Stiffness matrix `∫ D ∇φ_a · ∇φ_b` with one tensor per element.
pub fn assemble_stiffness(grid: &StructuredGrid, field: &ConductivityField) -> Result<SparseSpdMatrix> {
    if field.tensors.len() != grid.n_elements() {
        return Err(Error::invalid(format!(
            "conductivity field has {} tensors for {} elements",
            field.tensors.len(),
            grid.n_elements()
        )));
    }
    if field.tensors.iter().any(|t| t.dim != grid.dim()) {
        return Err(Error::invalid("tensor dimension does not match grid"));
    }
    let rule = tensor_rule(grid.dim(), ORDER);
    let npe = grid.nodes_per_element();
    Ok(assemble(grid, |e| {
        let coords = grid.element_coords(e);
        let d = &field.tensors[e];
        let mut block = vec![0.0; npe * npe];
        for (xi, w) in &rule {
            let p = element::eval(grid.dim(), &coords, xi);
            let dv = w * p.det;
            for a in 0..npe {
                let dga = d.apply(&p.grad[a]);
                for b in a..npe {
                    let gb = &p.grad[b];
                    block[a * npe + b] += dv * (dga[0] * gb[0] + dga[1] * gb[1] + dga[2] * gb[2]);
                }
            }
        }
        for a in 0..npe {
            for b in (a + 1)..npe {
                block[b * npe + a] = block[a * npe + b];
            }
        }
        // Rows of the element Laplacian sum to zero; remove quadrature roundoff.
        for a in 0..npe {
            let s: f64 = (0..npe).filter(|&b| b != a).map(|b| block[a * npe + b]).sum();
            block[a * npe + a] = -s;
        }
        block
    }))
}

/// Domain measure `∫_Ω 1`, via the same quadrature.
pub fn domain_measure(grid: &StructuredGrid) -> f64 {
    let rule = tensor_rule(grid.dim(), ORDER);
    (0..grid.n_elements())
        .map(|e| {
            let coords = grid.element_coords(e);
            rule.iter().map(|(xi, w)| w * element::eval(grid.dim(), &coords, xi).det).sum::<f64>()
        })
        .sum()
}

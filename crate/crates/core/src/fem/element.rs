//! Isoparametric Q1 element evaluation.

/// Reference-node sign pattern; nodes ordered as in the grid connectivity.
const SIGNS_2D: [[f64; 3]; 4] = [[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
const SIGNS_3D: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Shape values, physical gradients and `|det J|` at one reference point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub n: Vec<f64>,
    pub grad: Vec<[f64; 3]>,
    pub det: f64,
    /// Physical position of the point.
    pub x: [f64; 3],
}

pub fn eval(dim: usize, coords: &[[f64; 3]], xi: &[f64; 3]) -> PointEval {
    let signs: &[[f64; 3]] = if dim == 2 { &SIGNS_2D } else { &SIGNS_3D };
    let npe = signs.len();
    debug_assert_eq!(coords.len(), npe);
    let mut n = vec![0.0; npe];
    let mut dref = vec![[0.0; 3]; npe];
    let scale = if dim == 2 { 0.25 } else { 0.125 };
    for (a, s) in signs.iter().enumerate() {
        let f: [f64; 3] = std::array::from_fn(|d| if d < dim { 1.0 + s[d] * xi[d] } else { 1.0 });
        n[a] = scale * f[0] * f[1] * f[2];
        for d in 0..dim {
            let mut g = scale * s[d];
            for e in 0..dim {
                if e != d {
                    g *= f[e];
                }
            }
            dref[a][d] = g;
        }
    }
    // J[d][e] = ∂x_e/∂ξ_d
    let mut jac = [[0.0; 3]; 3];
    let mut x = [0.0; 3];
    for a in 0..npe {
        for d in 0..dim {
            for e in 0..dim {
                jac[d][e] += dref[a][d] * coords[a][e];
            }
        }
        for e in 0..3 {
            x[e] += n[a] * coords[a][e];
        }
    }
    let (det, inv) = invert(dim, &jac);
    // ∇_x N = J^{-1} ∇_ξ N
    let grad = dref
        .iter()
        .map(|g| {
            let mut out = [0.0; 3];
            for e in 0..dim {
                for d in 0..dim {
                    out[e] += inv[e][d] * g[d];
                }
            }
            out
        })
        .collect();
    PointEval { n, grad, det: det.abs(), x }
}

fn invert(dim: usize, m: &[[f64; 3]; 3]) -> (f64, [[f64; 3]; 3]) {
    let mut inv = [[0.0; 3]; 3];
    if dim == 2 {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        inv[0][0] = m[1][1] / det;
        inv[0][1] = -m[0][1] / det;
        inv[1][0] = -m[1][0] / det;
        inv[1][1] = m[0][0] / det;
        (det, inv)
    } else {
        let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let cof = [
            [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
            [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
            [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
        ];
        let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = cof[j][i] / det;
            }
        }
        (det, inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_and_gradients() {
        let coords = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let p = eval(2, &coords, &[0.3, -0.2, 0.0]);
        assert!((p.n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p.det - 0.5).abs() < 1e-15);
        // Linear field u = x reproduced exactly by its nodal values.
        let gx: f64 = p.grad.iter().zip(&coords).map(|(g, c)| g[0] * c[0]).sum();
        let gy: f64 = p.grad.iter().zip(&coords).map(|(g, c)| g[1] * c[0]).sum();
        assert!((gx - 1.0).abs() < 1e-14 && gy.abs() < 1e-14);
    }

    #[test]
    fn hexahedron_linear_reproduction() {
        let coords: Vec<[f64; 3]> = SIGNS_3D
            .iter()
            .map(|s| [1.0 + 0.5 * s[0] + 0.1 * s[1], 2.0 + 0.7 * s[1], 0.3 * s[2] + 0.05 * s[0]])
            .collect();
        let p = eval(3, &coords, &[0.1, 0.4, -0.6]);
        for comp in 0..3 {
            for dir in 0..3 {
                let g: f64 = p.grad.iter().zip(&coords).map(|(g, c)| g[dir] * c[comp]).sum();
                let expect = if comp == dir { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-13);
            }
        }
    }
}

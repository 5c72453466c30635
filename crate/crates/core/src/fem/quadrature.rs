//! Gauss–Legendre rules on [-1, 1] and tensor-product rules on the reference cell.

use std::f64::consts::PI;

/// Points and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points[i] = -x;
        points[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
    (points, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product rule on the reference square/cube: `(xi, weight)` pairs.
pub fn tensor_rule(dim: usize, order: usize) -> Vec<([f64; 3], f64)> {
    let (pts, wts) = gauss_legendre(order);
    let mut out = Vec::with_capacity(order.pow(dim as u32));
    match dim {
        2 => {
            for (j, &eta) in pts.iter().enumerate() {
                for (i, &xi) in pts.iter().enumerate() {
                    out.push(([xi, eta, 0.0], wts[i] * wts[j]));
                }
            }
        }
        3 => {
            for (k, &zeta) in pts.iter().enumerate() {
                for (j, &eta) in pts.iter().enumerate() {
                    for (i, &xi) in pts.iter().enumerate() {
                        out.push(([xi, eta, zeta], wts[i] * wts[j] * wts[k]));
                    }
                }
            }
        }
        _ => panic!("unsupported dimension {dim}"),
    }
    out
}

//! Fully connected tanh networks over a flat parameter slice.
//!
//! Parameter layout per layer: weights row-major `[out][in]`, then biases.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
}

/// Post-activation values of every layer, input included.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("an MLP needs an input and an output layer of nonzero width"));
        }
        Ok(Mlp { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.n_params());
        for w in self.widths.windows(2) {
            let lim = (6.0 / (w[0] + w[1]) as f64).sqrt();
            theta.extend((0..w[0] * w[1]).map(|_| lim * (2.0 * rng.gen::<f64>() - 1.0)));
            theta.extend(std::iter::repeat(0.0).take(w[1]));
        }
        theta
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() || theta.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "MLP expects input {} and {} parameters, got {} and {}",
                self.input_dim(),
                self.n_params(),
                x.len(),
                theta.len()
            )));
        }
        let mut tape = MlpTape::default();
        self.forward_tape(theta, x, &mut tape);
        Ok(tape.acts.pop().unwrap())
    }

    /// Unchecked forward pass recording activations for the reverse pass.
    pub fn forward_tape(&self, theta: &[f64], x: &[f64], tape: &mut MlpTape) {
        let nl = self.n_layers();
        tape.acts.resize(nl + 1, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..nl {
            let (ni, no) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = theta[off..off + no * (ni + 1)].split_at(no * ni);
            off += no * (ni + 1);
            let (prev, rest) = tape.acts.split_at_mut(l + 1);
            let (a_in, a_out) = (&prev[l], &mut rest[0]);
            a_out.clear();
            for j in 0..no {
                let row = &w[j * ni..(j + 1) * ni];
                let z = b[j] + row.iter().zip(a_in.iter()).map(|(a, b)| a * b).sum::<f64>();
                a_out.push(if l + 1 < nl { z.tanh() } else { z });
            }
        }
    }

    /// Accumulates `∂/∂θ` into `grad` and writes `∂/∂x` into `gx` for the
    /// upstream output gradient `gy`. `scratch` avoids reallocations.
    pub fn backward(&self, theta: &[f64], tape: &MlpTape, gy: &[f64], grad: &mut [f64], gx: &mut [f64], scratch: &mut Vec<f64>) {
        let nl = self.n_layers();
        let mut delta = gy.to_vec();
        let mut off = self.n_params();
        for l in (0..nl).rev() {
            let (ni, no) = (self.widths[l], self.widths[l + 1]);
            off -= no * (ni + 1);
            let a_in = &tape.acts[l];
            let w = &theta[off..off + no * ni];
            let (gw, gb) = grad[off..off + no * (ni + 1)].split_at_mut(no * ni);
            scratch.clear();
            scratch.resize(ni, 0.0);
            for j in 0..no {
                let dj = delta[j];
                gb[j] += dj;
                if dj == 0.0 {
                    continue;
                }
                let row = &w[j * ni..(j + 1) * ni];
                let grow = &mut gw[j * ni..(j + 1) * ni];
                for i in 0..ni {
                    grow[i] += dj * a_in[i];
                    scratch[i] += dj * row[i];
                }
            }
            if l > 0 {
                // Through tanh of the previous layer.
                delta.clear();
                delta.extend(scratch.iter().zip(a_in).map(|(g, a)| g * (1.0 - a * a)));
            } else {
                gx.copy_from_slice(scratch);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_gives_zero() {
        let m = Mlp::new(vec![3, 5, 2]).unwrap();
        let y = m.forward(&vec![0.0; m.n_params()], &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(m.forward(&vec![0.0; m.n_params()], &[1.0]).is_err());
    }

    #[test]
    fn single_linear_layer() {
        let m = Mlp::new(vec![2, 2]).unwrap();
        // W = [[1, 2], [3, 4]], b = [0.5, -1].
        let y = m.forward(&[1.0, 2.0, 3.0, 4.0, 0.5, -1.0], &[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![-0.5, -2.0]);
    }

    #[test]
    fn scalar_two_layer_by_hand() {
        let m = Mlp::new(vec![1, 1, 1]).unwrap();
        let (w1, b1, w2, b2) = (0.7, -0.2, 1.5, 0.3);
        let y = m.forward(&[w1, b1, w2, b2], &[0.5]).unwrap()[0];
        // tanh(0.15) = 0.148885033623318...
        let expected = 1.5 * 0.148_885_033_623_318 + 0.3;
        assert!((y - expected).abs() < 1e-14);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let m = Mlp::new(vec![4, 8, 2]).unwrap();
        let th = m.init(&mut ChaCha8Rng::seed_from_u64(1));
        let lim1 = (6.0f64 / 12.0).sqrt();
        assert!(th[..32].iter().all(|w| w.abs() <= lim1));
        assert!(th[32..40].iter().all(|&b| b == 0.0));
        assert!(th[56..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = Mlp::new(vec![3, 4, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th: Vec<f64> = (0..m.n_params()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let x = [0.3, -0.7, 0.2];
        let gy = [0.6, -1.1];
        let f = |th: &[f64], x: &[f64]| m.forward(th, x).unwrap().iter().zip(&gy).map(|(a, b)| a * b).sum::<f64>();
        let mut tape = MlpTape::default();
        m.forward_tape(&th, &x, &mut tape);
        let mut g = vec![0.0; m.n_params()];
        let mut gx = vec![0.0; 3];
        m.backward(&th, &tape, &gy, &mut g, &mut gx, &mut Vec::new());
        let h = 1e-6;
        for k in 0..th.len() {
            let (mut a, mut b) = (th.clone(), th.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a, &x) - f(&b, &x)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "param {k}: {fd} vs {}", g[k]);
        }
        for k in 0..3 {
            let (mut a, mut b) = (x, x);
            a[k] += h;
            b[k] -= h;
            let fd = (f(&th, &a) - f(&th, &b)) / (2.0 * h);
            assert!((fd - gx[k]).abs() < 1e-8);
        }
    }
}

//! Signal losses and evaluation metrics over lead-major arrays.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

fn check_shapes(pred: &[f64], target: &[f64], n_leads: usize) -> Result<usize> {
    if pred.len() != target.len() || n_leads == 0 || pred.is_empty() || pred.len() % n_leads != 0 {
        return Err(Error::invalid(format!(
            "shape mismatch: {} vs {} values over {n_leads} leads",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.len() / n_leads)
}

/// Mean squared difference over leads and times.
pub fn loss_mse(pred: &[f64], target: &[f64], n_leads: usize) -> Result<f64> {
    check_shapes(pred, target, n_leads)?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `Σ_k |DFT(e)_k|² / N_t` averaged over leads, for residual `e = target − pred`.
pub fn spectral_misfit(pred: &[f64], target: &[f64], n_leads: usize) -> Result<f64> {
    let n_t = check_shapes(pred, target, n_leads)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_t);
    let mut buf = vec![Complex::new(0.0, 0.0); n_t];
    let mut total = 0.0;
    for l in 0..n_leads {
        for (j, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(target[l * n_t + j] - pred[l * n_t + j], 0.0);
        }
        fft.process(&mut buf);
        total += buf.iter().map(Complex::norm_sqr).sum::<f64>() / n_t as f64;
    }
    Ok(total / n_leads as f64)
}

/// MSE plus `ω` times the spectral misfit; `ω = 0` is exactly the MSE.
pub fn loss_fft(pred: &[f64], target: &[f64], n_leads: usize, omega: f64) -> Result<f64> {
    if !(omega >= 0.0) {
        return Err(Error::invalid("omega must be ≥ 0"));
    }
    let mse = loss_mse(pred, target, n_leads)?;
    if omega == 0.0 {
        return Ok(mse);
    }
    Ok(mse + omega * spectral_misfit(pred, target, n_leads)?)
}

/// `∂ loss_fft / ∂ pred`. By Parseval the spectral term contributes
/// `2ω(pred − target)/N_leads` per entry.
pub fn loss_fft_grad(pred: &[f64], target: &[f64], n_leads: usize, omega: f64, out: &mut [f64]) {
    let n = pred.len() as f64;
    let scale = 2.0 / n + 2.0 * omega / n_leads as f64;
    for ((o, p), t) in out.iter_mut().zip(pred).zip(target) {
        *o = scale * (p - t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mse: f64,
    /// RMSE divided by the training signal range (2 in normalized units).
    pub normalized_rmse: f64,
    pub pearson_dissimilarity: f64,
}

/// Pearson correlation; both-constant traces count as 1, one constant as 0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa > 0.0, sbb > 0.0) {
        (false, false) => 1.0,
        (true, true) => sab / (saa * sbb).sqrt(),
        _ => 0.0,
    }
}

/// Metrics over paired normalized signals.
pub fn metrics(preds: &[Vec<f64>], targets: &[Vec<f64>], n_leads: usize) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid("metrics need equally many non-empty predictions and targets"));
    }
    let (mut sq, mut count, mut corr, mut traces) = (0.0, 0usize, 0.0, 0usize);
    for (p, t) in preds.iter().zip(targets) {
        let n_t = check_shapes(p, t, n_leads)?;
        sq += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.len();
        for l in 0..n_leads {
            corr += pearson(&p[l * n_t..(l + 1) * n_t], &t[l * n_t..(l + 1) * n_t]);
            traces += 1;
        }
    }
    let mse = sq / count as f64;
    Ok(Metrics {
        mse,
        normalized_rmse: mse.sqrt() / 2.0,
        pearson_dissimilarity: 1.0 - corr / traces as f64,
    })
}

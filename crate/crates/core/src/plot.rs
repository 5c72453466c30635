//! Per-lead SVG overlays: the first signal is drawn dashed (ground truth),
//! the others solid.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pecg::PecgSignal;

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 130.0;
const PAD: f64 = 14.0;
const COLORS: [&str; 6] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Grid shape for `n` panels: as square as possible, wider than tall.
pub fn panel_grid(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (cols, n.div_ceil(cols))
}

pub fn render_svg(signals: &[PecgSignal]) -> Result<String> {
    let first = signals.first().ok_or_else(|| Error::invalid("nothing to plot"))?;
    let (n_leads, n_t) = (first.n_leads(), first.n_times());
    if signals.iter().any(|s| s.n_leads() != n_leads || s.n_times() != n_t) {
        return Err(Error::invalid("signals to overlay need equal lead and sample counts"));
    }
    let (cols, rows) = panel_grid(n_leads);
    let (w, h) = (cols as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for lead in 0..n_leads {
        let (c, r) = (lead % cols, lead / cols);
        let (x0, y0) = (c as f64 * PANEL_W + PAD, r as f64 * PANEL_H + PAD);
        let (pw, ph) = (PANEL_W - 2.0 * PAD, PANEL_H - 2.0 * PAD);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in signals {
            for &v in &s.values[lead] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi - lo < 1e-12 {
            lo -= 1.0;
            hi += 1.0;
        }
        let _ = writeln!(
            out,
            r##"<g><rect x="{x0:.2}" y="{y0:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#cccccc"/><text x="{:.2}" y="{:.2}">lead {lead}</text>"##,
            x0 + 3.0,
            y0 + 10.0
        );
        for (k, s) in signals.iter().enumerate() {
            let mut pts = String::new();
            for (j, &v) in s.values[lead].iter().enumerate() {
                let x = x0 + pw * j as f64 / (n_t - 1) as f64;
                let y = y0 + ph * (1.0 - (v - lo) / (hi - lo));
                let _ = write!(pts, "{}{x:.2},{y:.2}", if j == 0 { "" } else { " " });
            }
            let dash = if k == 0 { r#" stroke-dasharray="4 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2"{dash} points="{pts}"/>"#,
                COLORS[k % COLORS.len()]
            );
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Reads signal CSVs and writes the overlay; nothing is written on error.
pub fn plot_signals(csv_paths: &[&Path], out: &Path) -> Result<()> {
    if csv_paths.is_empty() {
        return Err(Error::invalid("no input signals"));
    }
    let signals = csv_paths
        .iter()
        .map(|p| PecgSignal::load_csv(p).map_err(|e| e.context(p.display())))
        .collect::<Result<Vec<_>>>()?;
    let svg = render_svg(&signals)?;
    crate::binio::write_atomic(out, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(panel_grid(1), (1, 1));
        assert_eq!(panel_grid(24), (5, 5));
        assert_eq!(panel_grid(23), (5, 5));
        assert_eq!(panel_grid(4), (2, 2));
    }

    #[test]
    fn panels_and_styles() {
        let s = PecgSignal::new(vec![vec![0.0, 1.0, 0.5]; 24], 0.0, 1.0).unwrap();
        let svg = render_svg(&[s.clone(), s.clone()]).unwrap();
        assert_eq!(svg.matches("<g>").count(), 24);
        assert_eq!(svg.matches("stroke-dasharray").count(), 24);
        assert_eq!(svg.matches("<polyline").count(), 48);
        assert_eq!(svg, render_svg(&[s.clone(), s.clone()]).unwrap());
        let other = PecgSignal::new(vec![vec![0.0; 4]; 24], 0.0, 1.0).unwrap();
        assert!(render_svg(&[s, other]).is_err());
        assert!(render_svg(&[]).is_err());
    }
}

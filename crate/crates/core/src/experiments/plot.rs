//! Bar charts of per-class AUC across cells.
//!
//! No font rendering: bars appear in the order of `results.csv`, one per cell.

use std::path::Path;

use ndarray::Array2;

use crate::error::Result;
use crate::imageops::{save_png8, GrayImage};
use crate::metrics::MetricsReport;

const HEIGHT: usize = 240;
const MARGIN: usize = 20;
const BAR: usize = 24;
const GAP: usize = 12;

/// Renders one bar chart with standard-deviation whiskers. Values are clamped to [0, 1].
pub fn render_bars(values: &[(f64, f64)]) -> GrayImage {
    let width = 2 * MARGIN + values.len().max(1) * (BAR + GAP);
    let mut img = Array2::from_elem((HEIGHT, width), 1.0f32);
    let plot_h = HEIGHT - 2 * MARGIN;
    let y_of = |v: f64| -> usize {
        let v = v.clamp(0.0, 1.0);
        MARGIN + ((1.0 - v) * plot_h as f64).round() as usize
    };
    for level in [0.5, 1.0] {
        let y = y_of(level);
        for x in MARGIN..width - MARGIN {
            if x % 4 < 2 {
                img[[y, x]] = 0.7;
            }
        }
    }
    let base = y_of(0.0);
    for x in MARGIN..width - MARGIN {
        img[[base, x]] = 0.0;
    }
    for (i, &(mean, sd)) in values.iter().enumerate() {
        let x0 = MARGIN + GAP / 2 + i * (BAR + GAP);
        let top = y_of(mean);
        for y in top..base {
            for x in x0..x0 + BAR {
                img[[y, x]] = 0.45;
            }
        }
        let (lo, hi) = (y_of(mean + sd), y_of(mean - sd));
        let cx = x0 + BAR / 2;
        for y in lo..=hi {
            img[[y, cx]] = 0.0;
        }
        for x in cx - BAR / 4..=cx + BAR / 4 {
            img[[lo, x]] = 0.0;
            img[[hi, x]] = 0.0;
        }
    }
    img
}

/// Writes `auc_{class}.png` into `out` for every class present in any report.
pub fn write_auc_plots(reports: &[MetricsReport], out: &Path) -> Result<()> {
    let mut classes: Vec<&String> = reports.iter().flat_map(|r| r.auc_per_class.keys()).collect();
    classes.sort();
    classes.dedup();
    for class in classes {
        let values: Vec<(f64, f64)> = reports
            .iter()
            .map(|r| r.auc(class).map_or((0.0, 0.0), |m| (m.mean, m.sd)))
            .collect();
        save_png8(&render_bars(&values), &out.join(format!("auc_{class}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_heights_track_values() {
        let img = render_bars(&[(1.0, 0.0), (0.5, 0.1), (0.0, 0.0)]);
        let col = |i: usize| MARGIN + GAP / 2 + i * (BAR + GAP) + 1;
        let filled = |i: usize| (0..HEIGHT).filter(|&y| img[[y, col(i)]] == 0.45).count();
        assert!(filled(0) > filled(1));
        assert!(filled(1) > filled(2));
        assert_eq!(filled(2), 0);
    }
}

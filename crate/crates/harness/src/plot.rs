//! Self-contained SVG scatter of per-task AUC difference against event
//! prevalence (log x). Circles are in-distribution tasks, crosses are
//! held-out; fill encodes the query-conditioned model's AUC.

use anyhow::{ensure, Context, Result};
use eqlab::stats::TaskResult;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 56.0;

pub struct PlotScales {
    pub log_prev_min: f64,
    pub log_prev_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl PlotScales {
    pub fn from_rows(rows: &[&TaskResult]) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut dmin: f64 = -0.05;
        let mut dmax: f64 = 0.05;
        for r in rows {
            let lp = r.prevalence.max(1e-6).log10();
            lo = lo.min(lp);
            hi = hi.max(lp);
            if let Some(d) = r.delta() {
                dmin = dmin.min(d);
                dmax = dmax.max(d);
            }
        }
        PlotScales {
            log_prev_min: (lo - 0.15).floor_to_tenth(),
            log_prev_max: (hi + 0.15).ceil_to_tenth(),
            delta_min: dmin - 0.05,
            delta_max: dmax + 0.05,
        }
    }

    pub fn x(&self, prevalence: f64) -> f64 {
        let lp = prevalence.max(1e-6).log10();
        let t = (lp - self.log_prev_min) / (self.log_prev_max - self.log_prev_min);
        MARGIN_L + t * (W - MARGIN_L - MARGIN_R)
    }

    pub fn y(&self, delta: f64) -> f64 {
        let t = (delta - self.delta_min) / (self.delta_max - self.delta_min);
        H - MARGIN_B - t * (H - MARGIN_T - MARGIN_B)
    }
}

trait Round10 {
    fn floor_to_tenth(self) -> f64;
    fn ceil_to_tenth(self) -> f64;
}

impl Round10 for f64 {
    fn floor_to_tenth(self) -> f64 {
        (self * 10.0).floor() / 10.0
    }
    fn ceil_to_tenth(self) -> f64 {
        (self * 10.0).ceil() / 10.0
    }
}

fn auc_color(auc: Option<f64>) -> String {
    // Blue (0.5) to red (1.0); degenerate tasks are grey.
    match auc {
        None => "#999999".to_string(),
        Some(a) => {
            let t = ((a - 0.5) / 0.5).clamp(0.0, 1.0);
            let r = (40.0 + 200.0 * t) as u8;
            let b = (220.0 - 180.0 * t) as u8;
            format!("#{r:02x}50{b:02x}")
        }
    }
}

/// Marker coordinates equal the table values mapped through the scales;
/// degenerate tasks (no delta) are drawn on the zero line in grey.
pub fn emit_plots(rows: &[TaskResult], path: &Path) -> Result<()> {
    ensure!(!rows.is_empty(), "task table is empty");
    let refs: Vec<&TaskResult> = rows.iter().collect();
    let scales = PlotScales::from_rows(&refs);
    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Axes and decade grid.
    let y0 = scales.y(0.0);
    write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{y0:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" \
         stroke=\"#444\" stroke-dasharray=\"4 3\"/>\n",
        W - MARGIN_R
    )
    .unwrap();
    let mut decade = scales.log_prev_min.ceil() as i64;
    while (decade as f64) <= scales.log_prev_max {
        let x = scales.x(10f64.powi(decade as i32));
        write!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{MARGIN_T}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#ddd\"/>\n<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"12\" \
             text-anchor=\"middle\">1e{decade}</text>\n",
            H - MARGIN_B,
            H - MARGIN_B + 18.0
        )
        .unwrap();
        decade += 1;
    }
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let d = scales.delta_min + frac * (scales.delta_max - scales.delta_min);
        let y = scales.y(d);
        write!(
            svg,
            "<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"12\" text-anchor=\"end\">{d:.2}</text>\n",
            MARGIN_L - 8.0
        )
        .unwrap();
    }
    write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">\
         event prevalence (log)</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 14.0
    )
    .unwrap();
    write!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.2})\">AUC difference</text>\n",
        H / 2.0,
        H / 2.0
    )
    .unwrap();

    for r in rows {
        let x = scales.x(r.prevalence);
        let y = scales.y(r.delta().unwrap_or(0.0));
        let color = auc_color(r.auc_eq);
        if r.is_id {
            write!(
                svg,
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{color}\" \
                 stroke=\"#222\"><title>{}</title></circle>\n",
                r.name
            )
            .unwrap();
        } else {
            write!(
                svg,
                "<path d=\"M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}\" \
                 stroke=\"{color}\" stroke-width=\"2.5\"><title>{}</title></path>\n",
                x - 5.0,
                y - 5.0,
                x + 5.0,
                y + 5.0,
                x - 5.0,
                y + 5.0,
                x + 5.0,
                y - 5.0,
                r.name
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, is_id: bool, prev: f64, delta: f64) -> TaskResult {
        TaskResult {
            name: name.into(),
            is_id,
            prevalence: prev,
            auc_eq: Some(0.8),
            auc_ar: Some(0.8 - delta),
            n_pos: 5,
            n_neg: 50,
        }
    }

    #[test]
    fn marker_classes_match_row_flags() {
        let rows = vec![
            row("a", true, 0.3, 0.1),
            row("b", false, 0.01, 0.2),
            row("c", true, 0.002, 0.3),
        ];
        let dir = std::env::temp_dir().join("eqlab_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("plot.svg");
        emit_plots(&rows, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<path d=").count(), 1);
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn single_marker_at_its_coordinates() {
        let rows = vec![row("only", true, 0.05, 0.15)];
        let refs: Vec<&TaskResult> = rows.iter().collect();
        let scales = PlotScales::from_rows(&refs);
        let dir = std::env::temp_dir().join("eqlab_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("single.svg");
        emit_plots(&rows, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        let expect = format!("cx=\"{:.2}\" cy=\"{:.2}\"", scales.x(0.05), scales.y(0.15));
        assert!(svg.contains(&expect), "marker not at mapped coordinates");
    }

    #[test]
    fn rejects_empty_table() {
        let dir = std::env::temp_dir().join("eqlab_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        assert!(emit_plots(&[], &dir.join("empty.svg")).is_err());
    }

    #[test]
    fn log_axis_covers_prevalence_spectrum() {
        let rows = vec![row("lo", true, 0.002, 0.0), row("hi", true, 0.3, 0.0)];
        let refs: Vec<&TaskResult> = rows.iter().collect();
        let s = PlotScales::from_rows(&refs);
        assert!(s.log_prev_min <= (0.002f64).log10());
        assert!(s.log_prev_max >= (0.3f64).log10());
    }
}

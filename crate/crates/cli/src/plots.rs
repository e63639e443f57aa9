//! Log-log rate curves of a sweep report.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use dplc::evaluation::{MetricsRecord, SweepReport};

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a system font for labels; without one, plots carry no text.
fn font_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        let env = std::env::var("DPLC_PLOT_FONT").ok();
        for path in env.iter().map(String::as_str).chain(FONT_CANDIDATES) {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no font found for plot labels (set DPLC_PLOT_FONT to a .ttf file)");
        false
    })
}

pub struct Metric {
    pub file: &'static str,
    pub label: &'static str,
    pub value: fn(&MetricsRecord) -> f64,
}

pub const RATE_PLOTS: [Metric; 3] = [
    Metric {
        file: "mse.png",
        label: "MSE",
        value: |r| r.mse,
    },
    Metric {
        file: "rfid.png",
        label: "rFID surrogate",
        value: |r| r.rfid_surrogate,
    },
    Metric {
        file: "pv.png",
        label: "PV",
        value: |r| r.pv,
    },
];

/// Points with a positive rate and value, grouped by method.
pub fn log_series(report: &SweepReport, value: fn(&MetricsRecord) -> f64) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.records {
        let v = value(r);
        let e = out.entry(r.method.clone()).or_default();
        if r.rate_bpp > 0.0 && v > 0.0 {
            e.push((r.rate_bpp, v));
        }
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Writes one PNG per metric into `dir`. Zero rates and zero values have
/// no place on log axes and are left out. Returns the failures.
pub fn write_rate_plots(report: &SweepReport, dir: &Path) -> Vec<(&'static str, String)> {
    RATE_PLOTS
        .iter()
        .filter_map(|m| {
            rate_plot(&dir.join(m.file), m.label, &log_series(report, m.value))
                .err()
                .map(|e| (m.file, e))
        })
        .collect()
}

fn bounds(series: &BTreeMap<String, Vec<(f64, f64)>>, pick: fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let vals = series.values().flatten().map(pick);
    let (lo, hi) = vals.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.1, 1.0);
    }
    // pad by a fifth of a decade on each side
    (lo / 1.6, if hi > lo { hi * 1.6 } else { lo * 10.0 })
}

pub fn rate_plot(path: &Path, label: &str, series: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<(), String> {
    let text = font_available();
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let (x0, x1) = bounds(series, |p| p.0);
    let (y0, y1) = bounds(series, |p| p.1);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12).x_label_area_size(40).y_label_area_size(64);
    if text {
        builder.caption(format!("{label} vs rate"), ("sans-serif", 20));
    }
    let mut chart = builder
        .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
        .map_err(|e| err(&e))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("bpp").y_desc(label).label_style(("sans-serif", 13));
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| err(&e))?;
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?;
        if text {
            line.label(method.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font(("sans-serif", 13))
            .draw()
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))
}

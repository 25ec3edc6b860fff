//! SVG rendering of a trace with an optional fitted curve.
//!
//! Next to the SVG, `<out>.data.json` records exactly the series that were
//! drawn, so figures can be checked or replotted without parsing SVG.

use std::path::{Path, PathBuf};

use nvrelax::io::{read_trace, FitReport};
use nvrelax::Trace;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{load_fit, read_bytes, render_json, write_atomic, CliError, Result};

const CURVE_POINTS: usize = 200;
const SIZE: (u32, u32) = (800, 560);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Series {
    Points {
        name: String,
        tau_ms: Vec<f64>,
        signal: Vec<f64>,
        signal_err: Option<Vec<f64>>,
    },
    Curve {
        name: String,
        tau_ms: Vec<f64>,
        signal: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub x_scale: String,
    pub series: Vec<Series>,
}

/// `plot.svg` → `plot.data.json`.
pub fn data_path(out: &Path) -> PathBuf {
    out.with_extension("data.json")
}

/// Builds the series for a trace and optional fit. Rows with `tau <= 0`
/// cannot sit on a log axis and are left out.
pub fn build_series(trace: &Trace, fit: Option<&FitReport>) -> Result<PlotData> {
    let rows: Vec<_> = trace.rows().iter().filter(|r| r.tau_s > 0.0).collect();
    if rows.is_empty() {
        return Err(CliError::Invalid("trace has no rows with tau > 0 to plot".into()));
    }
    let tau_ms: Vec<f64> = rows.iter().map(|r| r.tau_s * 1e3).collect();
    let signal_err = rows
        .iter()
        .map(|r| r.signal_err)
        .collect::<Option<Vec<f64>>>();
    let mut series = vec![Series::Points {
        name: "signal".into(),
        tau_ms: tau_ms.clone(),
        signal: rows.iter().map(|r| r.signal).collect(),
        signal_err,
    }];
    if let Some(report) = fit {
        let params = report.fit.params();
        let (lo, hi) = (tau_ms[0].ln(), tau_ms[tau_ms.len() - 1].ln());
        let xs: Vec<f64> = (0..CURVE_POINTS)
            .map(|i| (lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64).exp())
            .collect();
        series.push(Series::Curve {
            name: format!("fit T1 = {:.4} ms", report.fit.t1_ms),
            signal: xs.iter().map(|&t| params.eval(t)).collect(),
            tau_ms: xs,
        });
    }
    Ok(PlotData {
        x_label: "tau (ms)".into(),
        y_label: "(SIG1 - SIG2) / (SIG1 + SIG2)".into(),
        x_scale: "log".into(),
        series,
    })
}

fn bounds(data: &PlotData) -> ((f64, f64), (f64, f64)) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    let mut grow = |tx: f64, ylo: f64, yhi: f64| {
        x = (x.0.min(tx), x.1.max(tx));
        y = (y.0.min(ylo), y.1.max(yhi));
    };
    for s in &data.series {
        match s {
            Series::Points {
                tau_ms,
                signal,
                signal_err,
                ..
            } => {
                for (i, (&t, &v)) in tau_ms.iter().zip(signal).enumerate() {
                    let e = signal_err.as_ref().map_or(0.0, |e| e[i]);
                    grow(t, v - e, v + e);
                }
            }
            Series::Curve { tau_ms, signal, .. } => {
                for (&t, &v) in tau_ms.iter().zip(signal) {
                    grow(t, v, v);
                }
            }
        }
    }
    let pad = 0.05 * (y.1 - y.0).max(1e-6);
    ((x.0 / 1.5, x.1 * 1.5), (y.0 - pad, y.1 + pad))
}

pub fn render_svg(data: &PlotData) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        draw(&root, data).map_err(|e| CliError::Invalid(format!("plot rendering failed: {e}")))?;
        root.present().map_err(|e| CliError::Invalid(format!("plot rendering failed: {e}")))?;
    }
    Ok(svg)
}

fn draw<DB: DrawingBackend>(
    root: &DrawingArea<DB, plotters::coord::Shift>,
    data: &PlotData,
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    root.fill(&WHITE)?;
    let ((x0, x1), (y0, y1)) = bounds(data);
    let mut chart = ChartBuilder::on(root)
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d((x0..x1).log_scale(), y0..y1)?;
    chart
        .configure_mesh()
        .x_desc(data.x_label.as_str())
        .y_desc(data.y_label.as_str())
        .draw()?;
    for s in &data.series {
        match s {
            Series::Points {
                tau_ms,
                signal,
                signal_err,
                ..
            } => {
                if let Some(err) = signal_err {
                    chart.draw_series(tau_ms.iter().zip(signal).zip(err).map(|((&t, &v), &e)| {
                        ErrorBar::new_vertical(t, v - e, v, v + e, BLACK.stroke_width(1), 6)
                    }))?;
                }
                chart.draw_series(
                    tau_ms
                        .iter()
                        .zip(signal)
                        .map(|(&t, &v)| Circle::new((t, v), 3, BLUE.filled())),
                )?;
            }
            Series::Curve { tau_ms, signal, .. } => {
                chart.draw_series(LineSeries::new(
                    tau_ms.iter().copied().zip(signal.iter().copied()),
                    RED.stroke_width(2),
                ))?;
            }
        }
    }
    Ok(())
}

/// Renders `input` (and the fit, if given) to `out` and writes the
/// companion data file.
pub fn plot(input: &Path, fit_path: Option<&Path>, out: &Path) -> Result<PlotData> {
    let bytes = read_bytes(input)?;
    let trace = read_trace(bytes.as_slice())?;
    if trace.is_empty() {
        return Err(CliError::Invalid(format!("{}: trace has no rows", input.display())));
    }
    let fit = fit_path.map(load_fit).transpose()?;
    let data = build_series(&trace, fit.as_ref())?;
    let svg = render_svg(&data)?;
    write_atomic(out, svg.as_bytes())?;
    write_atomic(&data_path(out), render_json(&data).as_bytes())?;
    Ok(data)
}

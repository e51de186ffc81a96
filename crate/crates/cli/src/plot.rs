use std::path::Path;

use dethub::engine::{AblationTable, EvalReport, MetricsRecord};
use dethub::{Error, Result};
use plotters::prelude::*;
use serde::Serialize;

const SIZE: (u32, u32) = (900, 560);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// What a plot command drew.
#[derive(Debug, Serialize)]
pub struct PlotSummary {
    pub output: String,
    pub kind: &'static str,
    pub series: usize,
    pub bars: usize,
    pub points: usize,
}

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::data(format!("plot: {e}"))
}

/// Total and component losses against step.
pub fn loss_curve(metrics: &[MetricsRecord], out: &Path) -> Result<PlotSummary> {
    if metrics.is_empty() {
        return Err(Error::data("loss-curve needs at least one metrics record"));
    }
    let series: [(&str, fn(&MetricsRecord) -> f64); 4] = [
        ("total", |r| r.loss_total),
        ("align", |r| r.loss_align),
        ("l1", |r| r.loss_l1),
        ("giou", |r| r.loss_giou),
    ];
    let max_step = metrics.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let max_loss = metrics
        .iter()
        .map(|r| r.loss_total)
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..max_step, 0f64..max_loss)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(draw_err)?;
    for (i, (name, get)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                metrics.iter().map(|r| (r.step as f64, get(r))),
                colour.stroke_width(2),
            ))
            .map_err(draw_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(PlotSummary {
        output: out.display().to_string(),
        kind: "loss-curve",
        series: series.len(),
        bars: 0,
        points: metrics.len() * series.len(),
    })
}

/// Grouped bars: `groups[g] = (label, values per series)`.
fn grouped_bars(
    title: &str,
    y_desc: &str,
    series_names: &[String],
    groups: &[(String, Vec<Option<f64>>)],
    out: &Path,
) -> Result<usize> {
    let n_series = series_names.len().max(1);
    let y_max = groups
        .iter()
        .flat_map(|(_, v)| v.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1.0)
        * 1.1;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let labels: Vec<String> = groups.iter().map(|(l, _)| l.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..groups.len() as f64, 0f64..y_max)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len().max(1) * 2 + 1)
        .x_label_formatter(&|x| {
            let centre = x - x.floor();
            if (centre - 0.5).abs() < 1e-6 {
                labels.get(x.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(draw_err)?;
    let width = 0.8 / n_series as f64;
    let mut bars = 0;
    for (s, name) in series_names.iter().enumerate() {
        let colour = PALETTE[s % PALETTE.len()];
        let rects: Vec<Rectangle<(f64, f64)>> = groups
            .iter()
            .enumerate()
            .filter_map(|(g, (_, vals))| {
                vals.get(s).copied().flatten().map(|v| {
                    let x0 = g as f64 + 0.1 + s as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width, v)], colour.filled())
                })
            })
            .collect();
        bars += rects.len();
        chart
            .draw_series(rects)
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], colour.filled()));
    }
    if series_names.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(bars)
}

/// One bar per ablation row: mean AP over the row's datasets. Failed rows get no bar.
pub fn ablation_bars(table: &AblationTable, out: &Path) -> Result<PlotSummary> {
    if table.rows.is_empty() {
        return Err(Error::data("ablation-bars needs a table with at least one row"));
    }
    let groups: Vec<(String, Vec<Option<f64>>)> = table
        .rows
        .iter()
        .map(|r| (format!("{} {}", r.table, r.row), vec![r.mean_ap]))
        .collect();
    let bars = grouped_bars("ablation", "mean AP", &["mean AP".to_string()], &groups, out)?;
    Ok(PlotSummary {
        output: out.display().to_string(),
        kind: "ablation-bars",
        series: 1,
        bars,
        points: 0,
    })
}

/// Grouped bars per dataset, one series per labelled report.
pub fn joint_vs_separate(reports: &[(String, EvalReport)], out: &Path) -> Result<PlotSummary> {
    if reports.is_empty() {
        return Err(Error::data("joint-vs-separate needs at least one report"));
    }
    let mut datasets: Vec<String> = Vec::new();
    for (_, r) in reports {
        for name in r.datasets.keys() {
            if !datasets.contains(name) {
                datasets.push(name.clone());
            }
        }
    }
    let groups: Vec<(String, Vec<Option<f64>>)> = datasets
        .iter()
        .map(|d| {
            (
                d.clone(),
                reports
                    .iter()
                    .map(|(_, r)| r.datasets.get(d).map(|x| x.ap * 100.0))
                    .collect(),
            )
        })
        .collect();
    let names: Vec<String> = reports.iter().map(|(l, _)| l.clone()).collect();
    let bars = grouped_bars("joint vs separate", "AP", &names, &groups, out)?;
    Ok(PlotSummary {
        output: out.display().to_string(),
        kind: "joint-vs-separate",
        series: names.len(),
        bars,
        points: 0,
    })
}

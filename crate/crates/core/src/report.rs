//! CSV and SVG renderings of a continual log.

use std::fmt::Write as _;

use crate::error::Result;
use crate::harness::{ContinualLog, SweepRow};
use crate::router::EvalMode;

/// Forgetting, performance and SPTO per mode and metric.
pub fn summary_csv(log: &ContinualLog) -> Result<String> {
    let mut out = String::from("mode,metric,average_forgetting_pct,average_performance,spto\n");
    for r in log.summary()? {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.mode.name(),
            r.metric,
            r.average_forgetting,
            r.average_performance,
            r.spto
        )
        .unwrap();
    }
    Ok(out)
}

/// Table-shaped sweep results: one row per (set sizes, dataset).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,n_image,n_depth,prototype_params,dataset,mae,rmse,imae,irmse\n");
    for r in rows {
        let (method, ni, nd) = match r.sizes {
            Some(s) => ("protodepth".to_string(), s.n_image.to_string(), s.n_depth.to_string()),
            None => ("pretrained".to_string(), String::new(), String::new()),
        };
        let m = &r.metrics;
        writeln!(
            out,
            "{method},{ni},{nd},{},{},{},{},{},{}",
            r.prototype_parameters, r.dataset, m.mae, m.rmse, m.imae, m.irmse
        )
        .unwrap();
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// MAE of each dataset across stages, one panel per evaluated mode.
pub fn trajectory_svg(log: &ContinualLog) -> String {
    let modes = log.modes();
    let t = log.datasets.len();
    let (pw, ph, margin) = (360.0, 240.0, 50.0);
    let width = margin + modes.len() as f64 * (pw + margin);
    let height = ph + 2.0 * margin + 20.0 * t as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    let mut max = 0f64;
    for &m in &modes {
        for row in log.matrix(m).unwrap() {
            for e in row.iter().flatten() {
                max = max.max(e.mae);
            }
        }
    }
    let max = if max > 0.0 { max * 1.1 } else { 1.0 };
    for (pi, &mode) in modes.iter().enumerate() {
        let x0 = margin + pi as f64 * (pw + margin);
        let y0 = margin;
        writeln!(s, r#"<text x="{x0}" y="{}">{} MAE ({})</text>"#, y0 - 10.0, mode_title(mode), log.units).unwrap();
        writeln!(
            s,
            r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        )
        .unwrap();
        let xs = |k: usize| x0 + if t > 1 { pw * k as f64 / (t - 1) as f64 } else { pw / 2.0 };
        let ys = |v: f64| y0 + ph - ph * v / max;
        for k in 0..t {
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, xs(k), y0 + ph + 15.0, k + 1).unwrap();
        }
        let m = log.matrix(mode).unwrap();
        for (j, row) in m.iter().enumerate() {
            let pts: Vec<String> = row
                .iter()
                .enumerate()
                .filter_map(|(k, e)| e.map(|e| format!("{:.2},{:.2}", xs(k), ys(e.mae))))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let color = PALETTE[j % PALETTE.len()];
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .unwrap();
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
            }
        }
    }
    for (j, name) in log.datasets.iter().enumerate() {
        let y = margin + ph + 40.0 + 20.0 * j as f64;
        let color = PALETTE[j % PALETTE.len()];
        writeln!(
            s,
            r#"<rect x="{margin}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{name}</text>"#,
            y - 10.0,
            margin + 18.0,
            y
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn mode_title(m: EvalMode) -> &'static str {
    match m {
        EvalMode::Incremental => "Incremental",
        EvalMode::Agnostic => "Agnostic",
    }
}

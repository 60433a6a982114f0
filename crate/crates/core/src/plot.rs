//! Static SVG charts from a metrics CSV written by
//! [`ExperimentOutcome::write_metrics_csv`](crate::harness::ExperimentOutcome::write_metrics_csv).

use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};

/// One parsed metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub selector: String,
    pub size: String,
    pub stats: [Option<f64>; 4],
    pub shares: Vec<(String, f64)>,
}

pub const STAT_NAMES: [&str; 4] = ["max", "mean", "median", "min"];

const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

pub fn read_metrics<R: Read>(reader: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("metrics CSV lacks column {name:?}")))
    };
    let selector = col("selector")?;
    let size = col("N")?;
    let stats: Vec<usize> = STAT_NAMES.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let shares: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("share_").map(|c| (i, c.to_string())))
        .collect();

    let num = |text: &str| -> Result<Option<f64>> {
        if text.is_empty() {
            Ok(None)
        } else {
            text.parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("bad number {text:?} in metrics CSV")))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut s = [None; 4];
        for (slot, &i) in s.iter_mut().zip(&stats) {
            *slot = num(&rec[i])?;
        }
        let mut sh = Vec::new();
        for (i, class) in &shares {
            if let Some(v) = num(&rec[*i])? {
                sh.push((class.clone(), v));
            }
        }
        out.push(MetricsRecord {
            selector: rec[selector].to_string(),
            size: rec[size].to_string(),
            stats: s,
            shares: sh,
        });
    }
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grouped bars of the four ΔU statistics per selector, pooled over sizes.
pub fn delta_u_chart(records: &[MetricsRecord]) -> String {
    let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.size == "all").collect();
    let (width, height, left, top, bottom) = (
        160.0 + 140.0 * rows.len().max(1) as f64,
        360.0,
        60.0,
        40.0,
        60.0,
    );
    let plot_h = height - top - bottom;
    let values = rows.iter().flat_map(|r| r.stats.iter().flatten().copied());
    let lo = values.clone().fold(0.0_f64, f64::min).min(-0.1);
    let hi = values.fold(0.0_f64, f64::max).max(0.1);
    let y = |v: f64| top + (hi - v) / (hi - lo) * plot_h;

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Normalized performance difference</text>"#, width / 2.0).unwrap();
    for t in ticks(lo, hi) {
        let (right, yt, lx) = (width - 20.0, y(t), left - 6.0);
        writeln!(
            svg,
            r##"<line x1="{left}" x2="{right}" y1="{yt:.2}" y2="{yt:.2}" stroke="#ddd"/><text x="{lx}" y="{:.2}" text-anchor="end">{t:.2}</text>"##,
            yt + 4.0
        )
        .unwrap();
    }
    let (right, y0) = (width - 20.0, y(0.0));
    writeln!(
        svg,
        r#"<line x1="{left}" x2="{right}" y1="{y0:.2}" y2="{y0:.2}" stroke="black"/>"#
    )
    .unwrap();
    let bar = 24.0;
    for (gi, r) in rows.iter().enumerate() {
        let x0 = left + 20.0 + gi as f64 * 140.0;
        for (si, v) in r.stats.iter().enumerate() {
            let Some(v) = *v else { continue };
            let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
            writeln!(svg, r#"<rect x="{:.2}" y="{y0:.2}" width="{bar}" height="{:.2}" fill="{}"><title>{} {}: {v}</title></rect>"#, x0 + si as f64 * bar, (y1 - y0).max(0.5), PALETTE[si], escape(&r.selector), STAT_NAMES[si]).unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + 2.0 * bar,
            height - bottom + 20.0,
            escape(&r.selector)
        )
        .unwrap();
    }
    legend(&mut svg, &STAT_NAMES, width - 120.0, top);
    svg.push_str("</svg>\n");
    svg
}

/// Stacked horizontal bars of winner shares per batch size for `selector`.
pub fn selection_chart(records: &[MetricsRecord], selector: &str) -> String {
    let rows: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.selector == selector && r.size != "all")
        .collect();
    let mut classes: Vec<&str> = Vec::new();
    for r in &rows {
        for (c, _) in &r.shares {
            if !classes.contains(&c.as_str()) {
                classes.push(c);
            }
        }
    }
    let (left, top, bar_h, plot_w) = (60.0, 40.0, 22.0, 400.0);
    let height = top + rows.len() as f64 * (bar_h + 8.0) + 50.0;
    let width = left + plot_w + 160.0;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Selection rate: {}</text>"#,
        left + plot_w / 2.0,
        escape(selector)
    )
    .unwrap();
    for (ri, r) in rows.iter().enumerate() {
        let yr = top + ri as f64 * (bar_h + 8.0);
        writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">N={}</text>"#,
            left - 6.0,
            yr + bar_h * 0.7,
            escape(&r.size)
        )
        .unwrap();
        let mut x = left;
        for (ci, class) in classes.iter().enumerate() {
            let share = r
                .shares
                .iter()
                .find(|(c, _)| c == class)
                .map_or(0.0, |(_, v)| *v);
            if share > 0.0 {
                let w = share * plot_w;
                writeln!(svg, r#"<rect x="{x:.2}" y="{yr:.2}" width="{w:.2}" height="{bar_h}" fill="{}"><title>{}: {share}</title></rect>"#, PALETTE[ci % PALETTE.len()], escape(class)).unwrap();
                x += w;
            }
        }
    }
    let axis_y = top + rows.len() as f64 * (bar_h + 8.0);
    for i in 0..=4 {
        let x = left + plot_w * i as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            axis_y + 14.0,
            i as f64 / 4.0
        )
        .unwrap();
    }
    legend(&mut svg, &classes, left + plot_w + 20.0, top);
    svg.push_str("</svg>\n");
    svg
}

fn legend(svg: &mut String, labels: &[&str], x: f64, y: f64) {
    for (i, label) in labels.iter().enumerate() {
        let yi = y + i as f64 * 18.0;
        writeln!(svg, r#"<rect x="{x}" y="{yi}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#, PALETTE[i % PALETTE.len()], x + 18.0, yi + 10.0, escape(label)).unwrap();
    }
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = ((hi - lo) / 5.0 * 10.0).ceil() / 10.0;
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

/// Selectors present in `records`, in first-seen order.
pub fn selectors(records: &[MetricsRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.selector) {
            out.push(r.selector.clone());
        }
    }
    out
}

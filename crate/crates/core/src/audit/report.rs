//! CSV tables and SVG bar charts for an [`AuditReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{format_percent, percent_f64, AuditReport};
use crate::corpus::{Gender, Region};
use crate::error::Result;

/// Writes `accuracy.csv` (rows variant × region, columns backend × gender)
/// and `disparity.csv` (rows variant × region, one column per backend).
/// Only region-level groups are tabulated. Returns the written paths.
pub fn write_tables(report: &AuditReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let backends: Vec<&str> = report.backends.iter().map(|b| b.name.as_str()).collect();
    let rows: BTreeSet<(String, Region)> = report
        .groups
        .iter()
        .filter(|g| g.key.country.is_none())
        .map(|g| (g.key.variant.clone(), g.key.region))
        .collect();

    let acc_path = dir.join("accuracy.csv");
    let mut w = csv::Writer::from_path(&acc_path)?;
    let mut header = vec!["variant".to_owned(), "region".to_owned()];
    for b in &backends {
        for g in Gender::ALL {
            header.push(format!("{b}_{}", g.short()));
        }
    }
    w.write_record(&header)?;
    for (variant, region) in &rows {
        let mut rec = vec![variant.clone(), region.short().to_owned()];
        for b in &backends {
            for g in Gender::ALL {
                let cell = report
                    .groups
                    .iter()
                    .find(|e| {
                        e.key.backend == *b
                            && e.key.variant == *variant
                            && e.key.region == *region
                            && e.key.country.is_none()
                            && e.key.gender == g
                    })
                    .map(|e| format_percent(e.metrics.accuracy))
                    .unwrap_or_default();
                rec.push(cell);
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let disp_path = dir.join("disparity.csv");
    let mut w = csv::Writer::from_path(&disp_path)?;
    let mut header = vec!["variant".to_owned(), "region".to_owned()];
    header.extend(backends.iter().map(|b| b.to_string()));
    w.write_record(&header)?;
    for (variant, region) in &rows {
        let mut rec = vec![variant.clone(), region.short().to_owned()];
        for b in &backends {
            let cell = report
                .disparities
                .iter()
                .find(|d| d.backend == *b && d.variant == *variant && d.region == *region && d.country.is_none())
                .map(|d| format_percent(d.disparity))
                .unwrap_or_default();
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(vec![acc_path, disp_path])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart of region-level accuracies: one panel per backend, one
/// bar cluster per variant × region, male and female bars side by side.
pub fn render_bar_chart(report: &AuditReport) -> String {
    const BAR: f64 = 14.0;
    const GAP: f64 = 18.0;
    const PLOT_H: f64 = 160.0;
    const LEFT: f64 = 40.0;
    let colors = [(Gender::Male, "#4a86d4"), (Gender::Female, "#d4694a")];

    let mut panels: BTreeMap<&str, BTreeMap<(String, Region), BTreeMap<Gender, f64>>> = BTreeMap::new();
    for g in report.groups.iter().filter(|g| g.key.country.is_none()) {
        panels
            .entry(g.key.backend.as_str())
            .or_default()
            .entry((g.key.variant.clone(), g.key.region))
            .or_default()
            .insert(g.key.gender, percent_f64(g.metrics.accuracy));
    }
    let clusters = panels.values().map(BTreeMap::len).max().unwrap_or(0) as f64;
    let width = LEFT + clusters * (2.0 * BAR + GAP) + 20.0;
    let panel_h = PLOT_H + 60.0;
    let height = panel_h * panels.len().max(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="9">"#);
    for (pi, (backend, cells)) in panels.iter().enumerate() {
        let top = pi as f64 * panel_h + 20.0;
        let base = top + PLOT_H;
        let _ = writeln!(svg, r#"<text x="{LEFT}" y="{}" font-size="12">{}</text>"#, top - 6.0, escape(backend));
        for tick in [0, 50, 100] {
            let y = base - PLOT_H * tick as f64 / 100.0;
            let _ = writeln!(svg, r##"<line x1="{LEFT}" x2="{}" y1="{y}" y2="{y}" stroke="#ccc"/>"##, width - 10.0);
            let _ = writeln!(svg, r#"<text x="4" y="{}">{tick}</text>"#, y + 3.0);
        }
        for (ci, ((variant, region), bars)) in cells.iter().enumerate() {
            let x0 = LEFT + 6.0 + ci as f64 * (2.0 * BAR + GAP);
            for (bi, (gender, color)) in colors.iter().enumerate() {
                if let Some(acc) = bars.get(gender) {
                    let h = PLOT_H * acc / 100.0;
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{}" y="{}" width="{BAR}" height="{h}" fill="{color}"><title>{} {} {} {:.2}</title></rect>"#,
                        x0 + bi as f64 * BAR,
                        base - h,
                        escape(variant),
                        region.short(),
                        gender.short(),
                        acc
                    );
                }
            }
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x0 + BAR,
                base + 12.0,
                escape(variant),
                x0 + BAR,
                base + 23.0,
                region.short()
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

//! Deterministic SVG line charts of score against training epochs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::results::{aggregate, CellKey, ResultRow, SPLIT_TEST};
use crate::error::{BatError, Result};
use crate::task::Task;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#222222", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

/// One plotted line: `(epochs, mean score)` points in epoch order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub metric: String,
    pub series: Vec<Series>,
}

fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Ae => "f1",
        Task::Asc => "accuracy",
    }
}

fn series_by<F>(rows: &[ResultRow], metric: &str, keep: F, label: impl Fn(&CellKey) -> String) -> Vec<Series>
where
    F: Fn(&CellKey) -> bool,
{
    let mut lines: BTreeMap<u64, Series> = BTreeMap::new();
    for cell in aggregate(rows, SPLIT_TEST, metric) {
        if !keep(&cell.key) {
            continue;
        }
        let name = label(&cell.key);
        // order lines by the varying value
        let order = if name.starts_with("dropout") {
            cell.key.dropout().to_bits()
        } else {
            cell.key.epsilon().to_bits()
        };
        lines
            .entry(order)
            .or_insert_with(|| Series {
                label: name,
                points: Vec::new(),
            })
            .points
            .push((cell.key.epochs, cell.mean()));
    }
    lines.into_values().collect()
}

fn epsilon_label(eps: f64) -> String {
    if eps == 0.0 {
        "baseline".into()
    } else {
        format!("eps={eps}")
    }
}

/// Charts for one `(dataset, task)`: one line per epsilon at `dropout`,
/// and one line per dropout for the baseline when several dropouts exist.
pub fn charts(rows: &[ResultRow], dropout: f64) -> Vec<Chart> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let metric = primary_metric(first.task);
    let prefix = format!("{} {}", first.dataset, first.task);
    let mut dropouts: Vec<f64> = rows.iter().map(|r| r.dropout).collect();
    dropouts.sort_by(f64::total_cmp);
    dropouts.dedup();
    let at = if dropouts.contains(&dropout) { dropout } else { dropouts[0] };
    let mut out = vec![Chart {
        title: format!("{prefix}: {metric} by epsilon (dropout {at})"),
        metric: metric.into(),
        series: series_by(rows, metric, |k| k.dropout() == at, |k| epsilon_label(k.epsilon())),
    }];
    if dropouts.len() > 1 {
        out.push(Chart {
            title: format!("{prefix}: {metric} by dropout (baseline)"),
            metric: metric.into(),
            series: series_by(rows, metric, |k| k.epsilon() == 0.0, |k| format!("dropout={}", k.dropout())),
        });
    }
    out.retain(|c| !c.series.is_empty());
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let points = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1) = (usize::MAX, 0);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(e, v) in points {
            x0 = x0.min(e);
            x1 = x1.max(e);
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
        if x0 == x1 {
            x1 = x0 + 1;
        }
        if !(y1 > y0) {
            y0 -= 0.01;
            y1 += 0.01;
        }
        let pw = WIDTH - 2.0 * MARGIN;
        let ph = HEIGHT - 2.0 * MARGIN;
        let px = |e: usize| MARGIN + pw * (e - x0) as f64 / (x1 - x0) as f64;
        let py = |v: f64| HEIGHT - MARGIN - ph * (v - y0) / (y1 - y0);

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-metric="{}">"#,
            escape(&self.metric)
        )
        .unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        )
        .unwrap();
        let (bx, by) = (MARGIN, HEIGHT - MARGIN);
        writeln!(
            s,
            r#"<path d="M{bx} {MARGIN} V{by} H{}" stroke="black" fill="none"/>"#,
            WIDTH - MARGIN
        )
        .unwrap();
        for e in x0..=x1 {
            writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{e}</text>"#,
                px(e),
                by + 16.0
            )
            .unwrap();
        }
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.2}</text>"#,
                bx - 6.0,
                py(v) + 4.0,
                100.0 * v
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">epochs</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0
        )
        .unwrap();
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let label = escape(&series.label);
            writeln!(s, r#"<g data-series="{label}" stroke="{color}" fill="{color}">"#).unwrap();
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(e, v)| format!("{:.1},{:.1}", px(e), py(v)))
                .collect();
            writeln!(s, r#"<polyline points="{}" fill="none"/>"#, path.join(" ")).unwrap();
            for &(e, v) in &series.points {
                writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" data-epochs="{e}" data-value="{v}"/>"#,
                    px(e),
                    py(v)
                )
                .unwrap();
            }
            writeln!(
                s,
                r#"<text x="{}" y="{}" stroke="none" font-family="sans-serif" font-size="11">{label}</text>"#,
                WIDTH - MARGIN + 4.0,
                MARGIN + 14.0 * i as f64
            )
            .unwrap();
            writeln!(s, "</g>").unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One file per chart, named `{dataset}-{task}-{epsilon|dropout}.svg`.
pub fn emit_plots(rows: &[ResultRow], dropout: f64) -> Result<Vec<(String, String)>> {
    if rows.is_empty() {
        return Err(BatError::usage("no results to plot"));
    }
    let mut groups: BTreeMap<(String, &'static str), Vec<ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.dataset.clone(), r.task.as_str()))
            .or_default()
            .push(r.clone());
    }
    let mut out = Vec::new();
    for ((dataset, task), group) in groups {
        for (i, chart) in charts(&group, dropout).into_iter().enumerate() {
            let kind = if i == 0 { "epsilon" } else { "dropout" };
            out.push((format!("{dataset}-{task}-{kind}.svg"), chart.to_svg()));
        }
    }
    if out.is_empty() {
        return Err(BatError::usage("results hold no test scores to plot"));
    }
    Ok(out)
}

/// Reads the plotted series back from an SVG written by [`Chart::to_svg`].
pub fn read_svg_series(svg: &str) -> Result<Vec<Series>> {
    let doc = roxmltree::Document::parse(svg).map_err(|e| BatError::data(format!("bad svg: {e}")))?;
    let mut out = Vec::new();
    for g in doc.descendants().filter(|n| n.has_tag_name("g")) {
        let Some(label) = g.attribute("data-series") else {
            continue;
        };
        let mut points = Vec::new();
        for c in g.children().filter(|n| n.has_tag_name("circle")) {
            let get = |k: &str| {
                c.attribute(k)
                    .ok_or_else(|| BatError::data(format!("circle without {k}")))
            };
            let e = get("data-epochs")?.parse().map_err(|_| BatError::data("bad epochs"))?;
            let v = get("data-value")?.parse().map_err(|_| BatError::data("bad value"))?;
            points.push((e, v));
        }
        out.push(Series {
            label: label.to_string(),
            points,
        });
    }
    Ok(out)
}

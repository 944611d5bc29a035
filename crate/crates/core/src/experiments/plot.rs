//! SVG line and bar charts drawn from the pipelines' CSV files. A chart
//! shows nothing that is not in its CSV.
//!
//! * `curve`: the first column is x; every other numeric column except
//!   `seed` is a series; rows sharing an x value are averaged.
//! * `bars`: needs `method`, `fraction` and `miou` columns; one group per
//!   fraction, one bar per method, height = mean mIoU over rows.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::format_g6;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;
const TICKS: usize = 5;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Curve,
    Bars,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve" => Ok(PlotKind::Curve),
            "bars" => Ok(PlotKind::Bars),
            _ => Err(Error::Config(format!("unknown plot kind {s:?}; expected curve or bars"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Format(format!("plot schema: {}", msg.into()))
}

fn read_table(text: &str) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    if header.iter().all(String::is_empty) || rows.is_empty() {
        return Err(schema("csv has no data rows"));
    }
    Ok(Table { header, rows })
}

fn number(v: &str, col: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| schema(format!("column {col}: {v:?} is not a number")))
}

/// Series of a `curve` CSV, x ascending.
pub fn curve_series(text: &str) -> Result<(String, Vec<Series>)> {
    let t = read_table(text)?;
    let cols: Vec<usize> = (1..t.header.len()).filter(|&c| t.header[c] != "seed").collect();
    if cols.is_empty() {
        return Err(schema("curve needs an x column and at least one series column"));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<Vec<(f64, usize)>> = vec![Vec::new(); cols.len()];
    for row in &t.rows {
        let x = number(&row[0], &t.header[0])?;
        let i = match xs.iter().position(|&v| v == x) {
            Some(i) => i,
            None => {
                xs.push(x);
                sums.iter_mut().for_each(|s| s.push((0.0, 0)));
                xs.len() - 1
            }
        };
        for (k, &c) in cols.iter().enumerate() {
            let v = number(&row[c], &t.header[c])?;
            sums[k][i].0 += v;
            sums[k][i].1 += 1;
        }
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let series = cols
        .iter()
        .zip(&sums)
        .map(|(&c, s)| Series {
            name: t.header[c].clone(),
            points: order.iter().map(|&i| (xs[i], s[i].0 / s[i].1 as f64)).collect(),
        })
        .collect();
    Ok((t.header[0].clone(), series))
}

/// Groups (fractions), methods and mean mIoU `values[method][group]` of a
/// `bars` CSV, both in order of first appearance.
pub fn bar_groups(text: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let t = read_table(text)?;
    let col = |name: &str| {
        t.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(format!("bars needs a {name} column")))
    };
    let (mc, fc, vc) = (col("method")?, col("fraction")?, col("miou")?);
    let (mut groups, mut methods) = (Vec::<String>::new(), Vec::<String>::new());
    for row in &t.rows {
        if !groups.contains(&row[fc]) {
            groups.push(row[fc].clone());
        }
        if !methods.contains(&row[mc]) {
            methods.push(row[mc].clone());
        }
    }
    let mut acc = vec![vec![(0.0, 0usize); groups.len()]; methods.len()];
    for row in &t.rows {
        let m = methods.iter().position(|m| *m == row[mc]).expect("method seen");
        let g = groups.iter().position(|g| *g == row[fc]).expect("group seen");
        acc[m][g].0 += number(&row[vc], "miou")?;
        acc[m][g].1 += 1;
    }
    let values = acc
        .into_iter()
        .map(|r| r.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect())
        .collect();
    Ok((groups, methods, values))
}

fn frame(out: &mut String, y_lo: f64, y_hi: f64, y_label: &str, x_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=TICKS {
        let v = y_lo + (y_hi - y_lo) * i as f64 / TICKS as f64;
        let y = y_pos(v, y_lo, y_hi);
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0,
            format_g6(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

fn y_pos(v: f64, lo: f64, hi: f64) -> f64 {
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    y0 - (v - lo) / (hi - lo) * (y0 - y1)
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_curve(text: &str) -> Result<String> {
    let (x_name, series) = curve_series(text)?;
    let xs: Vec<f64> = series[0].points.iter().map(|p| p.0).collect();
    let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1]);
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let x_pos = |x: f64| LEFT + (x - x_lo) / x_span * (WIDTH - RIGHT - LEFT);
    let (lo, hi) = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    frame(&mut out, lo, hi, "value", &x_name);
    for i in 0..=TICKS {
        let v = x_lo + x_span * i as f64 / TICKS as f64;
        let x = x_pos(v);
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 14.0,
            format_g6(v)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", x_pos(x), y_pos(y, lo, hi)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut out, &series.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_bars(text: &str) -> Result<String> {
    let (groups, methods, values) = bar_groups(text)?;
    let (lo, hi) = y_range(values.iter().flatten().copied());
    let mut out = String::new();
    frame(&mut out, lo, hi, "mIoU", "fraction");
    let group_w = (WIDTH - RIGHT - LEFT) / groups.len() as f64;
    let bar_w = group_w * 0.8 / methods.len() as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + group_w * g as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            HEIGHT - BOTTOM + 14.0,
            escape(name)
        );
        for (m, vals) in values.iter().enumerate() {
            let v = vals[g];
            if !v.is_finite() {
                continue;
            }
            let (top, base) = (y_pos(v, lo, hi), y_pos(lo.max(0.0), lo, hi));
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                gx + group_w * 0.1 + bar_w * m as f64,
                top.min(base),
                (base - top).abs(),
                PALETTE[m % PALETTE.len()]
            );
        }
    }
    legend(&mut out, &methods);
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render(text: &str, kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::Curve => render_curve(text),
        PlotKind::Bars => render_bars(text),
    }
}

/// Reads `csv`, renders it as `kind` and writes the SVG to `out`.
pub fn plot_csv(csv: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    if !csv.exists() {
        return Err(Error::MissingPrerequisite(format!("csv {} not found", csv.display())));
    }
    let svg = render(&std::fs::read_to_string(csv)?, kind)?;
    std::fs::write(out, svg)?;
    Ok(())
}

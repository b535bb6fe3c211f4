//! Deterministic SVG rendering of line plots and heatmaps from CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    /// `values[row][col]`, row 0 drawn at the bottom; NaN cells are blank.
    pub values: Vec<Vec<f64>>,
    pub log_scale: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Roughly five round tick values covering `[lo, hi]`.
fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (LEFT + WIDTH - RIGHT) / 2.0,
        esc(title)
    );
}

fn axis_labels(out: &mut String, x_label: &str, y_label: &str) {
    let cx = (LEFT + WIDTH - RIGHT) / 2.0;
    let cy = (TOP + HEIGHT - BOTTOM) / 2.0;
    let _ = writeln!(out, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", HEIGHT - 12.0, esc(x_label));
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{cy:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy:.1})\">{}</text>",
        esc(y_label)
    );
}

impl LinePlot {
    pub fn render(&self) -> String {
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let ty = |y: f64| if self.log_y { y.max(1e-12).log10() } else { y };
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(ty(y));
            y1 = y1.max(ty(y));
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (ty(y) - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        svg_open(&mut out, &self.title);
        let _ = writeln!(
            out,
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
        );
        for t in nice_ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                out,
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                fmt_tick(t)
            );
        }
        for t in nice_ticks(y0, y1) {
            let y = TOP + ph - (t - y0) / (y1 - y0) * ph;
            let label = if self.log_y { fmt_tick(10f64.powf(t)) } else { fmt_tick(t) };
            let _ = writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label}</text>",
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
                path.join(" ")
            );
            let ly = TOP + 10.0 + 16.0 * i as f64;
            let lx = WIDTH - RIGHT + 10.0;
            let _ = writeln!(
                out,
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{:.1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                lx + 20.0,
                lx + 25.0,
                ly + 4.0,
                esc(&s.label)
            );
        }
        axis_labels(&mut out, &self.x_label, &self.y_label);
        out.push_str("</svg>\n");
        out
    }
}

fn color_ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

impl Heatmap {
    pub fn render(&self) -> String {
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let nx = self.x_ticks.len().max(1);
        let ny = self.y_ticks.len().max(1);
        let (cw, ch) = (pw / nx as f64, ph / ny as f64);
        let tv = |v: f64| if self.log_scale { v.max(1e-12).log10() } else { v };
        let finite = self.values.iter().flatten().filter(|v| v.is_finite()).map(|&v| tv(v));
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in finite {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };

        let mut out = String::new();
        svg_open(&mut out, &self.title);
        for (r, row) in self.values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let x = LEFT + c as f64 * cw;
                let y = TOP + ph - (r + 1) as f64 * ch;
                let _ = writeln!(
                    out,
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" fill=\"{}\"><title>{}</title></rect>",
                    color_ramp((tv(v) - lo) / span),
                    fmt_tick(v)
                );
            }
        }
        let _ = writeln!(
            out,
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
        );
        for (i, t) in self.x_ticks.iter().enumerate() {
            let x = LEFT + (i as f64 + 0.5) * cw;
            let _ = writeln!(out, "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", TOP + ph + 18.0, esc(t));
        }
        for (i, t) in self.y_ticks.iter().enumerate() {
            let y = TOP + ph - (i as f64 + 0.5) * ch;
            let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", LEFT - 8.0, y + 4.0, esc(t));
        }
        // Colour bar.
        let bx = WIDTH - RIGHT + 20.0;
        for i in 0..50 {
            let y = TOP + ph - (i + 1) as f64 * ph / 50.0;
            let _ = writeln!(
                out,
                "<rect x=\"{bx}\" y=\"{y:.2}\" width=\"16\" height=\"{:.2}\" fill=\"{}\"/>",
                ph / 50.0 + 0.5,
                color_ramp((i as f64 + 0.5) / 50.0)
            );
        }
        let label = |v: f64| if self.log_scale { fmt_tick(10f64.powf(v)) } else { fmt_tick(v) };
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", bx + 22.0, TOP + ph, label(lo));
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", bx + 22.0, TOP + 10.0, label(hi));
        axis_labels(&mut out, &self.x_label, &self.y_label);
        out.push_str("</svg>\n");
        out
    }
}

/// Header and rows of a CSV file; errors name the file when it has no rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file_err = |message: String| Error::File { path: path.display().to_string(), message };
    let mut r = csv::Reader::from_path(path).map_err(|e| file_err(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| file_err(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(|e| file_err(e.to_string()))?;
    if header.is_empty() || rows.is_empty() {
        return Err(file_err("no data rows to plot".into()));
    }
    Ok((header, rows))
}

fn column(path: &Path, header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::File {
        path: path.display().to_string(),
        message: format!("missing column {name:?}"),
    })
}

fn parse_num(path: &Path, s: &str) -> Result<f64> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse().map_err(|_| Error::File { path: path.display().to_string(), message: format!("non-numeric value {s:?}") })
}

fn cell_matches(cell: &str, want: &str) -> bool {
    match (cell.parse::<f64>(), want.parse::<f64>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => cell == want,
    }
}

/// Options for [`line_plot_from_csv`].
#[derive(Clone, Debug, Default)]
pub struct LineSpec<'a> {
    pub x: &'a str,
    pub y: &'a str,
    /// Columns whose joint value names a series.
    pub group_by: &'a [&'a str],
    /// Rows are kept only when every listed column equals the given value,
    /// numerically when both sides parse as numbers ("175" matches "175.0").
    pub filter: &'a [(&'a str, &'a str)],
    pub title: &'a str,
    pub log_y: bool,
}

/// One series per distinct `group_by` value; points sorted by x. Series are
/// ordered by first appearance in the file.
pub fn line_plot_from_csv(path: &Path, spec: &LineSpec) -> Result<LinePlot> {
    let (header, rows) = read_table(path)?;
    let xi = column(path, &header, spec.x)?;
    let yi = column(path, &header, spec.y)?;
    let gi: Vec<usize> = spec.group_by.iter().map(|g| column(path, &header, g)).collect::<Result<_>>()?;
    let fi: Vec<(usize, &str)> =
        spec.filter.iter().map(|(c, v)| Ok((column(path, &header, c)?, *v))).collect::<Result<_>>()?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows.iter().filter(|r| fi.iter().all(|(i, v)| cell_matches(&r[*i], v))) {
        let label = gi
            .iter()
            .zip(spec.group_by)
            .map(|(&i, name)| format!("{name}={}", row[i]))
            .collect::<Vec<_>>()
            .join(", ");
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        groups.entry(label).or_default().push((parse_num(path, &row[xi])?, parse_num(path, &row[yi])?));
    }
    if order.is_empty() {
        return Err(Error::File { path: path.display().to_string(), message: "no rows match the plot filter".into() });
    }
    let series = order
        .into_iter()
        .map(|label| {
            let mut points = groups.remove(&label).unwrap();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: if label.is_empty() { spec.y.to_string() } else { label }, points, dashed: false }
        })
        .collect();
    Ok(LinePlot {
        title: spec.title.to_string(),
        x_label: spec.x.to_string(),
        y_label: spec.y.to_string(),
        log_y: spec.log_y,
        series,
    })
}

/// Heatmap of the mean of `value` over rows sharing `(x, y)`. Tick labels
/// are the distinct column values, sorted numerically when they all parse.
pub fn heatmap_from_csv(path: &Path, x: &str, y: &str, value: &str, title: &str, log_scale: bool) -> Result<Heatmap> {
    let (header, rows) = read_table(path)?;
    let (xi, yi, vi) = (column(path, &header, x)?, column(path, &header, y)?, column(path, &header, value)?);
    let ticks = |i: usize| -> Vec<String> {
        let mut t: Vec<String> = Vec::new();
        for r in &rows {
            if !t.contains(&r[i]) {
                t.push(r[i].clone());
            }
        }
        let nums: Option<Vec<f64>> = t.iter().map(|s| parse_num(path, s).ok()).collect();
        if let Some(nums) = nums {
            let mut paired: Vec<(f64, String)> = nums.into_iter().zip(t).collect();
            paired.sort_by(|a, b| a.0.total_cmp(&b.0));
            paired.into_iter().map(|p| p.1).collect()
        } else {
            t
        }
    };
    let (xt, yt) = (ticks(xi), ticks(yi));
    let mut sums = vec![vec![(0.0, 0usize); xt.len()]; yt.len()];
    for r in &rows {
        let c = xt.iter().position(|t| *t == r[xi]).unwrap();
        let rr = yt.iter().position(|t| *t == r[yi]).unwrap();
        let cell = &mut sums[rr][c];
        cell.0 += parse_num(path, &r[vi])?;
        cell.1 += 1;
    }
    let values = sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect())
        .collect();
    Ok(Heatmap {
        title: title.to_string(),
        x_label: x.to_string(),
        y_label: y.to_string(),
        x_ticks: xt,
        y_ticks: yt,
        values,
        log_scale,
    })
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

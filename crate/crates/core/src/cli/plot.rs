//! Deterministic two-panel SVG: mean return on a signed-log scale with a
//! standard-error band, and mistake rate on a log scale. Input is the
//! aggregate summary CSV. No plotting library, so identical input bytes give
//! identical output bytes.

use std::fmt::Write as _;

use crate::harness::symlog;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlotError {
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("{path} line {line}: {problem}")]
    BadCsv {
        path: String,
        line: usize,
        problem: String,
    },
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub episodes: Vec<f64>,
    pub return_mean: Vec<f64>,
    pub return_se: Vec<f64>,
    pub mistake_rate: Vec<f64>,
}

/// Parses one aggregate CSV (header `episode,n,return_mean,return_se,
/// mistake_rate_mean,mistake_rate_se`).
pub fn parse_summary_csv(path: &str, text: &str) -> Result<Series, PlotError> {
    let err = |line: usize, problem: String| PlotError::BadCsv {
        path: path.to_string(),
        line,
        problem,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.starts_with("episode,n,return_mean,return_se") => {}
        Some((_, header)) => {
            return Err(err(1, format!("unexpected header `{header}`")));
        }
        None => {
            return Err(PlotError::Empty {
                path: path.to_string(),
            })
        }
    }
    let stem = std::path::Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string());
    let mut series = Series {
        name: stem,
        episodes: Vec::new(),
        return_mean: Vec::new(),
        return_se: Vec::new(),
        mistake_rate: Vec::new(),
    };
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(err(idx + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, PlotError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| err(idx + 1, format!("field {}: {e}", i + 1)))
        };
        series.episodes.push(num(0)?);
        series.return_mean.push(num(2)?);
        series.return_se.push(num(3)?);
        series.mistake_rate.push(num(4)?);
    }
    if series.episodes.is_empty() {
        return Err(PlotError::Empty {
            path: path.to_string(),
        });
    }
    Ok(series)
}

const PALETTE: &[&str] = &[
    "#c0392b", "#2471a3", "#1e8449", "#7d3c98", "#b9770e", "#17a589", "#839192",
];

/// Rates of exactly zero still need a place on a log axis.
const RATE_FLOOR: f64 = 1e-6;

struct Panel {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Panel {
    fn sx(&self, t: f64, lo: f64, hi: f64) -> f64 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        self.x0 + (t - lo) / span * (self.x1 - self.x0)
    }

    fn sy(&self, t: f64, lo: f64, hi: f64) -> f64 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        // SVG y grows downward.
        self.y1 - (t - lo) / span * (self.y1 - self.y0)
    }
}

fn c(v: f64) -> String {
    format!("{v:.2}")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

/// Inverse of symlog, for tick labels.
fn symlog_inv(t: f64) -> f64 {
    t.signum() * (10f64.powf(t.abs()) - 1.0)
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && (a >= 1e4 || a < 1e-2) {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(points: &[(f64, f64)], color: &str, width: f64) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{},{}", if i == 0 { "" } else { " " }, c(*x), c(*y));
    }
    format!("<polyline points=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n")
}

#[allow(clippy::too_many_arguments)]
fn axes(
    svg: &mut String,
    panel: &Panel,
    title: &str,
    ylo: f64,
    yhi: f64,
    xlo: f64,
    xhi: f64,
    ylabel: impl Fn(f64) -> String,
) {
    let _ = write!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n",
        c(panel.x0),
        c(panel.y0),
        c(panel.x1 - panel.x0),
        c(panel.y1 - panel.y0)
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" fill=\"currentColor\">{}</text>\n",
        c((panel.x0 + panel.x1) / 2.0),
        c(panel.y0 - 12.0),
        title
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let ty = ylo + f * (yhi - ylo);
        let y = panel.sy(ty, ylo, yhi);
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ccc\" stroke-width=\"0.5\"/>\n",
            c(panel.x0),
            c(y),
            c(panel.x1),
            c(y)
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\" fill=\"currentColor\">{}</text>\n",
            c(panel.x0 - 6.0),
            c(y + 4.0),
            ylabel(ty)
        );
        let tx = xlo + f * (xhi - xlo);
        let x = panel.sx(tx, xlo, xhi);
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" fill=\"currentColor\">{}</text>\n",
            c(x),
            c(panel.y1 + 16.0),
            fmt_tick(tx)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"currentColor\">episode</text>\n",
        c((panel.x0 + panel.x1) / 2.0),
        c(panel.y1 + 34.0)
    );
}

/// Renders every series into one two-panel SVG document.
pub fn render(series: &[Series]) -> String {
    assert!(!series.is_empty(), "render needs at least one series");
    let left = Panel {
        x0: 70.0,
        x1: 455.0,
        y0: 46.0,
        y1: 360.0,
    };
    let right = Panel {
        x0: 570.0,
        x1: 945.0,
        y0: 46.0,
        y1: 360.0,
    };

    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.episodes.iter().copied()));
    let (rlo, rhi) = bounds(series.iter().flat_map(|s| {
        s.return_mean
            .iter()
            .zip(&s.return_se)
            .flat_map(|(&m, &e)| [symlog(m - e), symlog(m + e)])
    }));
    let (mlo, mhi) = bounds(
        series
            .iter()
            .flat_map(|s| s.mistake_rate.iter().map(|&r| r.max(RATE_FLOOR).log10())),
    );

    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"960\" height=\"420\" \
         viewBox=\"0 0 960 420\" font-family=\"sans-serif\">\n",
    );
    axes(
        &mut svg,
        &left,
        "mean return (symlog)",
        rlo,
        rhi,
        xlo,
        xhi,
        |t| fmt_tick(symlog_inv(t)),
    );
    axes(
        &mut svg,
        &right,
        "mistake rate (log)",
        mlo,
        mhi,
        xlo,
        xhi,
        |t| format!("1e{t:.1}"),
    );

    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        // Standard-error band, left panel.
        let mut band: Vec<(f64, f64)> = s
            .episodes
            .iter()
            .zip(s.return_mean.iter().zip(&s.return_se))
            .map(|(&x, (&m, &e))| {
                (
                    left.sx(x, xlo, xhi),
                    left.sy(symlog(m + e), rlo, rhi),
                )
            })
            .collect();
        let lower: Vec<(f64, f64)> = s
            .episodes
            .iter()
            .zip(s.return_mean.iter().zip(&s.return_se))
            .rev()
            .map(|(&x, (&m, &e))| {
                (
                    left.sx(x, xlo, xhi),
                    left.sy(symlog(m - e), rlo, rhi),
                )
            })
            .collect();
        band.extend(lower);
        let mut d = String::new();
        for (i, (x, y)) in band.iter().enumerate() {
            let _ = write!(d, "{}{},{}", if i == 0 { "" } else { " " }, c(*x), c(*y));
        }
        let _ = write!(
            svg,
            "<polygon points=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
        );

        let line: Vec<(f64, f64)> = s
            .episodes
            .iter()
            .zip(&s.return_mean)
            .map(|(&x, &m)| (left.sx(x, xlo, xhi), left.sy(symlog(m), rlo, rhi)))
            .collect();
        svg.push_str(&polyline(&line, color, 1.6));

        let rate: Vec<(f64, f64)> = s
            .episodes
            .iter()
            .zip(&s.mistake_rate)
            .map(|(&x, &r)| {
                (
                    right.sx(x, xlo, xhi),
                    right.sy(r.max(RATE_FLOOR).log10(), mlo, mhi),
                )
            })
            .collect();
        svg.push_str(&polyline(&rate, color, 1.6));

        // Legend, top-left panel interior.
        let ly = 60.0 + 18.0 * idx as f64;
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            c(left.x0 + 8.0),
            c(ly),
            c(left.x0 + 34.0),
            c(ly)
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"currentColor\">{}</text>\n",
            c(left.x0 + 40.0),
            c(ly + 4.0),
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

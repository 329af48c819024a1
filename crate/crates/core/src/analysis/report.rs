use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DivergenceReport, Metric, SweepReport, VarianceReport};
use crate::data::Permutation;
use crate::error::{Error, Result};

/// Bumped whenever a report's JSON layout changes incompatibly.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Reports that flatten to CSV rows.
pub trait Tabular {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;

    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).map_err(csv_err)?;
        for row in self.rows() {
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::contract(format!("csv: {e}"))
}

fn perm(p: &Permutation) -> String {
    p.as_slice().iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

impl Tabular for SweepReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["sample", "metric", "best", "worst", "mean", "argbest", "argworst"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.samples
            .iter()
            .flat_map(|s| {
                s.cells.iter().map(move |c| {
                    vec![
                        s.index.to_string(),
                        c.metric.name().into(),
                        c.best.to_string(),
                        c.worst.to_string(),
                        c.mean.to_string(),
                        perm(&c.argbest),
                        perm(&c.argworst),
                    ]
                })
            })
            .collect()
    }
}

impl Tabular for VarianceReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["run", "seed", "metric", "score"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.scores
                    .iter()
                    .map(move |(m, s)| vec![r.run.to_string(), r.seed.to_string(), m.clone(), s.to_string()])
            })
            .collect()
    }
}

impl Tabular for DivergenceReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["sample", "position", "token", "kl"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.samples
            .iter()
            .flat_map(|s| {
                s.tokens
                    .iter()
                    .enumerate()
                    .map(move |(i, t)| vec![s.index.to_string(), i.to_string(), t.text.clone(), t.kl.to_string()])
            })
            .collect()
    }
}

/// Writes `report` as pretty JSON or CSV.
pub fn emit_report<R: Serialize + Tabular>(report: &R, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Csv => report.to_csv()?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Five-number summary with Tukey whiskers (1.5 IQR) and outliers.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("box plot of an empty series"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
        let fence = 1.5 * (q3 - q1);
        let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= q1 - fence && x <= q3 + fence).collect();
        Ok(BoxStats {
            q1,
            median,
            q3,
            // a whisker never reaches into the box
            whisker_lo: inside.first().map_or(q1, |&x| x.min(q1)),
            whisker_hi: inside.last().map_or(q3, |&x| x.max(q3)),
            outliers: v.iter().copied().filter(|&x| x < q1 - fence || x > q3 + fence).collect(),
        })
    }
}

const PLOT_H: f64 = 300.0;
const MARGIN: f64 = 50.0;
const SLOT: f64 = 120.0;

/// One box per labeled series on a shared vertical axis.
pub fn boxplot_svg(title: &str, series: &[(String, Vec<f64>)]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::contract("box plot needs at least one series"));
    }
    let stats = series.iter().map(|(_, v)| BoxStats::of(v)).collect::<Result<Vec<_>>>()?;
    let all = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| MARGIN + PLOT_H * (hi - v) / (hi - lo);
    let width = 2.0 * MARGIN + SLOT * series.len() as f64;
    let height = 2.0 * MARGIN + PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN:.1}" y1="{MARGIN:.1}" x2="{MARGIN:.1}" y2="{:.1}" stroke="black"/>"#,
        MARGIN + PLOT_H
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0,
            y(v) + 4.0
        );
    }
    for (i, ((label, _), b)) in series.iter().zip(&stats).enumerate() {
        let cx = MARGIN + SLOT * (i as f64 + 0.5);
        let (x0, x1) = (cx - SLOT * 0.3, cx + SLOT * 0.3);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.whisker_hi),
            y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.q1),
            y(b.whisker_lo)
        );
        for w in [b.whisker_lo, b.whisker_hi] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                cx - SLOT * 0.15,
                y(w),
                cx + SLOT * 0.15,
                y(w)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            y(b.q3),
            x1 - x0,
            y(b.q1) - y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.1}" y1="{:.1}" x2="{x1:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            y(b.median),
            y(b.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="none" stroke="black"/>"#, y(o));
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN + PLOT_H + 20.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Box plot of one metric across the runs of each labeled variance report.
pub fn emit_boxplot_svg(reports: &[(String, &VarianceReport)], metric: Metric, path: &Path) -> Result<()> {
    let series: Vec<(String, Vec<f64>)> = reports.iter().map(|(l, r)| (l.clone(), r.series(metric))).collect();
    std::fs::write(path, boxplot_svg(&format!("{} over shuffled runs", metric.name()), &series)?)?;
    Ok(())
}

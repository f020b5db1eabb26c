//! Summaries of completed search logs: windowed reward tables, stage
//! correlation, rl-versus-random comparison, and static SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use segnas_core::genome::{enumerate_connectivities, space_size};
use segnas_core::metrics::spearman;
use segnas_core::search::{top_k, ArchRecord, SearchMode};

use crate::log::{LogError, RunLog};

pub const WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: log header names no search mode")]
    NoMode(PathBuf),
    #[error("no logs given")]
    Empty,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Mean final reward of the last `n` records (all of them if fewer).
pub fn last_mean(records: &[ArchRecord], n: usize) -> Option<f64> {
    mean(records[records.len().saturating_sub(n)..].iter().map(|r| r.final_reward))
}

/// Spearman correlation between the two stage rewards over the architectures
/// that reached stage 2, with the number of such architectures.
pub fn stage_correlation(records: &[ArchRecord]) -> (usize, Option<f64>) {
    let (r1, r2): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.reward2.map(|r2| (r.reward1, r2)))
        .unzip();
    (r1.len(), spearman(&r1, &r2).ok())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub log: String,
    pub mode: SearchMode,
    pub first_index: usize,
    pub last_index: usize,
    pub count: usize,
    pub mean_final_reward: f64,
    pub mean_reward1: f64,
    pub advance_rate: f64,
}

pub fn windows(name: &str, mode: SearchMode, records: &[ArchRecord], size: usize) -> Vec<WindowRow> {
    records
        .chunks(size.max(1))
        .map(|w| WindowRow {
            log: name.to_string(),
            mode,
            first_index: w[0].index,
            last_index: w[w.len() - 1].index,
            count: w.len(),
            mean_final_reward: mean(w.iter().map(|r| r.final_reward)).unwrap_or(0.0),
            mean_reward1: mean(w.iter().map(|r| r.reward1)).unwrap_or(0.0),
            advance_rate: w.iter().filter(|r| r.continued).count() as f64 / w.len() as f64,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LogSummary {
    pub name: String,
    pub mode: SearchMode,
    pub architectures: usize,
    pub mean_final_reward: f64,
    pub last_mean: f64,
    pub advance_rate: f64,
    pub flagged: usize,
    pub stage2_count: usize,
    pub spearman: Option<f64>,
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub logs: Vec<LogSummary>,
    pub windows: Vec<WindowRow>,
    /// Last-window mean of the first rl log minus that of the first random log.
    pub rl_minus_random: Option<f64>,
    pub enumeration_count: usize,
    series: Vec<(String, Vec<(f64, f64)>)>,
    stage_points: Vec<(f64, f64)>,
}

fn log_name(log: &RunLog) -> String {
    log.path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| log.path.display().to_string())
}

/// Builds the report; every log must be complete.
pub fn build(logs: &[RunLog]) -> Result<Report, ReportError> {
    if logs.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut stage_points = Vec::new();
    for log in logs {
        log.require_complete()?;
        let mode = log.mode().ok_or_else(|| ReportError::NoMode(log.path.clone()))?;
        let name = log_name(log);
        let recs = &log.records;
        let (stage2_count, rho) = stage_correlation(recs);
        stage_points.extend(recs.iter().filter_map(|r| r.reward2.map(|r2| (r.reward1, r2))));
        let w = windows(&name, mode, recs, WINDOW);
        series.push((
            format!("{name} ({})", mode.name()),
            w.iter()
                .map(|r| ((r.first_index + r.last_index) as f64 / 2.0, r.mean_final_reward))
                .collect(),
        ));
        rows.extend(w);
        summaries.push(LogSummary {
            name,
            mode,
            architectures: recs.len(),
            mean_final_reward: mean(recs.iter().map(|r| r.final_reward)).unwrap_or(0.0),
            last_mean: last_mean(recs, WINDOW).unwrap_or(0.0),
            advance_rate: if recs.is_empty() {
                0.0
            } else {
                recs.iter().filter(|r| r.continued).count() as f64 / recs.len() as f64
            },
            flagged: recs.iter().filter(|r| r.flagged).count(),
            stage2_count,
            spearman: rho,
            top: top_k(recs, 5),
        });
    }
    let first = |m: SearchMode| summaries.iter().find(|s| s.mode == m).map(|s| s.last_mean);
    let rl_minus_random = first(SearchMode::Rl).zip(first(SearchMode::Random)).map(|(a, b)| a - b);
    Ok(Report {
        logs: summaries,
        windows: rows,
        rl_minus_random,
        enumeration_count: enumerate_connectivities().len(),
        series,
        stage_points,
    })
}

impl Report {
    pub fn windows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "log",
            "mode",
            "first_index",
            "last_index",
            "count",
            "mean_final_reward",
            "mean_reward1",
            "advance_rate",
        ])
        .expect("in-memory write");
        for r in &self.windows {
            w.write_record([
                r.log.clone(),
                r.mode.name().to_string(),
                r.first_index.to_string(),
                r.last_index.to_string(),
                r.count.to_string(),
                format!("{:.6}", r.mean_final_reward),
                format!("{:.6}", r.mean_reward1),
                format!("{:.4}", r.advance_rate),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::from("# Search report\n\n");
        s.push_str("| log | mode | architectures | mean final | last-50 mean | advanced | flagged | stage-2 n | Spearman r1/r2 |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for l in &self.logs {
            let rho = l.spearman.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.1}% | {} | {} | {} |",
                l.name,
                l.mode.name(),
                l.architectures,
                l.mean_final_reward,
                l.last_mean,
                100.0 * l.advance_rate,
                l.flagged,
                l.stage2_count,
                rho
            );
        }
        match self.rl_minus_random {
            Some(d) => {
                let _ = writeln!(s, "\nLast-50 mean final reward, rl minus random: {d:+.4}");
            }
            None => s.push_str("\nNo rl/random pair among the logs; no comparison.\n"),
        }
        for l in &self.logs {
            let _ = writeln!(s, "\n## Best architectures in {}\n", l.name);
            for (g, r) in &l.top {
                let _ = writeln!(s, "- {r:.4} `{g}`");
            }
        }
        let sz = space_size();
        let _ = write!(
            s,
            "\n## Connectivity enumeration\n\n\
             Distinct connectivity structures: {}.\n\n\
             Pair k (k = 0, 1, 2) picks two operands from a pool of 4 + k outputs and\n\
             operand order is irrelevant, so pair k has C(4 + k + 1, 2) choices and the\n\
             total is 10 x 15 x 21 = {} (ordered: {}). The published figure of 120\n\
             equals 4 x 5 x 6, which is what one gets when each pair contributes a single\n\
             new choice out of its pool, i.e. counting one operand per pair. The sampled\n\
             genomes carry two operands per pair, so 120 undercounts this space; the\n\
             enumeration reports the count under operand-order symmetry only.\n\n\
             Cell space upper bound before symmetry reduction: {:.3e} (after operand-order\n\
             symmetry: {:.3e}).\n",
            self.enumeration_count, sz.connectivity_unordered, sz.connectivity_ordered, sz.cells_ordered, sz.cells_unordered
        );
        s
    }

    pub fn reward_plot(&self) -> String {
        svg_plot(
            "Mean final reward per 50-architecture window",
            "architecture index",
            "reward",
            &self.series,
            false,
        )
    }

    pub fn stage_plot(&self) -> String {
        svg_plot(
            "Stage-1 vs stage-2 reward",
            "reward1",
            "reward2",
            &[("architectures".to_string(), self.stage_points.clone())],
            true,
        )
    }

    /// Writes windows.csv, summary.md, rewards.svg and stages.svg into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ReportError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let files = [
            ("windows.csv", self.windows_csv()),
            ("summary.md", self.summary_markdown()),
            ("rewards.svg", self.reward_plot()),
            ("stages.svg", self.stage_plot()),
        ];
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_plot(title: &str, xl: &str, yl: &str, series: &[(String, Vec<(f64, f64)>)], scatter: bool) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        t = m,
        b = h - m,
        r = w - m
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), h - m + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, m - 6.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, escape(xl));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(yl)
    );
    for (k, (name, p)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        if scatter {
            for &(x, y) in p {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}" fill-opacity="0.6"/>"#, sx(x), sy(y));
            }
        } else if !p.is_empty() {
            let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, d.join(" "));
        }
        let ly = m + 4.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{ly}" width="10" height="10" fill="{c}"/>"#, w - m - 150.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - m - 135.0, ly + 9.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use segnas_core::search::Ablation;

    fn rec(index: usize, r1: f64, r2: Option<f64>) -> ArchRecord {
        ArchRecord {
            index,
            genome: format!("g{}", index % 7),
            reward1: r1,
            continued: r2.is_some(),
            reward2: r2,
            final_reward: r2.unwrap_or(r1),
            p_at_decision: 0.9,
            running_mean: None,
            seconds_stage1: 1.0,
            seconds_stage2: 0.0,
            mode: SearchMode::Rl,
            ablation: Ablation::default(),
            flagged: false,
        }
    }

    #[test]
    fn windows_cover_every_record_once() {
        let recs: Vec<ArchRecord> = (0..120).map(|i| rec(i, i as f64 / 120.0, None)).collect();
        let w = windows("a", SearchMode::Rl, &recs, WINDOW);
        assert_eq!(w.iter().map(|r| r.count).collect::<Vec<_>>(), vec![50, 50, 20]);
        assert_eq!((w[2].first_index, w[2].last_index), (100, 119));
        assert!((w[0].mean_reward1 - 24.5 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn last_mean_and_correlation() {
        let recs: Vec<ArchRecord> = (0..60)
            .map(|i| rec(i, i as f64, (i % 2 == 0).then_some(2.0 * i as f64)))
            .collect();
        assert_eq!(last_mean(&recs, 1), Some(recs[59].final_reward));
        let (n, rho) = stage_correlation(&recs);
        assert_eq!(n, 30);
        assert!((rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(last_mean(&[], 50), None);
    }

    #[test]
    fn svg_is_well_formed_even_without_points() {
        let s = svg_plot("t", "x", "y", &[("s".into(), vec![])], true);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(!s.contains("NaN"));
    }
}

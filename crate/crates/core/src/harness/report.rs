//! Merged tables and plot data over a set of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_metrics, write_csv, MetricRow, RunManifest, SampleCsvRow};
use crate::error::{Error, Result};

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub merged: PathBuf,
    pub iad_series: PathBuf,
    pub summary: PathBuf,
    pub loss_traces: PathBuf,
    pub scatter: PathBuf,
    pub svgs: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct TraceIn {
    step: usize,
    #[serde(rename = "L_DM")]
    l_dm: f64,
    #[serde(rename = "L_KD")]
    l_kd: f64,
    #[serde(rename = "L_train")]
    l_train: f64,
}

#[derive(Serialize)]
struct TraceOut<'a> {
    run_id: &'a str,
    method: &'a str,
    seed: u64,
    session: usize,
    step: usize,
    #[serde(rename = "L_DM")]
    l_dm: f64,
    #[serde(rename = "L_KD")]
    l_kd: f64,
    #[serde(rename = "L_train")]
    l_train: f64,
}

#[derive(Serialize)]
struct ScatterOut<'a> {
    run_id: &'a str,
    method: &'a str,
    seed: u64,
    session: usize,
    token: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    session: usize,
    n_seeds: usize,
    mean_base_ta: Option<f64>,
    mean_iad: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the merged metrics, IAD series, per-method summary, loss traces,
/// scatter data and SVG scatters of each run's last session into `out`.
/// Runs that did not complete contribute their rows but are flagged by the
/// empty cells they leave.
pub fn emit_report(manifests: &[RunManifest], out: &Path) -> Result<ReportFiles> {
    if manifests.is_empty() {
        return Err(Error::Usage("report needs at least one run manifest".into()));
    }
    std::fs::create_dir_all(out)?;
    let files = ReportFiles {
        dir: out.to_path_buf(),
        merged: out.join("metrics_merged.csv"),
        iad_series: out.join("iad_series.csv"),
        summary: out.join("summary.csv"),
        loss_traces: out.join("loss_traces.csv"),
        scatter: out.join("scatter.csv"),
        svgs: Vec::new(),
    };

    let mut all_rows: Vec<MetricRow> = Vec::new();
    for m in manifests {
        all_rows.extend(read_metrics(&m.metrics_csv)?);
    }
    write_csv(&files.merged, &all_rows)?;

    let max_session = all_rows.iter().map(|r| r.session).max().unwrap_or(0);
    let mut iad = String::from("method,seed");
    for s in 2..=max_session {
        write!(iad, ",iad_s{s}").unwrap();
    }
    iad.push('\n');
    for m in manifests {
        write!(iad, "{},{}", m.method, m.seed).unwrap();
        for s in 2..=max_session {
            let v = all_rows
                .iter()
                .find(|r| r.run_id == m.run_id && r.session == s && r.token == "all")
                .and_then(|r| r.iad);
            write!(iad, ",{}", fmt_opt(v)).unwrap();
        }
        iad.push('\n');
    }
    std::fs::write(&files.iad_series, iad)?;

    // Per (method, session): mean over seeds of each run's mean base TA and
    // aggregate IAD.
    let mut per: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>, Vec<u64>)> = BTreeMap::new();
    for m in manifests {
        for s in 0..=max_session {
            let rows: Vec<&MetricRow> = all_rows.iter().filter(|r| r.run_id == m.run_id && r.session == s).collect();
            if rows.is_empty() {
                continue;
            }
            let e = per.entry((m.method.name().to_string(), s)).or_default();
            let tas: Vec<f64> = rows.iter().filter_map(|r| r.ta).collect();
            if let Some(t) = mean(&tas) {
                e.0.push(t);
            }
            if let Some(v) = rows.iter().find(|r| r.token == "all").and_then(|r| r.iad) {
                e.1.push(v);
            }
            if !e.2.contains(&m.seed) {
                e.2.push(m.seed);
            }
        }
    }
    let summary: Vec<SummaryRow> = per
        .into_iter()
        .map(|((method, session), (ta, iad, seeds))| SummaryRow {
            method,
            session,
            n_seeds: seeds.len(),
            mean_base_ta: mean(&ta),
            mean_iad: mean(&iad),
        })
        .collect();
    write_csv(&files.summary, &summary)?;

    let mut traces = csv::Writer::from_path(&files.loss_traces)?;
    for m in manifests {
        for (i, path) in m.loss_traces.iter().enumerate() {
            let mut r = csv::Reader::from_path(path)?;
            for row in r.deserialize::<TraceIn>() {
                let row = row?;
                traces.serialize(TraceOut {
                    run_id: &m.run_id,
                    method: m.method.name(),
                    seed: m.seed,
                    session: i + 1,
                    step: row.step,
                    l_dm: row.l_dm,
                    l_kd: row.l_kd,
                    l_train: row.l_train,
                })?;
            }
        }
    }
    traces.flush()?;

    let mut files = files;
    let mut scatter = csv::Writer::from_path(&files.scatter)?;
    for m in manifests {
        let mut r = csv::Reader::from_path(&m.samples_csv)?;
        let points: Vec<SampleCsvRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        for p in &points {
            scatter.serialize(ScatterOut {
                run_id: &m.run_id,
                method: m.method.name(),
                seed: m.seed,
                session: p.session,
                token: p.token,
                x: p.x,
                y: p.y,
            })?;
        }
        let last = points.iter().map(|p| p.session).max().unwrap_or(0);
        let last_points: Vec<&SampleCsvRow> = points.iter().filter(|p| p.session == last).collect();
        if !last_points.is_empty() {
            let path = out.join(format!("scatter_{}_session{last}.svg", m.run_id));
            std::fs::write(&path, render_svg(&format!("{} session {last}", m.run_id), &last_points))?;
            files.svgs.push(path);
        }
    }
    scatter.flush()?;
    Ok(files)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn render_svg(title: &str, points: &[&SampleCsvRow]) -> String {
    let (size, pad) = (480.0, 30.0);
    let lo = points.iter().flat_map(|p| [p.x, p.y]).fold(f64::INFINITY, f64::min);
    let hi = points.iter().flat_map(|p| [p.x, p.y]).fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let map = |v: f64| pad + (v - lo) / span * (size - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">{title}</text>\n"
    );
    for p in points {
        let colour = PALETTE[p.token % PALETTE.len()];
        writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"{colour}\" fill-opacity=\"0.6\"/>",
            map(p.x),
            size - map(p.y)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

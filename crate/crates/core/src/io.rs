//! Delimited-text ingestion of panels and writers for every output table.
//!
//! Numbers are written as `{:.16e}` (17 significant digits), which round-trips
//! every finite `f64`. Missing values are empty fields.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::causal::CausalReport;
use crate::emvs::PathPoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mcmc::{inefficiency_factor, PosteriorDraws};
use crate::panel::{TimeFormat, TimeSeriesPanel};

pub const PANEL_HEADER: [&str; 5] = ["store_id", "role", "region", "timestamp", "value"];

/// Largest region block allowed when the graph is derived rather than given.
pub const MAX_DERIVED_BLOCK: usize = 15;

pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

/// `YYYY-MM-DD` dates become days since 1970-01-01; anything else must be an
/// integer.
pub fn parse_timestamp(s: &str) -> Option<(i64, TimeFormat)> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some((d.signed_duration_since(epoch()).num_days(), TimeFormat::Date));
    }
    s.parse::<i64>().ok().map(|v| (v, TimeFormat::Integer))
}

pub fn format_timestamp(t: i64, format: TimeFormat) -> String {
    match format {
        TimeFormat::Integer => t.to_string(),
        TimeFormat::Date => (epoch() + chrono::Duration::days(t)).format("%Y-%m-%d").to_string(),
    }
}

/// How the store graph is built. Stores in different regions are never
/// connected.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    /// Every pair of test stores in a region is connected.
    Region,
    /// Explicit edges between store ids.
    Edges(Vec<(String, String)>),
    /// Stores within `threshold` of each other are connected.
    Coordinates {
        points: HashMap<String, (f64, f64)>,
        threshold: f64,
    },
}

/// Edge iff the Euclidean distance is at most `threshold`.
pub fn derive_graph(points: &[(f64, f64)], threshold: f64) -> Result<Graph> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("distance threshold {threshold} must be positive")));
    }
    let mut edges = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
            if (dx * dx + dy * dy).sqrt() <= threshold {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(points.len(), &edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub panel: TimeSeriesPanel,
    /// Test stores without any control in their region.
    pub dropped: Vec<String>,
}

struct Series {
    id: String,
    region: String,
    control: bool,
    values: HashMap<i64, f64>,
}

/// Reads the long-format panel. Each test store gets every control series of
/// its region as candidate regressors; `causal_start` is the first timestamp
/// of the causal window.
pub fn read_panel<R: Read>(reader: R, causal_start: &str, graph: &GraphSource) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if header != PANEL_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", PANEL_HEADER.join(",")),
        });
    }
    let mut series: Vec<Series> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut format = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let control = match &rec[1] {
            "test" => false,
            "control" => true,
            other => return Err(bad(format!("role must be test or control, found {other:?}"))),
        };
        let (t, f) = parse_timestamp(&rec[3]).ok_or_else(|| bad(format!("bad timestamp {:?}", &rec[3])))?;
        if *format.get_or_insert(f) != f {
            return Err(bad("timestamps mix dates and integers".into()));
        }
        let value = if rec[4].is_empty() {
            f64::NAN
        } else {
            match rec[4].parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => return Err(bad(format!("bad value {:?}", &rec[4]))),
            }
        };
        let k = *index.entry(rec[0].to_string()).or_insert_with(|| {
            series.push(Series {
                id: rec[0].to_string(),
                region: rec[2].to_string(),
                control,
                values: HashMap::new(),
            });
            series.len() - 1
        });
        let s = &mut series[k];
        if s.control != control || s.region != rec[2] {
            return Err(bad(format!("store {} changes role or region", s.id)));
        }
        if s.values.insert(t, value).is_some() {
            return Err(bad(format!("duplicate row for {} at {}", s.id, &rec[3])));
        }
    }
    let format = format.ok_or_else(|| Error::Validation("panel file has no rows".into()))?;

    let stamps: Vec<i64> = series
        .iter()
        .flat_map(|s| s.values.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if stamps.len() >= 2 {
        let step = stamps[1] - stamps[0];
        for w in stamps.windows(2) {
            if w[1] - w[0] != step {
                return Err(Error::Validation(format!(
                    "non-uniform timestamps: gap between {} and {}",
                    format_timestamp(w[0], format),
                    format_timestamp(w[1], format)
                )));
            }
        }
    }
    let nt = stamps.len();
    let (start, _) = parse_timestamp(causal_start)
        .ok_or_else(|| Error::Validation(format!("bad causal start {causal_start:?}")))?;
    let causal_start = stamps
        .iter()
        .position(|&t| t == start)
        .ok_or_else(|| Error::Validation(format!("causal start {causal_start} is not a timestamp of the panel")))?;

    let mut region_controls: HashMap<&str, Vec<usize>> = HashMap::new();
    for (k, s) in series.iter().enumerate().filter(|(_, s)| s.control) {
        region_controls.entry(&s.region).or_default().push(k);
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, s) in series.iter().enumerate().filter(|(_, s)| !s.control) {
        if region_controls.contains_key(s.region.as_str()) {
            kept.push(k);
        } else {
            dropped.push(s.id.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation("no test store has a control series in its region".into()));
    }

    let row = |s: &Series| DMatrix::from_fn(1, nt, |_, t| s.values.get(&stamps[t]).copied().unwrap_or(f64::NAN));
    let mut observed = DMatrix::zeros(kept.len(), nt);
    let mut controls = Vec::with_capacity(kept.len());
    let mut control_ids = Vec::with_capacity(kept.len());
    for (i, &k) in kept.iter().enumerate() {
        observed.set_row(i, &row(&series[k]).row(0));
        let members = &region_controls[series[k].region.as_str()];
        let mut block = DMatrix::zeros(members.len(), nt);
        for (r, &c) in members.iter().enumerate() {
            let vals = row(&series[c]);
            if let Some(t) = vals.iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(format!(
                    "control {} has no value at {}",
                    series[c].id,
                    format_timestamp(stamps[t], format)
                )));
            }
            block.set_row(r, &vals.row(0));
        }
        controls.push(block);
        control_ids.push(members.iter().map(|&c| series[c].id.clone()).collect());
    }
    let store_ids: Vec<String> = kept.iter().map(|&k| series[k].id.clone()).collect();
    let regions: Vec<String> = kept.iter().map(|&k| series[k].region.clone()).collect();
    let graph = build_graph(&store_ids, &regions, graph)?;

    let panel = TimeSeriesPanel {
        store_ids,
        regions,
        timestamps: stamps,
        time_format: format,
        observed,
        controls,
        control_ids,
        causal_start,
        graph,
    };
    panel.validate()?;
    Ok(Ingested { panel, dropped })
}

fn build_graph(ids: &[String], regions: &[String], source: &GraphSource) -> Result<Graph> {
    let n = ids.len();
    let mut edges = Vec::new();
    let check_block = |members: usize, region: &str| {
        if members > MAX_DERIVED_BLOCK {
            Err(Error::Validation(format!(
                "region {region} has {members} stores; derived graphs allow at most {MAX_DERIVED_BLOCK}"
            )))
        } else {
            Ok(())
        }
    };
    match source {
        GraphSource::Region | GraphSource::Coordinates { .. } => {
            let mut blocks: Vec<(&str, Vec<usize>)> = Vec::new();
            for (i, r) in regions.iter().enumerate() {
                match blocks.iter_mut().find(|(name, _)| name == r) {
                    Some((_, m)) => m.push(i),
                    None => blocks.push((r, vec![i])),
                }
            }
            for (region, members) in &blocks {
                check_block(members.len(), region)?;
                let sub = match source {
                    GraphSource::Coordinates { points, threshold } => {
                        let pts = members
                            .iter()
                            .map(|&i| {
                                points
                                    .get(&ids[i])
                                    .copied()
                                    .ok_or_else(|| Error::Validation(format!("no coordinates for {}", ids[i])))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        derive_graph(&pts, *threshold)?
                    }
                    _ => Graph::complete(members.len()),
                };
                for a in 0..members.len() {
                    for b in a + 1..members.len() {
                        if sub.has_edge(a, b) {
                            edges.push((members[a], members[b]));
                        }
                    }
                }
            }
        }
        GraphSource::Edges(list) => {
            let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            for (a, b) in list {
                // edges touching dropped or unknown stores are ignored
                if let (Some(&i), Some(&j)) = (pos.get(a.as_str()), pos.get(b.as_str())) {
                    if regions[i] != regions[j] {
                        return Err(Error::Validation(format!("edge {a}-{b} crosses regions")));
                    }
                    if i != j {
                        edges.push((i.min(j), i.max(j)));
                    }
                }
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Writes the panel in the format read by [`read_panel`]. Controls shared by
/// several stores of a region are written once.
pub fn write_panel<W: Write>(panel: &TimeSeriesPanel, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(PANEL_HEADER)?;
    let stamps: Vec<String> = panel.timestamps.iter().map(|&t| format_timestamp(t, panel.time_format)).collect();
    for i in 0..panel.n_series() {
        for (t, ts) in stamps.iter().enumerate() {
            w.write_record([
                panel.store_ids[i].as_str(),
                "test",
                panel.regions[i].as_str(),
                ts,
                &fmt_num(panel.observed[(i, t)]),
            ])?;
        }
    }
    let mut seen = BTreeSet::new();
    for i in 0..panel.n_series() {
        for (r, id) in panel.control_ids[i].iter().enumerate() {
            if !seen.insert((panel.regions[i].clone(), id.clone())) {
                continue;
            }
            for (t, ts) in stamps.iter().enumerate() {
                w.write_record([
                    id.as_str(),
                    "control",
                    panel.regions[i].as_str(),
                    ts,
                    &fmt_num(panel.controls[i][(r, t)]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_edges<W: Write>(panel: &TimeSeriesPanel, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["store_a", "store_b"])?;
    let n = panel.n_series();
    for i in 0..n {
        for j in i + 1..n {
            if panel.graph.has_edge(i, j) {
                w.write_record([&panel.store_ids[i], &panel.store_ids[j]])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_edges<R: Read>(r: R) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                line: rec.position().map_or(0, |p| p.line() as usize),
                message: "edge rows need store_a,store_b".into(),
            });
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// `store_id,x,y` rows.
pub fn read_coordinates<R: Read>(r: R) -> Result<HashMap<String, (f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad coordinate {s:?}"),
                })
        };
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                message: "coordinate rows need store_id,x,y".into(),
            });
        }
        out.insert(rec[0].to_string(), (parse(&rec[1])?, parse(&rec[2])?));
    }
    Ok(out)
}

/// One record per grid point, store and candidate control.
pub fn write_path_table<W: Write>(panel: &TimeSeriesPanel, path: &[PathPoint], w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["v0", "store_id", "control_id", "beta", "threshold", "selected"])?;
    for point in path {
        for i in 0..panel.n_series() {
            let off = panel.beta_offset(i);
            for (c, cid) in panel.control_ids[i].iter().enumerate() {
                let b = point.state.beta[off + c];
                w.write_record([
                    fmt_num(point.v0),
                    panel.store_ids[i].clone(),
                    cid.clone(),
                    fmt_num(b),
                    fmt_num(point.threshold.value),
                    (b.abs() > point.threshold.value).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format `parameter,iteration,value`.
pub fn write_traces<W: Write>(draws: &PosteriorDraws, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["parameter", "iteration", "value"])?;
    for (name, trace) in draws.scalar_traces() {
        for (d, v) in draws.draws.iter().zip(&trace) {
            w.write_record([name.clone(), d.iteration.to_string(), fmt_num(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `parameter,inefficiency,acceptance`. Gibbs-updated parameters have
/// acceptance 1; the inefficiency is empty when the chain is too short.
pub fn write_diagnostics<W: Write>(draws: &PosteriorDraws, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["parameter", "inefficiency", "acceptance"])?;
    for (name, trace) in draws.scalar_traces() {
        let acc = if name.starts_with("phi") {
            draws.phi_acceptance()
        } else if name.starts_with("sigma_v") {
            draws.sigma_v_acceptance().or(Some(1.0))
        } else {
            Some(1.0)
        };
        let ineff = inefficiency_factor(&trace).ok().map(|i| i.value);
        w.write_record([name, fmt_opt(ineff), fmt_opt(acc)])?;
    }
    w.flush()?;
    Ok(())
}

pub const REPORT_HEADER: [&str; 9] = [
    "store_id",
    "horizon",
    "timestamp",
    "ks",
    "threshold",
    "significant",
    "diff_median",
    "diff_lo95",
    "diff_hi95",
];

/// One record of a written report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub store_id: String,
    pub horizon: usize,
    pub timestamp: String,
    pub ks: Option<f64>,
    pub threshold: Option<f64>,
    pub significant: Option<bool>,
    pub diff_median: f64,
    pub diff_lo95: f64,
    pub diff_hi95: f64,
}

pub fn report_rows(report: &CausalReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for s in &report.stores {
        for m in 1..=report.horizon() {
            let has = !s.ks.is_empty();
            rows.push(ReportRow {
                store_id: s.store_id.clone(),
                horizon: m,
                timestamp: format_timestamp(report.timestamps[m - 1], report.time_format),
                ks: has.then(|| s.ks[m - 1]),
                threshold: has.then(|| s.threshold[m - 1]),
                significant: has.then(|| s.significant(m)),
                diff_median: s.difference.median,
                diff_lo95: s.difference.lo95,
                diff_hi95: s.difference.hi95,
            });
        }
    }
    rows
}

/// One record per store and horizon.
pub fn write_report<W: Write>(report: &CausalReport, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(REPORT_HEADER)?;
    for r in report_rows(report) {
        w.write_record([
            r.store_id,
            r.horizon.to_string(),
            r.timestamp,
            fmt_opt(r.ks),
            fmt_opt(r.threshold),
            r.significant.map(|b| b.to_string()).unwrap_or_default(),
            fmt_num(r.diff_median),
            fmt_num(r.diff_lo95),
            fmt_num(r.diff_hi95),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    if rdr.headers()?.iter().ne(REPORT_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", REPORT_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what}"),
        };
        if rec.len() != REPORT_HEADER.len() {
            return Err(bad("field count"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(REPORT_HEADER[i]));
        let opt = |i: usize| if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) };
        out.push(ReportRow {
            store_id: rec[0].to_string(),
            horizon: rec[1].parse().map_err(|_| bad("horizon"))?,
            timestamp: rec[2].to_string(),
            ks: opt(3)?,
            threshold: opt(4)?,
            significant: match &rec[5] {
                "" => None,
                "true" => Some(true),
                "false" => Some(false),
                _ => return Err(bad("significant")),
            },
            diff_median: num(6)?,
            diff_lo95: num(7)?,
            diff_hi95: num(8)?,
        });
    }
    Ok(out)
}

/// Significant-store count per horizon: `(horizon, timestamp, significant, total)`.
pub fn horizon_counts(rows: &[ReportRow]) -> Vec<(usize, String, usize, usize)> {
    let mut out: Vec<(usize, String, usize, usize)> = Vec::new();
    for r in rows {
        let Some(sig) = r.significant else { continue };
        let pos = match out.iter().position(|c| c.0 == r.horizon) {
            Some(p) => p,
            None => {
                out.push((r.horizon, r.timestamp.clone(), 0, 0));
                out.len() - 1
            }
        };
        out[pos].2 += sig as usize;
        out[pos].3 += 1;
    }
    out.sort_by_key(|c| c.0);
    out
}

pub fn write_counts<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["horizon", "timestamp", "significant", "stores"])?;
    for (m, ts, sig, total) in horizon_counts(rows) {
        w.write_record([m.to_string(), ts, sig.to_string(), total.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format series for plotting: KS distance and threshold per store and
/// horizon.
pub fn write_plot_data<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["store_id", "horizon", "timestamp", "series", "value"])?;
    for r in rows {
        for (name, v) in [("ks", r.ks), ("threshold", r.threshold)] {
            if let Some(v) = v {
                w.write_record([r.store_id.clone(), r.horizon.to_string(), r.timestamp.clone(), name.into(), fmt_num(v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Difference estimand per store.
pub fn write_difference_summary<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["store_id", "median", "lo95", "hi95", "detected"])?;
    let mut seen = BTreeSet::new();
    for r in rows {
        if seen.insert(r.store_id.clone()) {
            let detected = r.diff_lo95 > 0.0 || r.diff_hi95 < 0.0;
            w.write_record([
                r.store_id.clone(),
                fmt_num(r.diff_median),
                fmt_num(r.diff_lo95),
                fmt_num(r.diff_hi95),
                detected.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

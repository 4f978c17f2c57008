//! Latency statistics and the CSV/JSON report formats.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: &str = "path,probe_index,latency_ms";
const SUMMARY_HEADER: &str = "# path,n,mean_ms,max_ms,p50_ms,p95_ms,p99_ms,losses,attempted";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("no samples")]
    Empty,
    #[error("invalid sample {0}: latencies are finite and non-negative")]
    BadSample(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePath {
    Stream,
    Datagram,
    EndToEnd,
}

impl ProbePath {
    pub const ALL: [ProbePath; 3] = [ProbePath::Stream, ProbePath::Datagram, ProbePath::EndToEnd];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbePath::Stream => "stream",
            ProbePath::Datagram => "datagram",
            ProbePath::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for ProbePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stream" => Ok(ProbePath::Stream),
            "datagram" => Ok(ProbePath::Datagram),
            "end_to_end" | "e2e" => Ok(ProbePath::EndToEnd),
            other => Err(format!("unknown path {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank ⌈q·n⌉.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize(samples: &[f64]) -> Result<Summary, ReportError> {
    if samples.is_empty() {
        return Err(ReportError::Empty);
    }
    if let Some(&bad) = samples.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(ReportError::BadSample(bad));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        n: samples.len(),
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        p50: nearest_rank(&sorted, 0.50),
        p95: nearest_rank(&sorted, 0.95),
        p99: nearest_rank(&sorted, 0.99),
    })
}

/// Result of one probe run. Round trips only; no one-way estimate is made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub path: ProbePath,
    /// Probes attempted, including lost ones.
    pub attempted: usize,
    pub samples_ms: Vec<f64>,
    pub n: usize,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
    pub losses: usize,
    pub errors: Vec<String>,
}

impl LatencyReport {
    pub fn new(path: ProbePath, attempted: usize, samples_ms: Vec<f64>, losses: usize, errors: Vec<String>) -> Self {
        let s = summarize(&samples_ms).ok();
        Self {
            path,
            attempted,
            n: samples_ms.len(),
            mean: s.map(|s| s.mean),
            max: s.map(|s| s.max),
            p50: s.map(|s| s.p50),
            p95: s.map(|s| s.p95),
            p99: s.map(|s| s.p99),
            samples_ms,
            losses,
            // Keeps every error on one CSV line.
            errors: errors.into_iter().map(|e| e.replace(['\r', '\n'], " ")).collect(),
        }
    }

    /// A report with no samples, e.g. when the target was unreachable.
    pub fn failed(path: ProbePath, attempted: usize, error: impl Into<String>) -> Self {
        Self::new(path, attempted, Vec::new(), 0, vec![error.into()])
    }

    pub fn summary(&self) -> Option<Summary> {
        summarize(&self.samples_ms).ok()
    }

    pub fn is_complete(&self) -> bool {
        self.n > 0 && self.errors.is_empty() && self.losses == 0
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Per-probe rows for every report, followed by one summary footer per report.
pub fn render_csv(reports: &[LatencyReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (i, s) in r.samples_ms.iter().enumerate() {
            out.push_str(&format!("{},{i},{s}\n", r.path));
        }
    }
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "# {},{},{},{},{},{},{},{},{}\n",
            r.path,
            r.n,
            opt(r.mean),
            opt(r.max),
            opt(r.p50),
            opt(r.p95),
            opt(r.p99),
            r.losses,
            r.attempted
        ));
        for e in &r.errors {
            out.push_str(&format!("# error,{},{e}\n", r.path));
        }
    }
    out
}

struct Partial {
    path: ProbePath,
    samples: Vec<f64>,
    footer: Option<(usize, usize, usize)>,
    errors: Vec<String>,
}

pub fn parse_csv(text: &str) -> Result<Vec<LatencyReport>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(ReportError::Parse { line: 1, msg: "missing header".into() }),
    }
    let mut parts: Vec<Partial> = Vec::new();
    // Footers list reports in render order; rows alone miss empty reports.
    let mut order: Vec<ProbePath> = Vec::new();
    fn slot(parts: &mut Vec<Partial>, path: ProbePath) -> &mut Partial {
        if let Some(i) = parts.iter().position(|p| p.path == path) {
            return &mut parts[i];
        }
        parts.push(Partial { path, samples: Vec::new(), footer: None, errors: Vec::new() });
        parts.last_mut().expect("just pushed")
    }
    for (idx, line) in lines {
        let err = |msg: String| ReportError::Parse { line: idx + 1, msg };
        if line.is_empty() || line == SUMMARY_HEADER {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# error,") {
            let (path, msg) = rest.split_once(',').ok_or_else(|| err("truncated error line".into()))?;
            let path = path.parse().map_err(err)?;
            slot(&mut parts, path).errors.push(msg.to_owned());
        } else if let Some(rest) = line.strip_prefix("# ") {
            let f: Vec<&str> = rest.split(',').collect();
            if f.len() != 9 {
                return Err(err(format!("summary has {} fields", f.len())));
            }
            let path = f[0].parse().map_err(err)?;
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(e.to_string()));
            let footer = (num(f[1])?, num(f[7])?, num(f[8])?);
            slot(&mut parts, path).footer = Some(footer);
            order.push(path);
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err(format!("row has {} fields", f.len())));
            }
            let path = f[0].parse().map_err(err)?;
            let index: usize = f[1].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            let value: f64 = f[2].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            let p = slot(&mut parts, path);
            if index != p.samples.len() {
                return Err(err(format!("probe_index {index} out of order")));
            }
            p.samples.push(value);
        }
    }
    parts.sort_by_key(|p| order.iter().position(|o| *o == p.path).unwrap_or(usize::MAX));
    parts
        .into_iter()
        .map(|p| {
            let (n, losses, attempted) =
                p.footer.ok_or_else(|| ReportError::Parse { line: 0, msg: format!("no summary for {}", p.path) })?;
            if n != p.samples.len() {
                return Err(ReportError::Parse { line: 0, msg: format!("{}: summary n={n} but {} rows", p.path, p.samples.len()) });
            }
            Ok(LatencyReport::new(p.path, attempted, p.samples, losses, p.errors))
        })
        .collect()
}

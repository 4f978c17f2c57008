//! Latency benchmark: sequential round-trip probes with nearest-rank statistics.

pub mod probe;
pub mod report;

pub use probe::{probe_datagram, probe_end_to_end, probe_stream, EndToEndTarget, ProbeOptions};
pub use report::{parse_csv, render_csv, summarize, LatencyReport, ProbePath, ReportError, Summary};

use iohrt_latencybench::{parse_csv, render_csv, summarize, LatencyReport, ProbePath};
use proptest::prelude::*;

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..500.0f64, 1..300)
}

fn path() -> impl Strategy<Value = ProbePath> {
    prop::sample::select(ProbePath::ALL.to_vec())
}

/// Independent nearest-rank oracle: smallest x with at least q·n samples ≤ x.
fn oracle_percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let need = q * xs.len() as f64;
    *v.iter().enumerate().find(|(i, _)| (*i + 1) as f64 >= need).map(|(_, x)| x).unwrap()
}

proptest! {
    #[test]
    fn summary_is_ordered_and_matches_oracle(xs in samples()) {
        let s = summarize(&xs).unwrap();
        prop_assert!(s.min <= s.p50 && s.p50 <= s.p95 && s.p95 <= s.p99 && s.p99 <= s.max);
        prop_assert_eq!(s.n, xs.len());
        prop_assert!(s.mean >= s.min - 1e-9 && s.mean <= s.max + 1e-9);
        prop_assert_eq!(s.p50, oracle_percentile(&xs, 0.50));
        prop_assert_eq!(s.p95, oracle_percentile(&xs, 0.95));
        prop_assert_eq!(s.p99, oracle_percentile(&xs, 0.99));
        prop_assert_eq!(s.max, xs.iter().cloned().fold(f64::MIN, f64::max));
    }

    #[test]
    fn summary_depends_only_on_the_multiset(mut xs in samples(), seed in any::<u64>()) {
        let a = summarize(&xs).unwrap();
        let k = (seed as usize) % xs.len();
        xs.rotate_left(k);
        let b = summarize(&xs).unwrap();
        prop_assert_eq!((a.p50, a.p95, a.p99, a.max, a.min), (b.p50, b.p95, b.p99, b.max, b.min));
        prop_assert!((a.mean - b.mean).abs() <= 1e-9 * a.max.max(1.0));
    }

    #[test]
    fn csv_round_trips(
        reports in prop::collection::vec((path(), prop::collection::vec(0.0..500.0f64, 0..50), 0usize..20, prop::collection::vec("[ -~]{0,40}", 0..3)), 1..3)
    ) {
        let mut seen = std::collections::HashSet::new();
        let reports: Vec<LatencyReport> = reports
            .into_iter()
            .filter(|(p, ..)| seen.insert(*p))
            .map(|(p, s, losses, errors)| {
                let attempted = s.len() + losses;
                LatencyReport::new(p, attempted, s, losses, errors)
            })
            .collect();
        let text = render_csv(&reports);
        prop_assert_eq!(parse_csv(&text).unwrap(), reports);
    }
}

#[test]
fn csv_has_one_row_per_sample() {
    let r = LatencyReport::new(ProbePath::Stream, 100, (0..100).map(|i| i as f64 / 10.0).collect(), 0, vec![]);
    let text = render_csv(&[r]);
    let rows = text.lines().skip(1).filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 100);
    assert!(text.starts_with("path,probe_index,latency_ms\n"));
}

#[test]
fn json_report_has_documented_fields() {
    let r = LatencyReport::new(ProbePath::EndToEnd, 2, vec![1.0, 3.0], 0, vec![]);
    let v = serde_json::to_value(&r).unwrap();
    for k in ["path", "samples_ms", "n", "mean", "max", "p50", "p95", "p99"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert_eq!(v["mean"], 2.0);
    assert_eq!(v["path"], "end_to_end");
}

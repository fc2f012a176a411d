//! Canonical trace types and their CSV/JSON file formats.
//!
//! Power, invocation, utilization, and counter traces interchange between
//! the simulator, the profiler, and the CLI as plain CSV with fixed headers,
//! plus a small JSON sidecar carrying the epoch and nominal sample period.
//! Readers validate invariants row by row and report the offending line;
//! out-of-order rows are a hard error rather than silently sorted, because
//! ordering bugs are exactly what the skew estimator must be able to see.
//!
//! Timestamps are seconds relative to the trace epoch, kept at millisecond
//! resolution so formatting round-trips byte-identically.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which physical signal a power sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    /// Full-system power (wall meter).
    System,
    /// CPU-package power (RAPL-like).
    Cpu,
    /// Everything that is not CPU: System − Cpu.
    Rest,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::System => "system",
            Source::Cpu => "cpu",
            Source::Rest => "rest",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "system" => Some(Source::System),
            "cpu" => Some(Source::Cpu),
            "rest" => Some(Source::Rest),
            _ => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One power reading: `timestamp,source,watts`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSample {
    /// Seconds since the trace epoch, millisecond resolution.
    pub timestamp_s: f64,
    pub source: Source,
    pub watts: f64,
}

/// One function execution: `function_id,start,end,warm`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRecord {
    pub function_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub warm: bool,
}

impl InvocationRecord {
    pub fn latency_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Non-function principals whose CPU share is tracked alongside functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Principal {
    /// The FaaS control plane (scheduler, invoker, gateway).
    ControlPlane,
    /// Operating-system background activity.
    Os,
    /// All processes combined; the denominator for shares.
    SystemWide,
}

impl Principal {
    pub fn as_str(self) -> &'static str {
        match self {
            Principal::ControlPlane => "cp",
            Principal::Os => "os",
            Principal::SystemWide => "system",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "cp" => Some(Principal::ControlPlane),
            "os" => Some(Principal::Os),
            "system" => Some(Principal::SystemWide),
            _ => None,
        }
    }
}

/// One CPU-utilization reading: `timestamp,principal,cpu_percent`.
///
/// Percentages are in core-percent (one busy core = 100), so values above
/// 100 are normal on multi-core hosts.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationSample {
    pub timestamp_s: f64,
    pub principal: Principal,
    pub cpu_percent: f64,
}

/// Per-interval hardware-counter deltas for one function:
/// `timestamp,function_id,c0,c1,c2,c3`.
///
/// Counter order: unhalted core cycles, unhalted reference cycles,
/// LLC misses, instructions retired.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterSample {
    pub timestamp_s: f64,
    pub function_id: String,
    pub counters: [u64; 4],
}

/// Sidecar metadata stored next to each trace as `<name>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    /// Wall-clock epoch the relative timestamps count from.
    pub epoch_unix_s: f64,
    /// Intended spacing between samples, seconds.
    pub nominal_period_s: f64,
    /// Human-readable description of the recorder.
    pub source_label: String,
}

/// Inter-arrival-time distribution for one function's invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IatDistribution {
    /// Fixed spacing.
    Constant { period_s: f64 },
    /// Poisson arrivals.
    Exponential { mean_s: f64 },
    /// Heavy-tailed arrivals, parameterized by mean and coefficient of
    /// variation like the latency model.
    Lognormal { mean_s: f64, cov: f64 },
    /// Uniform spacing on [lo_s, hi_s].
    Uniform { lo_s: f64, hi_s: f64 },
    /// `burst_size` arrivals spaced `within_s` apart, then a `gap_s` pause.
    Bursty { burst_size: u32, within_s: f64, gap_s: f64 },
}

impl IatDistribution {
    /// Cheap structural validation; distribution draws are clamped positive
    /// at sampling time.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            IatDistribution::Constant { period_s } => period_s > 0.0,
            IatDistribution::Exponential { mean_s } => mean_s > 0.0,
            IatDistribution::Lognormal { mean_s, cov } => mean_s > 0.0 && cov >= 0.0,
            IatDistribution::Uniform { lo_s, hi_s } => lo_s > 0.0 && hi_s >= lo_s,
            IatDistribution::Bursty { burst_size, within_s, gap_s } => {
                burst_size > 0 && within_s > 0.0 && gap_s > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("degenerate IAT distribution: {self:?}")))
        }
    }
}

/// One function's workload parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub function_id: String,
    /// Mean execution latency, seconds.
    pub mean_latency_s: f64,
    /// Coefficient of variation of the lognormal latency model.
    pub latency_cov: f64,
    pub iat: IatDistribution,
    /// First arrival is drawn starting from this offset; lets a scenario
    /// introduce a function partway through the trace.
    #[serde(default)]
    pub start_offset_s: f64,
    /// No arrivals after this point, if set; models a function retiring.
    #[serde(default)]
    pub stop_s: Option<f64>,
}

/// Workload description: the functions, how long to run, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub functions: Vec<FunctionSpec>,
    pub duration_s: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Invalid("workload duration must be positive".into()));
        }
        if self.functions.is_empty() {
            return Err(Error::Invalid("workload has no functions".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.functions {
            if f.function_id.is_empty() || f.function_id.contains(',') {
                return Err(Error::Invalid(format!("bad function id {:?}", f.function_id)));
            }
            if matches!(f.function_id.as_str(), "cp" | "os" | "system" | "idle") {
                return Err(Error::Invalid(format!(
                    "function id {:?} collides with a reserved principal name",
                    f.function_id
                )));
            }
            if !seen.insert(&f.function_id) {
                return Err(Error::Invalid(format!("duplicate function id {:?}", f.function_id)));
            }
            if !(f.mean_latency_s > 0.0) || !(f.latency_cov >= 0.0) {
                return Err(Error::Invalid(format!(
                    "function {:?} needs positive mean latency and nonnegative CoV",
                    f.function_id
                )));
            }
            if f.start_offset_s < 0.0 {
                return Err(Error::Invalid(format!(
                    "function {:?} has negative start offset",
                    f.function_id
                )));
            }
            f.iat.validate()?;
        }
        Ok(())
    }
}

/// Round a timestamp to millisecond resolution.
pub fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Shortest decimal representation that parses back to the same f64;
/// used for every float written to disk so reruns are byte-identical.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Path of the metadata sidecar for a trace file: `power.csv` → `power.meta.json`.
pub fn meta_path(trace_path: &Path) -> PathBuf {
    trace_path.with_extension("meta.json")
}

pub fn write_meta(trace_path: &Path, meta: &TraceMeta) -> Result<()> {
    let p = meta_path(trace_path);
    let body = serde_json::to_string_pretty(meta)?;
    fs::write(&p, body + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_meta(trace_path: &Path) -> Result<TraceMeta> {
    let p = meta_path(trace_path);
    let body = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&body)?)
}

// ---------------------------------------------------------------------------
// CSV plumbing

const POWER_HEADER: &str = "timestamp,source,watts";
const INVOCATION_HEADER: &str = "function_id,start,end,warm";
const UTILIZATION_HEADER: &str = "timestamp,principal,cpu_percent";
const COUNTER_HEADER: &str = "timestamp,function_id,c0,c1,c2,c3";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn record_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::InvalidRecord { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Split a CSV body into (line_number, fields) rows after checking the header.
fn csv_rows<'a>(
    path: &Path,
    body: &'a str,
    header: &str,
    ncols: usize,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == header => {}
        Some((_, h)) => {
            return Err(parse_err(path, 1, format!("expected header {header:?}, found {h:?}")))
        }
        None => return Err(parse_err(path, 1, format!("missing header {header:?}"))),
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != ncols {
            return Err(parse_err(
                path,
                line,
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        rows.push((line, fields));
    }
    Ok(rows)
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what}: {field:?}")))?;
    if !v.is_finite() {
        return Err(record_err(path, line, format!("{what} must be finite, got {field:?}")));
    }
    Ok(v)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_power_csv(path: &Path) -> Result<Vec<PowerSample>> {
    let body = read_file(path)?;
    let mut out = Vec::new();
    let mut last_ts: BTreeMap<Source, f64> = BTreeMap::new();
    for (line, f) in csv_rows(path, &body, POWER_HEADER, 3)? {
        let timestamp_s = parse_f64(path, line, f[0], "timestamp")?;
        let source = Source::parse(f[1].trim())
            .ok_or_else(|| parse_err(path, line, format!("unknown source {:?}", f[1])))?;
        let watts = parse_f64(path, line, f[2], "watts")?;
        if watts < 0.0 {
            return Err(record_err(path, line, format!("negative watts: {watts}")));
        }
        if let Some(&prev) = last_ts.get(&source) {
            if timestamp_s < prev {
                return Err(record_err(
                    path,
                    line,
                    format!("out-of-order timestamp {timestamp_s} after {prev} for {source}"),
                ));
            }
        }
        last_ts.insert(source, timestamp_s);
        out.push(PowerSample { timestamp_s, source, watts });
    }
    Ok(out)
}

pub fn write_power_csv(path: &Path, samples: &[PowerSample]) -> Result<()> {
    let mut body = String::from(POWER_HEADER);
    body.push('\n');
    for s in samples {
        body.push_str(&fmt_f64(s.timestamp_s));
        body.push(',');
        body.push_str(s.source.as_str());
        body.push(',');
        body.push_str(&fmt_f64(s.watts));
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_invocation_csv(path: &Path) -> Result<Vec<InvocationRecord>> {
    let body = read_file(path)?;
    let mut out: Vec<InvocationRecord> = Vec::new();
    for (line, f) in csv_rows(path, &body, INVOCATION_HEADER, 4)? {
        let function_id = f[0].trim().to_string();
        if function_id.is_empty() {
            return Err(record_err(path, line, "empty function id"));
        }
        let start_s = parse_f64(path, line, f[1], "start")?;
        let end_s = parse_f64(path, line, f[2], "end")?;
        let warm = match f[3].trim() {
            "true" => true,
            "false" => false,
            other => return Err(parse_err(path, line, format!("bad warm flag {other:?}"))),
        };
        if end_s <= start_s {
            return Err(record_err(
                path,
                line,
                format!("latency must be positive: start {start_s}, end {end_s}"),
            ));
        }
        if let Some(prev) = out.last() {
            if start_s < prev.start_s {
                return Err(record_err(
                    path,
                    line,
                    format!("out-of-order start {start_s} after {}", prev.start_s),
                ));
            }
        }
        out.push(InvocationRecord { function_id, start_s, end_s, warm });
    }
    Ok(out)
}

pub fn write_invocation_csv(path: &Path, records: &[InvocationRecord]) -> Result<()> {
    let mut body = String::from(INVOCATION_HEADER);
    body.push('\n');
    for r in records {
        body.push_str(&r.function_id);
        body.push(',');
        body.push_str(&fmt_f64(r.start_s));
        body.push(',');
        body.push_str(&fmt_f64(r.end_s));
        body.push(',');
        body.push_str(if r.warm { "true" } else { "false" });
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_utilization_csv(path: &Path) -> Result<Vec<UtilizationSample>> {
    let body = read_file(path)?;
    let mut out: Vec<UtilizationSample> = Vec::new();
    for (line, f) in csv_rows(path, &body, UTILIZATION_HEADER, 3)? {
        let timestamp_s = parse_f64(path, line, f[0], "timestamp")?;
        let principal = Principal::parse(f[1].trim())
            .ok_or_else(|| parse_err(path, line, format!("unknown principal {:?}", f[1])))?;
        let cpu_percent = parse_f64(path, line, f[2], "cpu_percent")?;
        if cpu_percent < 0.0 {
            return Err(record_err(path, line, format!("negative cpu_percent: {cpu_percent}")));
        }
        if let Some(prev) = out.last() {
            if timestamp_s < prev.timestamp_s {
                return Err(record_err(
                    path,
                    line,
                    format!("out-of-order timestamp {timestamp_s} after {}", prev.timestamp_s),
                ));
            }
        }
        out.push(UtilizationSample { timestamp_s, principal, cpu_percent });
    }
    Ok(out)
}

pub fn write_utilization_csv(path: &Path, samples: &[UtilizationSample]) -> Result<()> {
    let mut body = String::from(UTILIZATION_HEADER);
    body.push('\n');
    for s in samples {
        body.push_str(&fmt_f64(s.timestamp_s));
        body.push(',');
        body.push_str(s.principal.as_str());
        body.push(',');
        body.push_str(&fmt_f64(s.cpu_percent));
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_counter_csv(path: &Path) -> Result<Vec<CounterSample>> {
    let body = read_file(path)?;
    let mut out: Vec<CounterSample> = Vec::new();
    for (line, f) in csv_rows(path, &body, COUNTER_HEADER, 6)? {
        let timestamp_s = parse_f64(path, line, f[0], "timestamp")?;
        let function_id = f[1].trim().to_string();
        if function_id.is_empty() {
            return Err(record_err(path, line, "empty function id"));
        }
        let mut counters = [0u64; 4];
        for (k, c) in counters.iter_mut().enumerate() {
            *c = f[2 + k]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad counter c{k}: {:?}", f[2 + k])))?;
        }
        if let Some(prev) = out.last() {
            if timestamp_s < prev.timestamp_s {
                return Err(record_err(
                    path,
                    line,
                    format!("out-of-order timestamp {timestamp_s} after {}", prev.timestamp_s),
                ));
            }
        }
        out.push(CounterSample { timestamp_s, function_id, counters });
    }
    Ok(out)
}

pub fn write_counter_csv(path: &Path, samples: &[CounterSample]) -> Result<()> {
    let mut body = String::from(COUNTER_HEADER);
    body.push('\n');
    for s in samples {
        body.push_str(&fmt_f64(s.timestamp_s));
        body.push(',');
        body.push_str(&s.function_id);
        for c in s.counters {
            body.push(',');
            body.push_str(&c.to_string());
        }
        body.push('\n');
    }
    write_file(path, &body)
}

// ---------------------------------------------------------------------------
// Signal arithmetic on sample-and-hold power traces

/// Integral (joules) of the sample-and-hold signal over [a, b).
///
/// The signal holds each sample's value until the next sample; before the
/// first sample it holds the first value, after the last it holds the last.
/// All samples must share one source.
pub fn sh_integral(samples: &[PowerSample], a: f64, b: f64) -> f64 {
    if samples.is_empty() || b <= a {
        return 0.0;
    }
    // Index of the sample whose value holds at time `a`.
    let mut i = match samples.binary_search_by(|s| s.timestamp_s.partial_cmp(&a).unwrap()) {
        Ok(k) => k,
        Err(0) => 0,
        Err(k) => k - 1,
    };
    // Skip forward over ties so the last sample at a given timestamp wins.
    while i + 1 < samples.len() && samples[i + 1].timestamp_s <= a {
        i += 1;
    }
    let mut t = a;
    let mut total = 0.0;
    loop {
        let seg_end = if i + 1 < samples.len() { samples[i + 1].timestamp_s.min(b) } else { b };
        if seg_end > t {
            total += samples[i].watts * (seg_end - t);
            t = seg_end;
        }
        if t >= b || i + 1 >= samples.len() {
            break;
        }
        i += 1;
    }
    total
}

/// Resample a single-source power trace onto a uniform grid.
///
/// The grid is floor-aligned to the period; each output sample at a bin
/// start carries the time-weighted mean of the sample-and-hold input over
/// that bin, so bins without input samples hold the previous value and
/// step-signal energy is preserved exactly.
pub fn resample(samples: &[PowerSample], period_s: f64) -> Result<Vec<PowerSample>> {
    if samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if !(period_s > 0.0) {
        return Err(Error::Invalid(format!("resample period must be positive, got {period_s}")));
    }
    let source = samples[0].source;
    debug_assert!(samples.iter().all(|s| s.source == source), "resample expects one source");
    let t0 = samples[0].timestamp_s;
    let t_last = samples[samples.len() - 1].timestamp_s;
    let grid_start = (t0 / period_s).floor() * period_s;
    let n_bins = ((t_last - grid_start) / period_s).floor() as usize + 1;
    let mut out = Vec::with_capacity(n_bins);
    for i in 0..n_bins {
        let lo = grid_start + i as f64 * period_s;
        let hi = lo + period_s;
        let mean = sh_integral(samples, lo, hi) / period_s;
        out.push(PowerSample { timestamp_s: round_ms(lo), source, watts: mean });
    }
    Ok(out)
}

/// Group invocations by function id, preserving start order within each.
pub fn by_function(records: &[InvocationRecord]) -> BTreeMap<String, Vec<InvocationRecord>> {
    let mut map: BTreeMap<String, Vec<InvocationRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.function_id.clone()).or_default().push(r.clone());
    }
    map
}

/// Keep only samples of one source.
pub fn select_source(samples: &[PowerSample], source: Source) -> Vec<PowerSample> {
    samples.iter().filter(|s| s.source == source).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn parses_single_power_row() {
        let d = tmp();
        let p = d.path().join("power.csv");
        std::fs::write(&p, "timestamp,source,watts\n0.000,system,95.0\n").unwrap();
        let t = read_power_csv(&p).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].source, Source::System);
        assert_eq!(t[0].watts, 95.0);
    }

    #[test]
    fn header_only_is_empty_not_error() {
        let d = tmp();
        let p = d.path().join("power.csv");
        std::fs::write(&p, "timestamp,source,watts\n").unwrap();
        assert!(read_power_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn negative_watts_rejected_with_line() {
        let d = tmp();
        let p = d.path().join("power.csv");
        std::fs::write(&p, "timestamp,source,watts\n0,system,5\n1,system,-1\n").unwrap();
        match read_power_csv(&p) {
            Err(Error::InvalidRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_rejected_per_source() {
        let d = tmp();
        let p = d.path().join("power.csv");
        // Interleaved sources individually ordered: fine.
        std::fs::write(&p, "timestamp,source,watts\n0,system,5\n0,cpu,2\n1,system,5\n1,cpu,2\n")
            .unwrap();
        assert_eq!(read_power_csv(&p).unwrap().len(), 4);
        // Regression within one source: error.
        std::fs::write(&p, "timestamp,source,watts\n1,system,5\n0,system,5\n").unwrap();
        assert!(matches!(read_power_csv(&p), Err(Error::InvalidRecord { line: 3, .. })));
    }

    #[test]
    fn wrong_header_rejected() {
        let d = tmp();
        let p = d.path().join("power.csv");
        std::fs::write(&p, "time,source,watts\n").unwrap();
        assert!(matches!(read_power_csv(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn power_round_trip_and_byte_identical_rewrite() {
        let d = tmp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = 0.0;
        let mut samples = Vec::new();
        for _ in 0..2000 {
            t += round_ms(rng.gen_range(0.001..0.5));
            samples.push(PowerSample {
                timestamp_s: round_ms(t),
                source: Source::System,
                watts: rng.gen_range(0.0..200.0),
            });
        }
        let p1 = d.path().join("a.csv");
        let p2 = d.path().join("b.csv");
        write_power_csv(&p1, &samples).unwrap();
        let back = read_power_csv(&p1).unwrap();
        assert_eq!(back, samples);
        write_power_csv(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn invocation_round_trip_and_validation() {
        let d = tmp();
        let p = d.path().join("inv.csv");
        let recs = vec![
            InvocationRecord { function_id: "dd".into(), start_s: 0.5, end_s: 1.2, warm: false },
            InvocationRecord { function_id: "aes".into(), start_s: 0.75, end_s: 2.15, warm: true },
        ];
        write_invocation_csv(&p, &recs).unwrap();
        assert_eq!(read_invocation_csv(&p).unwrap(), recs);

        std::fs::write(&p, "function_id,start,end,warm\ndd,2.0,2.0,true\n").unwrap();
        assert!(matches!(read_invocation_csv(&p), Err(Error::InvalidRecord { line: 2, .. })));

        std::fs::write(&p, "function_id,start,end,warm\ndd,2.0,3.0,yes\n").unwrap();
        assert!(matches!(read_invocation_csv(&p), Err(Error::Parse { line: 2, .. })));

        std::fs::write(&p, "function_id,start,end,warm\ndd,2.0,3.0,true\ndd,1.0,4.0,true\n")
            .unwrap();
        assert!(matches!(read_invocation_csv(&p), Err(Error::InvalidRecord { line: 3, .. })));
    }

    #[test]
    fn utilization_and_counter_round_trip() {
        let d = tmp();
        let up = d.path().join("util.csv");
        let us = vec![
            UtilizationSample { timestamp_s: 0.0, principal: Principal::ControlPlane, cpu_percent: 7.5 },
            UtilizationSample { timestamp_s: 0.0, principal: Principal::SystemWide, cpu_percent: 240.0 },
            UtilizationSample { timestamp_s: 1.0, principal: Principal::Os, cpu_percent: 3.25 },
        ];
        write_utilization_csv(&up, &us).unwrap();
        assert_eq!(read_utilization_csv(&up).unwrap(), us);

        let cp = d.path().join("ctr.csv");
        let cs = vec![
            CounterSample { timestamp_s: 0.0, function_id: "dd".into(), counters: [1, 2, 3, 4] },
            CounterSample {
                timestamp_s: 1.0,
                function_id: "dd".into(),
                counters: [4_000_000_000, 0, 17, u64::MAX],
            },
        ];
        write_counter_csv(&cp, &cs).unwrap();
        assert_eq!(read_counter_csv(&cp).unwrap(), cs);

        // Negative counters cannot parse as unsigned deltas.
        std::fs::write(&cp, "timestamp,function_id,c0,c1,c2,c3\n0,dd,-5,0,0,0\n").unwrap();
        assert!(matches!(read_counter_csv(&cp), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn meta_sidecar_round_trip() {
        let d = tmp();
        let trace = d.path().join("power.csv");
        assert_eq!(meta_path(&trace), d.path().join("power.meta.json"));
        let meta = TraceMeta {
            epoch_unix_s: 1_700_000_000.25,
            nominal_period_s: 0.25,
            source_label: "synthetic wall meter".into(),
        };
        write_meta(&trace, &meta).unwrap();
        assert_eq!(read_meta(&trace).unwrap(), meta);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let d = tmp();
        // Writing to the directory itself must fail.
        let err = write_power_csv(d.path(), &[]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn resample_constant_signal_is_identity_valued() {
        let samples: Vec<PowerSample> = (0..40)
            .map(|i| PowerSample {
                timestamp_s: i as f64 * 0.25,
                source: Source::System,
                watts: 50.0,
            })
            .collect();
        let out = resample(&samples, 1.0).unwrap();
        assert_eq!(out.len(), 10);
        for (i, s) in out.iter().enumerate() {
            assert_eq!(s.timestamp_s, i as f64);
            assert!((s.watts - 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_takes_time_weighted_mean() {
        let samples = vec![
            PowerSample { timestamp_s: 0.0, source: Source::System, watts: 0.0 },
            PowerSample { timestamp_s: 0.5, source: Source::System, watts: 100.0 },
        ];
        let out = resample(&samples, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].watts - 50.0).abs() < 1e-12);
    }

    #[test]
    fn resample_holds_last_value_across_gaps() {
        let samples = vec![
            PowerSample { timestamp_s: 0.0, source: Source::System, watts: 20.0 },
            PowerSample { timestamp_s: 4.0, source: Source::System, watts: 80.0 },
        ];
        let out = resample(&samples, 1.0).unwrap();
        assert_eq!(out.len(), 5);
        for s in &out[..4] {
            assert!((s.watts - 20.0).abs() < 1e-12);
        }
        assert!((out[4].watts - 80.0).abs() < 1e-12);
    }

    #[test]
    fn resample_preserves_step_signal_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        let mut t = 0.0;
        for _ in 0..500 {
            samples.push(PowerSample {
                timestamp_s: round_ms(t),
                source: Source::System,
                watts: rng.gen_range(0.0..150.0),
            });
            t += round_ms(rng.gen_range(0.05..0.9));
        }
        let period = 1.0;
        let out = resample(&samples, period).unwrap();
        let grid_span_end = out.last().unwrap().timestamp_s + period;
        let input_energy = sh_integral(&samples, 0.0, grid_span_end);
        let output_energy: f64 = out.iter().map(|s| s.watts * period).sum();
        assert!(
            (input_energy - output_energy).abs() < 1e-6,
            "energy drifted: {input_energy} vs {output_energy}"
        );
    }

    #[test]
    fn sh_integral_handles_bounds_outside_samples() {
        let samples = vec![
            PowerSample { timestamp_s: 1.0, source: Source::System, watts: 10.0 },
            PowerSample { timestamp_s: 2.0, source: Source::System, watts: 30.0 },
        ];
        // Backward hold before the first sample, forward hold after the last.
        assert!((sh_integral(&samples, 0.0, 1.0) - 10.0).abs() < 1e-12);
        assert!((sh_integral(&samples, 1.5, 2.5) - 5.0 - 15.0).abs() < 1e-12);
        assert_eq!(sh_integral(&samples, 3.0, 3.0), 0.0);
    }

    #[test]
    fn workload_spec_json_round_trip_and_unknown_field() {
        let json = r#"{
          "functions": [
            { "function_id": "dd", "mean_latency_s": 0.7, "latency_cov": 0.1,
              "iat": { "kind": "exponential", "mean_s": 2.0 } }
          ],
          "duration_s": 300.0,
          "seed": 42
        }"#;
        let spec: WorkloadSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.functions[0].start_offset_s, 0.0);
        let back: WorkloadSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);

        let bad = json.replace("\"seed\": 42", "\"seed\": 42, \"extra\": 1");
        assert!(serde_json::from_str::<WorkloadSpec>(&bad).is_err());
    }

    #[test]
    fn workload_spec_validation_catches_degenerates() {
        let mut spec = WorkloadSpec {
            functions: vec![FunctionSpec {
                function_id: "f".into(),
                mean_latency_s: 1.0,
                latency_cov: 0.1,
                iat: IatDistribution::Constant { period_s: 1.0 },
                start_offset_s: 0.0,
                stop_s: None,
            }],
            duration_s: 10.0,
            seed: 1,
        };
        spec.validate().unwrap();
        spec.duration_s = 0.0;
        assert!(spec.validate().is_err());
        spec.duration_s = 10.0;
        spec.functions[0].iat = IatDistribution::Uniform { lo_s: 0.0, hi_s: 1.0 };
        assert!(spec.validate().is_err());
        spec.functions[0].iat = IatDistribution::Constant { period_s: 1.0 };
        spec.functions.push(spec.functions[0].clone());
        assert!(spec.validate().is_err(), "duplicate ids must be rejected");
    }
}

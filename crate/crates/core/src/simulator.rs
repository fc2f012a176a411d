//! Workload and power-signal synthesis with known ground truth.
//!
//! The generating model is additive: system power is idle draw plus the
//! active draw of every running invocation plus control-plane work smeared
//! around invocation starts. The true signal is piecewise constant; it is
//! averaged onto the meter grid, then degraded the way real meters degrade
//! it — Gaussian jitter, quantization to the meter's resolution, and a
//! constant temporal skew. Everything is seeded, and every function draws
//! from its own RNG substream, so removing one function from a scenario
//! leaves every other function's arrivals and latencies bit-identical —
//! which is what makes paired marginal-energy ablations exact.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::trace::{
    round_ms, CounterSample, InvocationRecord, IatDistribution, PowerSample, Principal, Source,
    UtilizationSample, WorkloadSpec,
};
use crate::{Error, Result};

/// Reserved id under which system-wide counter totals appear in counter
/// traces, alongside per-function rows.
pub const SYSTEM_COUNTER_ID: &str = "system";
/// Reserved id for control-plane counter rows.
pub const CP_COUNTER_ID: &str = "cp";

/// Per-core, per-second counter capacity used for the synthetic system-wide
/// totals: unhalted core cycles, reference cycles, LLC misses, instructions.
const CORE_COUNTER_RATE: [f64; 4] = [3.2e9, 2.4e9, 1.2e7, 3.6e9];
/// A fully busy core is assumed to draw this much dynamic power, fixing the
/// counts-per-joule scale of synthetic counters.
const NOMINAL_CORE_WATTS: f64 = 30.0;

/// Hidden parameters the estimation pipeline must recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Baseline draw with nothing running.
    pub idle_watts: f64,
    /// Active draw of one running invocation, per function.
    pub per_function_watts: BTreeMap<String, f64>,
    /// Control-plane energy spent per invocation.
    #[serde(default)]
    pub control_plane_joules_per_invocation: f64,
    /// Standard deviation of i.i.d. Gaussian meter noise.
    #[serde(default)]
    pub noise_std_watts: f64,
    /// Meter resolution; readings are rounded to multiples of this.
    #[serde(default)]
    pub quantization_step_watts: f64,
    /// Meter lag relative to true time (positive = meter reports late).
    #[serde(default)]
    pub injected_skew_s: f64,
}

impl GroundTruth {
    pub fn validate(&self, workload: &WorkloadSpec) -> Result<()> {
        for v in [
            self.idle_watts,
            self.control_plane_joules_per_invocation,
            self.noise_std_watts,
            self.quantization_step_watts,
        ] {
            if !(v >= 0.0) {
                return Err(Error::Invalid(format!("negative ground-truth parameter: {v}")));
            }
        }
        if self.injected_skew_s.abs() > 10.0 {
            return Err(Error::Invalid(format!(
                "injected skew {} s out of ±10 s range",
                self.injected_skew_s
            )));
        }
        for (id, w) in &self.per_function_watts {
            if !(*w >= 0.0) {
                return Err(Error::Invalid(format!("negative watts for {id:?}")));
            }
        }
        for f in &workload.functions {
            if !self.per_function_watts.contains_key(&f.function_id) {
                return Err(Error::UnknownFunction(f.function_id.clone()));
            }
        }
        Ok(())
    }
}

/// Knobs of the synthesis itself, as opposed to the hidden truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisOptions {
    /// Meter sample period, seconds (0.25 mirrors a desk wall meter).
    pub period_s: f64,
    /// Max invocations running at once; excess queues FCFS. None = unbounded.
    pub concurrency_cap: Option<usize>,
    /// Fraction of dynamic power drawn by the CPU package.
    pub cpu_fraction: f64,
    /// Control-plane energy is smeared over this window straddling each start.
    pub cp_window_s: f64,
    /// Active-power coefficient the control-plane utilization column encodes;
    /// must exceed the peak smeared control-plane draw.
    pub cp_active_watts: f64,
    /// Constant OS background utilization, core-percent.
    pub os_cpu_percent: f64,
    /// Cores on the host, for system-wide utilization and counter capacity.
    pub cores: u32,
    /// Emit the RAPL-analog CPU power trace.
    pub emit_cpu_trace: bool,
    /// Emit per-function hardware-counter deltas.
    pub emit_counters: bool,
    /// Sub-linear concurrency scaling: k instances of one function draw
    /// watts × k^(1−discount). 0 = additive (default, and the modeled case).
    pub concurrency_discount: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            period_s: 1.0,
            concurrency_cap: None,
            cpu_fraction: 0.8,
            cp_window_s: 0.5,
            cp_active_watts: 5.0,
            os_cpu_percent: 2.0,
            cores: 8,
            emit_cpu_trace: true,
            emit_counters: true,
            concurrency_discount: 0.0,
        }
    }
}

impl SynthesisOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.period_s > 0.0) {
            return Err(Error::Invalid("sample period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cpu_fraction) {
            return Err(Error::Invalid("cpu_fraction must lie in [0, 1]".into()));
        }
        if !(self.cp_window_s > 0.0) || !(self.cp_active_watts > 0.0) {
            return Err(Error::Invalid("control-plane window and watts must be positive".into()));
        }
        if !(self.os_cpu_percent >= 0.0) {
            return Err(Error::Invalid("os_cpu_percent must be nonnegative".into()));
        }
        if self.cores == 0 {
            return Err(Error::Invalid("need at least one core".into()));
        }
        if !(0.0..1.0).contains(&self.concurrency_discount) {
            return Err(Error::Invalid("concurrency_discount must lie in [0, 1)".into()));
        }
        if self.concurrency_cap == Some(0) {
            return Err(Error::Invalid("concurrency cap of 0 admits nothing".into()));
        }
        Ok(())
    }
}

/// A complete scenario: what runs, what the hidden truth is, how it is
/// measured. This is the JSON config the CLI consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    /// Label carried into reports; defaults to "scenario".
    #[serde(default)]
    pub name: Option<String>,
    pub workload: WorkloadSpec,
    pub truth: GroundTruth,
    #[serde(default)]
    pub synthesis: SynthesisOptions,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.truth.validate(&self.workload)?;
        self.synthesis.validate()?;
        if self.truth.control_plane_joules_per_invocation > 0.0
            && self.synthesis.os_cpu_percent <= 0.0
        {
            return Err(Error::Invalid(
                "control-plane modeling needs os_cpu_percent > 0 to anchor utilization".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<SimScenario> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: SimScenario = serde_json::from_str(&body)?;
        sc.validate()?;
        Ok(sc)
    }
}

/// Everything one synthesis produces. `truth` rides along for validation
/// only; estimation modules must never read it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub invocations: Vec<InvocationRecord>,
    pub system_power: Vec<PowerSample>,
    pub cpu_power: Option<Vec<PowerSample>>,
    pub utilization: Vec<UtilizationSample>,
    pub counters: Option<Vec<CounterSample>>,
    pub truth: GroundTruth,
    pub period_s: f64,
    /// Signal span; covers every invocation and control-plane window.
    pub duration_s: f64,
}

/// Which shares to fold into the per-invocation ground-truth footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FootprintPolicy {
    pub include_cp: bool,
    pub include_idle: bool,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(s: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Independent RNG substream per (seed, label); function order and presence
/// in a scenario cannot perturb another function's draws.
pub(crate) fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label))
}

fn lognormal_params(mean: f64, cov: f64) -> (f64, f64) {
    let sigma2 = (1.0 + cov * cov).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    (mu, sigma2.sqrt())
}

fn sample_latency(rng: &mut ChaCha8Rng, mean: f64, cov: f64) -> f64 {
    if cov <= 0.0 {
        return mean;
    }
    let (mu, sigma) = lognormal_params(mean, cov);
    let d = LogNormal::new(mu, sigma).expect("lognormal params");
    d.sample(rng).max(1e-3)
}

/// Draw the next inter-arrival gap. `index` is the arrival's ordinal for
/// the function, which the bursty pattern needs.
fn sample_iat(rng: &mut ChaCha8Rng, iat: &IatDistribution, index: u64) -> f64 {
    let gap = match *iat {
        IatDistribution::Constant { period_s } => period_s,
        IatDistribution::Exponential { mean_s } => {
            Exp::new(1.0 / mean_s).expect("exp rate").sample(rng)
        }
        IatDistribution::Lognormal { mean_s, cov } => {
            if cov <= 0.0 {
                mean_s
            } else {
                let (mu, sigma) = lognormal_params(mean_s, cov);
                LogNormal::new(mu, sigma).expect("lognormal params").sample(rng)
            }
        }
        IatDistribution::Uniform { lo_s, hi_s } => {
            if hi_s > lo_s {
                rng.gen_range(lo_s..hi_s)
            } else {
                lo_s
            }
        }
        IatDistribution::Bursty { burst_size, within_s, gap_s } => {
            if index % burst_size as u64 == 0 {
                gap_s
            } else {
                within_s
            }
        }
    };
    gap.max(1e-3)
}

/// Draw every function's arrivals and latencies. Arrivals start at the
/// function's offset and advance by IAT draws; invocations whose execution
/// would outlive the trace are censored so the whole workload fits in
/// [0, duration]. Deterministic under `spec.seed`.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<InvocationRecord>> {
    spec.validate()?;
    let mut records: Vec<InvocationRecord> = Vec::new();
    for f in &spec.functions {
        let mut rng = substream(spec.seed, &f.function_id);
        let horizon = f.stop_s.unwrap_or(spec.duration_s).min(spec.duration_s);
        let mut t = f.start_offset_s;
        let mut index: u64 = 0;
        let mut warm = false;
        while t < horizon {
            let latency = sample_latency(&mut rng, f.mean_latency_s, f.latency_cov);
            let start = round_ms(t);
            let end = round_ms(t + latency);
            if end <= spec.duration_s && end > start {
                records.push(InvocationRecord {
                    function_id: f.function_id.clone(),
                    start_s: start,
                    end_s: end,
                    warm,
                });
                warm = true;
            }
            index += 1;
            t += sample_iat(&mut rng, &f.iat, index);
        }
    }
    records.sort_by(|a, b| {
        a.start_s
            .partial_cmp(&b.start_s)
            .unwrap()
            .then_with(|| a.function_id.cmp(&b.function_id))
            .then_with(|| a.end_s.partial_cmp(&b.end_s).unwrap())
    });
    Ok(records)
}

/// FCFS admission under a global concurrency cap: an arrival that finds the
/// host full starts when the earliest running invocation finishes. Service
/// times are preserved; only starts shift. Without a cap this is a no-op.
fn apply_concurrency_cap(records: &[InvocationRecord], cap: usize) -> Vec<InvocationRecord> {
    use std::cmp::Reverse;
    // Earliest end times of the running set.
    let mut running: std::collections::BinaryHeap<Reverse<i64>> =
        std::collections::BinaryHeap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let arrival_ms = (r.start_s * 1000.0).round() as i64;
        let service_ms = ((r.end_s - r.start_s) * 1000.0).round() as i64;
        while let Some(&Reverse(end)) = running.peek() {
            if end <= arrival_ms && running.len() >= cap {
                running.pop();
            } else {
                break;
            }
        }
        let start_ms = if running.len() < cap {
            arrival_ms
        } else {
            let Reverse(first_free) = running.pop().unwrap();
            first_free.max(arrival_ms)
        };
        // Keep the running set tight so peeks above stay meaningful.
        while let Some(&Reverse(end)) = running.peek() {
            if end <= start_ms {
                running.pop();
            } else {
                break;
            }
        }
        let end_ms = start_ms + service_ms;
        running.push(Reverse(end_ms));
        out.push(InvocationRecord {
            function_id: r.function_id.clone(),
            start_s: start_ms as f64 / 1000.0,
            end_s: end_ms as f64 / 1000.0,
            warm: r.warm,
        });
    }
    out.sort_by(|a, b| {
        a.start_s
            .partial_cmp(&b.start_s)
            .unwrap()
            .then_with(|| a.function_id.cmp(&b.function_id))
            .then_with(|| a.end_s.partial_cmp(&b.end_s).unwrap())
    });
    out
}

/// Piecewise-constant signal over millisecond-integer time.
#[derive(Debug, Clone)]
pub(crate) struct StepFn {
    /// Value before the first breakpoint.
    initial: f64,
    /// (time_ms, value from this time on), strictly increasing times.
    breaks: Vec<(i64, f64)>,
}

impl StepFn {
    pub(crate) fn from_deltas(initial: f64, deltas: &BTreeMap<i64, f64>) -> StepFn {
        let mut breaks = Vec::with_capacity(deltas.len());
        let mut v = initial;
        for (&t, &d) in deltas {
            v += d;
            breaks.push((t, v));
        }
        StepFn { initial, breaks }
    }

    /// Integral over [lo_ms, hi_ms) in watt-seconds.
    pub(crate) fn integral(&self, lo_ms: i64, hi_ms: i64) -> f64 {
        if hi_ms <= lo_ms {
            return 0.0;
        }
        // Index of the last break at or before lo (value holding at lo).
        let mut idx = match self.breaks.binary_search_by_key(&lo_ms, |&(t, _)| t) {
            Ok(i) => i as isize,
            Err(i) => i as isize - 1,
        };
        let mut t = lo_ms;
        let mut acc = 0.0;
        loop {
            let value = if idx < 0 { self.initial } else { self.breaks[idx as usize].1 };
            let next = self
                .breaks
                .get((idx + 1) as usize)
                .map(|&(bt, _)| bt.min(hi_ms))
                .unwrap_or(hi_ms);
            acc += value * (next - t) as f64;
            t = next;
            if t >= hi_ms {
                break;
            }
            idx += 1;
        }
        acc / 1000.0
    }

    pub(crate) fn mean(&self, lo_ms: i64, hi_ms: i64) -> f64 {
        self.integral(lo_ms, hi_ms) / ((hi_ms - lo_ms) as f64 / 1000.0)
    }

    /// Fold this step's changes into a shared delta map.
    fn add_deltas_into(&self, deltas: &mut BTreeMap<i64, f64>) {
        let mut prev = self.initial;
        for &(t, v) in &self.breaks {
            *deltas.entry(t).or_insert(0.0) += v - prev;
            prev = v;
        }
    }
}

fn ms(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// Per-function power step: active draw scales as k^(1−discount) with k
/// concurrent instances; discount 0 is plain additivity.
fn function_power_step(records: &[&InvocationRecord], watts: f64, discount: f64) -> StepFn {
    let mut counts: BTreeMap<i64, i64> = BTreeMap::new();
    for r in records {
        *counts.entry(ms(r.start_s)).or_insert(0) += 1;
        *counts.entry(ms(r.end_s)).or_insert(0) -= 1;
    }
    let mut breaks = Vec::with_capacity(counts.len());
    let mut k: i64 = 0;
    for (&t, &d) in &counts {
        k += d;
        debug_assert!(k >= 0);
        let value = if k == 0 { 0.0 } else { watts * (k as f64).powf(1.0 - discount) };
        breaks.push((t, value));
    }
    dedup_breaks(&mut breaks);
    StepFn { initial: 0.0, breaks }
}

/// Concurrently-running instance count (undiscounted), for utilization.
fn function_busy_step(records: &[&InvocationRecord]) -> StepFn {
    function_power_step(records, 1.0, 0.0)
}

/// Control-plane draw: each invocation's energy spread uniformly over a
/// window straddling its start; windows clipped at t = 0 are renormalized
/// so each invocation still contributes its full energy.
fn cp_power_step(records: &[InvocationRecord], joules: f64, window_s: f64) -> StepFn {
    let mut deltas: BTreeMap<i64, f64> = BTreeMap::new();
    if joules > 0.0 {
        let half = window_s / 2.0;
        for r in records {
            let lo = ms((r.start_s - half).max(0.0));
            let hi = ms(r.start_s + half);
            let p = joules / ((hi - lo) as f64 / 1000.0);
            *deltas.entry(lo).or_insert(0.0) += p;
            *deltas.entry(hi).or_insert(0.0) -= p;
        }
    }
    StepFn::from_deltas(0.0, &deltas)
}

fn dedup_breaks(breaks: &mut Vec<(i64, f64)>) {
    breaks.dedup_by(|next, prev| {
        if next.0 == prev.0 {
            prev.1 = next.1;
            true
        } else {
            false
        }
    });
}

/// Synthesize the full measurement set for a set of executed invocations.
///
/// If a concurrency cap is configured, arrivals beyond it are queued FCFS
/// and their start times shift; everything downstream (power, utilization,
/// counters) reflects the adjusted schedule, and the returned invocation
/// trace is the adjusted one.
pub fn synthesize_power(
    invocations: &[InvocationRecord],
    truth: &GroundTruth,
    opts: &SynthesisOptions,
    seed: u64,
    min_duration_s: f64,
) -> Result<SimulatedRun> {
    opts.validate()?;
    let records = match opts.concurrency_cap {
        Some(cap) => apply_concurrency_cap(invocations, cap),
        None => invocations.to_vec(),
    };
    for r in &records {
        if !truth.per_function_watts.contains_key(&r.function_id) {
            return Err(Error::UnknownFunction(r.function_id.clone()));
        }
    }

    let period_ms = ms(opts.period_s);
    if period_ms <= 0 {
        return Err(Error::Invalid("sample period below millisecond resolution".into()));
    }

    // Signal span: workload duration, stretched to cover queue-shifted ends
    // and the trailing half control-plane window, rounded up to whole bins.
    let mut span_ms = ms(min_duration_s);
    for r in &records {
        span_ms = span_ms.max(ms(r.end_s));
        if truth.control_plane_joules_per_invocation > 0.0 {
            span_ms = span_ms.max(ms(r.start_s + opts.cp_window_s / 2.0));
        }
    }
    let n_bins = ((span_ms + period_ms - 1) / period_ms).max(1) as usize;
    let span_ms = n_bins as i64 * period_ms;

    // Per-function power steps and the control-plane smear.
    let by_fn: BTreeMap<&str, Vec<&InvocationRecord>> = {
        let mut m: BTreeMap<&str, Vec<&InvocationRecord>> = BTreeMap::new();
        for r in &records {
            m.entry(r.function_id.as_str()).or_default().push(r);
        }
        m
    };
    let mut fn_steps: BTreeMap<&str, StepFn> = BTreeMap::new();
    for (id, recs) in &by_fn {
        let watts = truth.per_function_watts[*id];
        fn_steps.insert(id, function_power_step(recs, watts, opts.concurrency_discount));
    }
    let cp_step =
        cp_power_step(&records, truth.control_plane_joules_per_invocation, opts.cp_window_s);

    // Dynamic (above-idle) power: functions + control plane.
    let mut dyn_deltas: BTreeMap<i64, f64> = BTreeMap::new();
    for step in fn_steps.values() {
        step.add_deltas_into(&mut dyn_deltas);
    }
    cp_step.add_deltas_into(&mut dyn_deltas);
    let dyn_step = StepFn::from_deltas(0.0, &dyn_deltas);

    // Meter samples: true mean per (skew-shifted) bin, then noise, then
    // quantization, then the physical floor at zero.
    let skew_ms = ms(truth.injected_skew_s);
    let mut noise_rng = substream(seed, "__meter_noise");
    let noise = if truth.noise_std_watts > 0.0 {
        Some(Normal::new(0.0, truth.noise_std_watts).expect("noise params"))
    } else {
        None
    };
    let mut system_power = Vec::with_capacity(n_bins);
    for i in 0..n_bins {
        let lo = i as i64 * period_ms - skew_ms;
        let hi = lo + period_ms;
        let mut w = truth.idle_watts + dyn_step.mean(lo, hi);
        if let Some(n) = &noise {
            w += n.sample(&mut noise_rng);
        }
        if truth.quantization_step_watts > 0.0 {
            let q = truth.quantization_step_watts;
            w = (w / q).round() * q;
        }
        system_power.push(PowerSample {
            timestamp_s: round_ms(i as f64 * opts.period_s),
            source: Source::System,
            watts: w.max(0.0),
        });
    }

    // RAPL-analog CPU trace: clean, unskewed fraction of dynamic power.
    let cpu_power = opts.emit_cpu_trace.then(|| {
        (0..n_bins)
            .map(|i| {
                let lo = i as i64 * period_ms;
                let hi = lo + period_ms;
                PowerSample {
                    timestamp_s: round_ms(i as f64 * opts.period_s),
                    source: Source::Cpu,
                    watts: opts.cpu_fraction * dyn_step.mean(lo, hi),
                }
            })
            .collect()
    });

    // Utilization: function busy time is undiscounted instance-seconds; the
    // control-plane share is constructed so that cp% / system% recovers the
    // smeared control-plane power at the cp_active_watts coefficient.
    let mut busy_deltas: BTreeMap<i64, f64> = BTreeMap::new();
    for (id, recs) in &by_fn {
        let _ = id;
        function_busy_step(recs).add_deltas_into(&mut busy_deltas);
    }
    let busy_step = StepFn::from_deltas(0.0, &busy_deltas);
    let mut utilization = Vec::with_capacity(3 * n_bins);
    for i in 0..n_bins {
        let lo = i as i64 * period_ms;
        let hi = lo + period_ms;
        let ts = round_ms(i as f64 * opts.period_s);
        let fn_pct = 100.0 * busy_step.mean(lo, hi);
        let cp_watts = cp_step.mean(lo, hi);
        let ratio = cp_watts / opts.cp_active_watts;
        if ratio >= 0.999 {
            return Err(Error::Invalid(format!(
                "control-plane draw {cp_watts:.2} W reaches cp_active_watts {:.2}; raise it",
                opts.cp_active_watts
            )));
        }
        let cp_pct = ratio * (fn_pct + opts.os_cpu_percent) / (1.0 - ratio);
        let sys_pct = fn_pct + opts.os_cpu_percent + cp_pct;
        if sys_pct > opts.cores as f64 * 100.0 {
            return Err(Error::Invalid(format!(
                "utilization {sys_pct:.0}% exceeds {} cores at t = {ts}",
                opts.cores
            )));
        }
        utilization.push(UtilizationSample {
            timestamp_s: ts,
            principal: Principal::ControlPlane,
            cpu_percent: cp_pct,
        });
        utilization.push(UtilizationSample {
            timestamp_s: ts,
            principal: Principal::Os,
            cpu_percent: opts.os_cpu_percent,
        });
        utilization.push(UtilizationSample {
            timestamp_s: ts,
            principal: Principal::SystemWide,
            cpu_percent: sys_pct,
        });
    }

    // Counters: energy-proportional with fixed rates, so per-principal CPU
    // dynamic power is exactly linear in the normalized counter vector.
    // System-wide rows carry the constant all-core capacity.
    let counters = opts.emit_counters.then(|| {
        let per_joule: [f64; 4] = CORE_COUNTER_RATE.map(|r| r / NOMINAL_CORE_WATTS);
        let mut rows = Vec::new();
        for i in 0..n_bins {
            let lo = i as i64 * period_ms;
            let hi = lo + period_ms;
            let ts = round_ms(i as f64 * opts.period_s);
            let mut principal_energy: BTreeMap<&str, f64> = BTreeMap::new();
            let cp_energy = cp_step.integral(lo, hi);
            if cp_energy > 0.0 {
                principal_energy.insert(CP_COUNTER_ID, cp_energy);
            }
            for (id, step) in &fn_steps {
                let e = step.integral(lo, hi);
                if e > 0.0 {
                    principal_energy.insert(id, e);
                }
            }
            for (id, energy) in principal_energy {
                let mut c = [0u64; 4];
                for (k, slot) in c.iter_mut().enumerate() {
                    *slot = (energy * per_joule[k]).round() as u64;
                }
                rows.push(CounterSample {
                    timestamp_s: ts,
                    function_id: id.to_string(),
                    counters: c,
                });
            }
            let mut sys = [0u64; 4];
            for (k, slot) in sys.iter_mut().enumerate() {
                *slot = (opts.cores as f64 * opts.period_s * CORE_COUNTER_RATE[k]).round() as u64;
            }
            rows.push(CounterSample {
                timestamp_s: ts,
                function_id: SYSTEM_COUNTER_ID.to_string(),
                counters: sys,
            });
        }
        rows
    });

    Ok(SimulatedRun {
        invocations: records,
        system_power,
        cpu_power,
        utilization,
        counters,
        truth: truth.clone(),
        period_s: opts.period_s,
        duration_s: span_ms as f64 / 1000.0,
    })
}

/// Generate the workload and synthesize its measurements in one step.
pub fn simulate(scenario: &SimScenario) -> Result<SimulatedRun> {
    scenario.validate()?;
    let invocations = generate_workload(&scenario.workload)?;
    synthesize_power(
        &invocations,
        &scenario.truth,
        &scenario.synthesis,
        scenario.workload.seed,
        scenario.workload.duration_s,
    )
}

/// The exact per-invocation joules the estimation pipeline should recover:
/// active watts × mean latency, plus the requested shared-energy splits —
/// the control plane's per-invocation energy, and an even per-function cut
/// of idle energy divided through each function's invocation count.
pub fn true_footprints(
    run: &SimulatedRun,
    policy: FootprintPolicy,
) -> Result<BTreeMap<String, f64>> {
    let mut latency_sum: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in &run.invocations {
        let e = latency_sum.entry(r.function_id.as_str()).or_insert((0.0, 0));
        e.0 += r.latency_s();
        e.1 += 1;
    }
    let active_functions = latency_sum.len();
    let mut out = BTreeMap::new();
    for (id, (total_latency, count)) in latency_sum {
        let watts = run
            .truth
            .per_function_watts
            .get(id)
            .ok_or_else(|| Error::UnknownFunction(id.to_string()))?;
        let mut j = watts * total_latency / count as f64;
        if policy.include_cp {
            j += run.truth.control_plane_joules_per_invocation;
        }
        if policy.include_idle {
            j += run.truth.idle_watts * run.duration_s
                / (active_functions as f64 * count as f64);
        }
        out.insert(id.to_string(), j);
    }
    Ok(out)
}

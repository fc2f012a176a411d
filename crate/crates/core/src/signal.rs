//! Signal conditioning ahead of disaggregation: estimating and correcting
//! the temporal skew between a wall-meter trace and a trusted on-host
//! reference (CPU power, or a counter-derived load series), plus periodic
//! re-estimation to catch drift.
//!
//! The estimator minimizes the mean-normalized chi-square difference
//! between the shifted meter signal and the reference,
//! Σ_t (W(t+s)/W̄ − R(t)/R̄)², over integer sample shifts within a bound,
//! then refines the winner with one parabolic interpolation step. Grid
//! search is exact at sample granularity, which is all the data supports —
//! the objective is not smooth in s below one sample period.

use crate::trace::{round_ms, CounterSample, PowerSample};
use crate::{Error, Result};

/// Largest |skew| searched for, unless the caller overrides it.
pub const DEFAULT_SKEW_BOUND_S: f64 = 5.0;
/// How often the drift monitor re-estimates.
pub const DEFAULT_DRIFT_INTERVAL_S: f64 = 120.0;
/// Signals with coefficient of variation below this carry no alignment
/// information; the estimator refuses rather than returning noise.
pub const FLAT_COV_THRESHOLD: f64 = 0.01;

/// Fewest overlapping samples a shift candidate needs to be scored.
const MIN_OVERLAP: usize = 8;

/// One skew measurement.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SkewEstimate {
    /// Meter lag: the meter sample at t+offset describes true time t.
    pub offset_s: f64,
    /// Mean per-sample chi-square at the optimum.
    pub residual: f64,
    /// Timestamp of the last sample that informed the estimate.
    pub estimated_at: f64,
}

/// Estimates emitted by the drift monitor, plus how many windows were too
/// flat to estimate on.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub estimates: Vec<SkewEstimate>,
    pub flat_windows: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

fn coefficient_of_variation(samples: &[PowerSample]) -> f64 {
    let (m, n) = mean(samples.iter().map(|s| s.watts));
    if m.abs() < f64::EPSILON || n < 2 {
        return 0.0;
    }
    let var = samples.iter().map(|s| (s.watts - m).powi(2)).sum::<f64>() / n as f64;
    var.sqrt() / m.abs()
}

/// Sample period of a uniform trace; errors if the grid is irregular.
fn uniform_period(samples: &[PowerSample], what: &str) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples { have: samples.len(), need: 2 });
    }
    let p = samples[1].timestamp_s - samples[0].timestamp_s;
    if !(p > 0.0) {
        return Err(Error::Invalid(format!("{what} is not strictly increasing")));
    }
    for w in samples.windows(2) {
        let d = w[1].timestamp_s - w[0].timestamp_s;
        if (d - p).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "{what} is not uniformly sampled (gap {d} vs period {p}); resample it first"
            )));
        }
    }
    Ok(p)
}

/// Find the meter lag s* against a reference on the same grid.
///
/// Both traces must be uniform with equal periods and grid-aligned start
/// offsets. Candidates are every integer sample shift with |s| ≤ bound;
/// the score is the per-sample chi-square over the overlap, so candidates
/// with different overlap lengths compare fairly.
pub fn estimate_skew(
    power: &[PowerSample],
    reference: &[PowerSample],
    bound_s: f64,
) -> Result<SkewEstimate> {
    if !(bound_s > 0.0) {
        return Err(Error::Invalid("skew bound must be positive".into()));
    }
    let p = uniform_period(power, "power trace")?;
    let pr = uniform_period(reference, "reference trace")?;
    if (p - pr).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "power period {p} differs from reference period {pr}; resample to a common grid"
        )));
    }
    for (samples, what) in [(power, "power"), (reference, "reference")] {
        let len_s = samples.last().unwrap().timestamp_s - samples[0].timestamp_s;
        if len_s < 2.0 * bound_s {
            return Err(Error::TraceTooShort { len_s, need_s: 2.0 * bound_s });
        }
        let cov = coefficient_of_variation(samples);
        if cov < FLAT_COV_THRESHOLD {
            let _ = what;
            return Err(Error::FlatSignal { cov, threshold: FLAT_COV_THRESHOLD });
        }
    }
    let grid_offset = (reference[0].timestamp_s - power[0].timestamp_s) / p;
    let off = grid_offset.round() as i64;
    if (grid_offset - off as f64).abs() > 1e-6 {
        return Err(Error::Invalid(
            "power and reference grids are not aligned; resample to a common grid".into(),
        ));
    }

    let (wbar, _) = mean(power.iter().map(|s| s.watts));
    let (rbar, _) = mean(reference.iter().map(|s| s.watts));
    if wbar.abs() < f64::EPSILON || rbar.abs() < f64::EPSILON {
        return Err(Error::ZeroMeanSignal);
    }

    let k_max = (bound_s / p).floor() as i64;
    let mut scores: Vec<(i64, f64)> = Vec::new();
    for k in -k_max..=k_max {
        // Power index i pairs with reference index j when i = j + off + k.
        let shift = off + k;
        let j_lo = (-shift).max(0) as usize;
        let j_hi = (power.len() as i64 - shift).min(reference.len() as i64);
        if j_hi <= j_lo as i64 || (j_hi as usize - j_lo) < MIN_OVERLAP {
            continue;
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for j in j_lo..j_hi as usize {
            let i = (j as i64 + shift) as usize;
            let d = power[i].watts / wbar - reference[j].watts / rbar;
            acc += d * d;
            n += 1;
        }
        scores.push((k, acc / n as f64));
    }
    if scores.is_empty() {
        return Err(Error::InsufficientSamples { have: power.len().min(reference.len()), need: MIN_OVERLAP });
    }
    let (best_idx, &(best_k, best_f)) = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .unwrap();

    // Parabolic refinement on the winning grid point and its immediate
    // neighbors, when they exist and form a convex triple.
    let mut offset = best_k as f64 * p;
    if best_idx > 0 && best_idx + 1 < scores.len() {
        let (k_prev, f_prev) = scores[best_idx - 1];
        let (k_next, f_next) = scores[best_idx + 1];
        if k_prev == best_k - 1 && k_next == best_k + 1 {
            let denom = f_prev - 2.0 * best_f + f_next;
            if denom > f64::EPSILON {
                let frac = 0.5 * (f_prev - f_next) / denom;
                offset = (best_k as f64 + frac.clamp(-0.5, 0.5)) * p;
            }
        }
    }
    Ok(SkewEstimate {
        offset_s: offset.clamp(-bound_s, bound_s),
        residual: best_f,
        estimated_at: power.last().unwrap().timestamp_s,
    })
}

/// Correct a measured trace by a known lag: each sample is re-stamped to
/// the true time it describes (timestamp − offset), and samples that land
/// outside the original window are dropped. Values are untouched, so
/// energy over the overlap is preserved.
pub fn apply_skew(power: &[PowerSample], offset_s: f64) -> Vec<PowerSample> {
    if power.is_empty() || offset_s == 0.0 {
        return power.to_vec();
    }
    let t_first = power[0].timestamp_s;
    let t_last = power[power.len() - 1].timestamp_s;
    power
        .iter()
        .filter_map(|s| {
            let ts = round_ms(s.timestamp_s - offset_s);
            (ts >= t_first - 1e-9 && ts <= t_last + 1e-9).then(|| PowerSample {
                timestamp_s: ts,
                source: s.source,
                watts: s.watts,
            })
        })
        .collect()
}

/// Re-estimate skew over consecutive windows of `interval_s`, emitting an
/// estimate only when it moves by more than one sample period from the
/// last emitted one. Windows too flat to estimate are counted, not fatal.
pub fn monitor_drift(
    power: &[PowerSample],
    reference: &[PowerSample],
    interval_s: f64,
    bound_s: f64,
) -> Result<DriftReport> {
    if !(interval_s >= 10.0) {
        return Err(Error::Invalid(format!(
            "drift interval {interval_s} s is too short; use at least 10 s"
        )));
    }
    let p = uniform_period(power, "power trace")?;
    let mut estimates: Vec<SkewEstimate> = Vec::new();
    let mut flat_windows = 0usize;
    let t0 = power[0].timestamp_s;
    // A sample at t describes [t, t+p), so the data extends one period past
    // the last timestamp.
    let t_end = power[power.len() - 1].timestamp_s + p;
    let mut lo = t0;
    while lo + interval_s <= t_end + 1e-9 {
        let hi = lo + interval_s;
        let wslice: Vec<PowerSample> = power
            .iter()
            .filter(|s| s.timestamp_s >= lo - 1e-9 && s.timestamp_s < hi - 1e-9)
            .cloned()
            .collect();
        let rslice: Vec<PowerSample> = reference
            .iter()
            .filter(|s| s.timestamp_s >= lo - 1e-9 && s.timestamp_s < hi - 1e-9)
            .cloned()
            .collect();
        match estimate_skew(&wslice, &rslice, bound_s) {
            Ok(est) => {
                let moved = estimates
                    .last()
                    .map_or(true, |prev| (est.offset_s - prev.offset_s).abs() > p + 1e-9);
                if moved {
                    estimates.push(est);
                }
            }
            Err(Error::FlatSignal { .. }) => flat_windows += 1,
            Err(e) => return Err(e),
        }
        lo = hi;
    }
    Ok(DriftReport { estimates, flat_windows })
}

/// Fallback alignment reference when no CPU power trace exists: the summed
/// per-principal instruction-retirement rate per interval, as a unitless
/// series. System-wide capacity rows are excluded — they are constant by
/// construction and carry no load signal.
pub fn counter_rate_reference(counters: &[CounterSample], period_s: f64) -> Vec<PowerSample> {
    use crate::simulator::SYSTEM_COUNTER_ID;
    let mut per_ts: std::collections::BTreeMap<i64, f64> = std::collections::BTreeMap::new();
    for c in counters {
        if c.function_id == SYSTEM_COUNTER_ID {
            per_ts.entry((c.timestamp_s * 1000.0).round() as i64).or_insert(0.0);
            continue;
        }
        *per_ts.entry((c.timestamp_s * 1000.0).round() as i64).or_insert(0.0) +=
            c.counters[3] as f64;
    }
    per_ts
        .into_iter()
        .map(|(t_ms, count)| PowerSample {
            timestamp_s: t_ms as f64 / 1000.0,
            source: crate::trace::Source::Cpu,
            watts: count / period_s,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, SimScenario, SynthesisOptions};
    use crate::trace::{FunctionSpec, IatDistribution, Source, WorkloadSpec};

    fn series(values: &[f64], period: f64, start: f64) -> Vec<PowerSample> {
        values
            .iter()
            .enumerate()
            .map(|(i, &w)| PowerSample {
                timestamp_s: round_ms(start + i as f64 * period),
                source: Source::System,
                watts: w,
            })
            .collect()
    }

    /// Busy/quiet pattern with enough variation to align on.
    fn pattern(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = i % 20;
                if phase < 5 {
                    80.0 + (i % 3) as f64
                } else {
                    20.0 + (i % 7) as f64
                }
            })
            .collect()
    }

    #[test]
    fn identical_signals_align_at_zero() {
        let w = series(&pattern(120), 1.0, 0.0);
        let est = estimate_skew(&w, &w, 5.0).unwrap();
        assert_eq!(est.offset_s, 0.0);
        assert!(est.residual < 1e-12);
    }

    #[test]
    fn recovers_injected_integer_shift() {
        let vals = pattern(200);
        let reference = series(&vals, 1.0, 0.0);
        // Meter lags by 3 s: meter[i] = true[i−3]; so meter value at t+3
        // matches reference at t.
        let mut lagged = vec![vals[0]; 3];
        lagged.extend_from_slice(&vals[..197]);
        let power = series(&lagged, 1.0, 0.0);
        let est = estimate_skew(&power, &reference, 5.0).unwrap();
        assert!((est.offset_s - 3.0).abs() <= 1.0, "got {}", est.offset_s);
    }

    #[test]
    fn shift_equivariance_within_one_period() {
        let vals = pattern(300);
        let reference = series(&vals, 1.0, 0.0);
        for delta in [-4i64, -2, 1, 4] {
            let lagged: Vec<f64> = (0..300)
                .map(|i| {
                    let j = i as i64 - delta;
                    vals[j.clamp(0, 299) as usize]
                })
                .collect();
            let power = series(&lagged, 1.0, 0.0);
            let est = estimate_skew(&power, &reference, 5.0).unwrap();
            assert!(
                (est.offset_s - delta as f64).abs() <= 1.0,
                "delta {delta}: got {}",
                est.offset_s
            );
        }
    }

    #[test]
    fn scaling_either_signal_changes_nothing() {
        let vals = pattern(200);
        let reference = series(&vals, 1.0, 0.0);
        let mut lagged = vec![vals[0]; 2];
        lagged.extend_from_slice(&vals[..198]);
        let power = series(&lagged, 1.0, 0.0);
        let base = estimate_skew(&power, &reference, 5.0).unwrap();
        let scaled: Vec<PowerSample> = power
            .iter()
            .map(|s| PowerSample { watts: s.watts * 7.3, ..s.clone() })
            .collect();
        let est = estimate_skew(&scaled, &reference, 5.0).unwrap();
        assert_eq!(est.offset_s, base.offset_s);
        assert!((est.residual - base.residual).abs() < 1e-9);
    }

    #[test]
    fn flat_signal_refused() {
        let reference = series(&pattern(100), 1.0, 0.0);
        let flat = series(&vec![50.0; 100], 1.0, 0.0);
        match estimate_skew(&flat, &reference, 5.0) {
            Err(Error::FlatSignal { cov, threshold }) => {
                assert!(cov < threshold);
            }
            other => panic!("expected flat-signal refusal, got {other:?}"),
        }
    }

    #[test]
    fn short_trace_refused() {
        let w = series(&pattern(8), 1.0, 0.0);
        assert!(matches!(estimate_skew(&w, &w, 5.0), Err(Error::TraceTooShort { .. })));
    }

    #[test]
    fn simulator_skew_recovered_against_cpu_reference() {
        let scenario = SimScenario {
            name: None,
            workload: WorkloadSpec {
                functions: vec![FunctionSpec {
                    function_id: "f".into(),
                    mean_latency_s: 1.5,
                    latency_cov: 0.3,
                    iat: IatDistribution::Exponential { mean_s: 4.0 },
                    start_offset_s: 0.0,
                    stop_s: None,
                }],
                duration_s: 240.0,
                seed: 5,
            },
            truth: crate::simulator::GroundTruth {
                idle_watts: 15.0,
                per_function_watts: [("f".to_string(), 40.0)].into_iter().collect(),
                control_plane_joules_per_invocation: 0.0,
                noise_std_watts: 0.5,
                quantization_step_watts: 0.0,
                injected_skew_s: 2.0,
            },
            synthesis: SynthesisOptions::default(),
        };
        let run = simulate(&scenario).unwrap();
        let cpu = run.cpu_power.as_ref().unwrap();
        let est = estimate_skew(&run.system_power, cpu, 5.0).unwrap();
        assert!(
            (est.offset_s - 2.0).abs() <= run.period_s,
            "expected ≈2.0, got {}",
            est.offset_s
        );

        // Correcting the estimated lag must reduce the variance of
        // (System − Cpu) relative to leaving the signals misaligned.
        let var_rest = |sys: &[PowerSample]| {
            let diffs: Vec<f64> = sys
                .iter()
                .filter_map(|s| {
                    cpu.iter()
                        .find(|c| c.timestamp_s == s.timestamp_s)
                        .map(|c| s.watts - c.watts)
                })
                .collect();
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64
        };
        let before = var_rest(&run.system_power);
        let corrected = apply_skew(&run.system_power, est.offset_s.round());
        let after = var_rest(&corrected);
        assert!(after < before, "variance should drop: {before} → {after}");
    }

    #[test]
    fn apply_skew_identity_and_inverse() {
        let w = series(&pattern(50), 1.0, 0.0);
        assert_eq!(apply_skew(&w, 0.0), w);
        let shifted = apply_skew(&w, 3.0);
        let back = apply_skew(&shifted, -3.0);
        // Inverse on the common support: every returned sample matches the
        // original at its timestamp.
        for s in &back {
            let orig = w.iter().find(|o| o.timestamp_s == s.timestamp_s).unwrap();
            assert_eq!(orig.watts, s.watts);
        }
        assert!(back.len() >= w.len() - 6);
    }

    #[test]
    fn drift_monitor_emits_once_for_constant_skew() {
        let vals = pattern(400);
        let reference = series(&vals, 1.0, 0.0);
        let mut lagged = vec![vals[0]; 2];
        lagged.extend_from_slice(&vals[..398]);
        let power = series(&lagged, 1.0, 0.0);
        let report = monitor_drift(&power, &reference, 100.0, 5.0).unwrap();
        assert_eq!(report.estimates.len(), 1, "{:?}", report.estimates);
        assert!((report.estimates[0].offset_s - 2.0).abs() <= 1.0);
        assert_eq!(report.flat_windows, 0);
    }

    #[test]
    fn drift_monitor_sees_skew_step() {
        let vals = pattern(600);
        let reference = series(&vals, 1.0, 0.0);
        // First half lags 1 s, second half lags 4 s.
        let lagged: Vec<f64> = (0..600)
            .map(|i| {
                let d = if i < 300 { 1 } else { 4 };
                vals[(i as i64 - d).clamp(0, 599) as usize]
            })
            .collect();
        let power = series(&lagged, 1.0, 0.0);
        let report = monitor_drift(&power, &reference, 150.0, 5.0).unwrap();
        assert_eq!(report.estimates.len(), 2, "{:?}", report.estimates);
        assert!((report.estimates[0].offset_s - 1.0).abs() <= 1.0);
        assert!((report.estimates[1].offset_s - 4.0).abs() <= 1.0);
    }

    #[test]
    fn drift_monitor_counts_flat_windows() {
        let reference = series(&pattern(200), 1.0, 0.0);
        let flat = series(&vec![60.0; 200], 1.0, 0.0);
        let report = monitor_drift(&flat, &reference, 100.0, 5.0).unwrap();
        assert!(report.estimates.is_empty());
        assert_eq!(report.flat_windows, 2);
    }

    #[test]
    fn counter_reference_tracks_load() {
        let scenario = SimScenario {
            name: None,
            workload: WorkloadSpec {
                functions: vec![FunctionSpec {
                    function_id: "f".into(),
                    mean_latency_s: 2.0,
                    latency_cov: 0.0,
                    iat: IatDistribution::Constant { period_s: 6.0 },
                    start_offset_s: 0.0,
                    stop_s: None,
                }],
                duration_s: 60.0,
                seed: 1,
            },
            truth: crate::simulator::GroundTruth {
                idle_watts: 15.0,
                per_function_watts: [("f".to_string(), 30.0)].into_iter().collect(),
                control_plane_joules_per_invocation: 0.0,
                noise_std_watts: 0.0,
                quantization_step_watts: 0.0,
                injected_skew_s: 0.0,
            },
            synthesis: SynthesisOptions::default(),
        };
        let run = simulate(&scenario).unwrap();
        let reference = counter_rate_reference(run.counters.as_ref().unwrap(), run.period_s);
        assert_eq!(reference.len(), run.system_power.len());
        // Rate must be high exactly in the bins where the function ran.
        for (r, s) in reference.iter().zip(&run.system_power) {
            assert_eq!(r.timestamp_s, s.timestamp_s);
            if s.watts > 40.0 {
                assert!(r.watts > 0.0);
            } else if s.watts < 16.0 {
                assert_eq!(r.watts, 0.0);
            }
        }
    }
}

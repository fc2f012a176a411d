//! Statistical power disaggregation: build per-interval contribution
//! matrices from invocation running times (plus utilization-normalized
//! columns for shared principals), then solve the nonnegative least-squares
//! problem min ‖CX − W‖ in its three variants — full power, idle-subtracted,
//! and the combined mode that splits CPU power out through a linear
//! hardware-counter model and disaggregates only the remainder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::numerics::{nnls, ridge_regression};
use crate::signal::{apply_skew, counter_rate_reference, estimate_skew, SkewEstimate};
use crate::trace::{
    sh_integral, CounterSample, InvocationRecord, PowerSample, Principal, UtilizationSample,
};
use crate::{Error, Result};

/// Default disaggregation interval width, seconds.
pub const DEFAULT_DELTA_S: f64 = 1.0;
/// Retraining triggers when held-out relative error exceeds this.
pub const DEFAULT_RETRAIN_THRESHOLD: f64 = 0.05;
/// Samples needed to fit the CPU counter model.
const MIN_TRAINING_SAMPLES: usize = 30;

/// Which disaggregation variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// min ‖CX − W‖: all power, idle included, lands on the columns.
    Full,
    /// min ‖CX − (W − W_idle)‖ with the target clamped at zero.
    NoIdle,
    /// X_cpu from the counter model + X_rest from the non-CPU remainder.
    Combined,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoIdle => "no-idle",
            Mode::Combined => "combined",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "full" => Ok(Mode::Full),
            "no-idle" => Ok(Mode::NoIdle),
            "combined" => Ok(Mode::Combined),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?}; expected full, no-idle, or combined"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One column of the contribution matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColumnId {
    Function(String),
    ControlPlane,
    Os,
}

impl ColumnId {
    pub fn name(&self) -> &str {
        match self {
            ColumnId::Function(id) => id,
            ColumnId::ControlPlane => "cp",
            ColumnId::Os => "os",
        }
    }
}

impl fmt::Display for ColumnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which shared principals get contribution columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedColumns {
    pub control_plane: bool,
    pub os: bool,
}

impl Default for SharedColumns {
    /// The control plane is modeled by default; the OS column is opt-in.
    fn default() -> Self {
        SharedColumns { control_plane: true, os: false }
    }
}

impl SharedColumns {
    pub const NONE: SharedColumns = SharedColumns { control_plane: false, os: false };

    fn any(self) -> bool {
        self.control_plane || self.os
    }
}

/// Running-time contributions C, activation counts A, and the interval grid
/// they live on. Functions appear only if they overlap the window; shared
/// principals appear only if requested.
#[derive(Debug, Clone)]
pub struct ContributionMatrix {
    pub columns: Vec<ColumnId>,
    /// N×M seconds of running time (may exceed δ under concurrency).
    pub c: DMatrix<f64>,
    /// N×M invocations completed per interval; zero for shared principals.
    pub activations: DMatrix<f64>,
    /// Start timestamp of each interval row.
    pub interval_starts: Vec<f64>,
    pub delta_s: f64,
}

impl ContributionMatrix {
    pub fn n_intervals(&self) -> usize {
        self.c.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }

    /// Total completions per function column over the window.
    pub fn total_activations(&self) -> BTreeMap<String, f64> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(j, col)| match col {
                ColumnId::Function(id) => {
                    Some((id.clone(), self.activations.column(j).sum()))
                }
                _ => None,
            })
            .collect()
    }
}

/// Time-weighted mean of a sample-and-hold (timestamp, value) series over
/// [lo, hi); zero when the series is empty.
fn sh_mean(series: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    if series.is_empty() || hi <= lo {
        return 0.0;
    }
    let mut i = match series.binary_search_by(|s| s.0.partial_cmp(&lo).unwrap()) {
        Ok(k) => k,
        Err(0) => 0,
        Err(k) => k - 1,
    };
    while i + 1 < series.len() && series[i + 1].0 <= lo {
        i += 1;
    }
    let mut t = lo;
    let mut acc = 0.0;
    loop {
        let seg_end = if i + 1 < series.len() { series[i + 1].0.min(hi) } else { hi };
        if seg_end > t {
            acc += series[i].1 * (seg_end - t);
            t = seg_end;
        }
        if t >= hi || i + 1 >= series.len() {
            break;
        }
        i += 1;
    }
    acc / (hi - lo)
}

fn principal_series(utilization: &[UtilizationSample], principal: Principal) -> Vec<(f64, f64)> {
    utilization
        .iter()
        .filter(|u| u.principal == principal)
        .map(|u| (u.timestamp_s, u.cpu_percent))
        .collect()
}

/// Build C and A over `window`, split into intervals of δ seconds.
///
/// Each invocation contributes its overlap with every interval it spans,
/// so its contributions across intervals sum to its latency (clipped at the
/// window edges). Shared-principal columns hold the utilization ratio
/// (principal CPU% / system-wide CPU%) × δ, clamped to [0, δ].
pub fn build_contributions(
    invocations: &[InvocationRecord],
    utilization: Option<&[UtilizationSample]>,
    delta_s: f64,
    window: (f64, f64),
    shared: SharedColumns,
) -> Result<ContributionMatrix> {
    let (t0, t1) = window;
    if !(delta_s > 0.0) {
        return Err(Error::Invalid(format!("delta must be positive, got {delta_s}")));
    }
    let n = ((t1 - t0) / delta_s + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::Invalid(format!("window [{t0}, {t1}] holds no {delta_s} s interval")));
    }
    if shared.any() && utilization.is_none() {
        return Err(Error::MissingInput(
            "utilization trace (required for shared-principal columns)".into(),
        ));
    }

    let active: BTreeSet<&str> = invocations
        .iter()
        .filter(|r| r.end_s > t0 && r.start_s < t1)
        .map(|r| r.function_id.as_str())
        .collect();
    let mut columns: Vec<ColumnId> =
        active.iter().map(|id| ColumnId::Function(id.to_string())).collect();
    if shared.control_plane {
        columns.push(ColumnId::ControlPlane);
    }
    if shared.os {
        columns.push(ColumnId::Os);
    }
    let m = columns.len();
    let col_of: BTreeMap<&str, usize> = columns
        .iter()
        .enumerate()
        .filter_map(|(j, c)| match c {
            ColumnId::Function(id) => Some((id.as_str(), j)),
            _ => None,
        })
        .collect();

    let mut c = DMatrix::<f64>::zeros(n, m);
    let mut activations = DMatrix::<f64>::zeros(n, m);
    for r in invocations {
        let Some(&j) = col_of.get(r.function_id.as_str()) else { continue };
        if r.end_s <= t0 || r.start_s >= t1 {
            continue;
        }
        let first = (((r.start_s - t0) / delta_s).floor().max(0.0)) as usize;
        let last = ((r.end_s - t0) / delta_s).ceil() as usize;
        for i in first..last.min(n) {
            let lo = t0 + i as f64 * delta_s;
            let hi = lo + delta_s;
            let overlap = (r.end_s.min(hi) - r.start_s.max(lo)).max(0.0);
            c[(i, j)] += overlap;
            if r.end_s >= lo && r.end_s < hi {
                activations[(i, j)] += 1.0;
            }
        }
    }

    if shared.any() {
        let util = utilization.unwrap();
        let sys = principal_series(util, Principal::SystemWide);
        let mut fill = |principal: Principal, j: usize| {
            let series = principal_series(util, principal);
            for i in 0..n {
                let lo = t0 + i as f64 * delta_s;
                let hi = lo + delta_s;
                let p = sh_mean(&series, lo, hi);
                let s = sh_mean(&sys, lo, hi);
                c[(i, j)] = if p > 0.0 && s > 0.0 {
                    (p / s * delta_s).clamp(0.0, delta_s)
                } else {
                    0.0
                };
            }
        };
        if shared.control_plane {
            let j = columns.iter().position(|c| *c == ColumnId::ControlPlane).unwrap();
            fill(Principal::ControlPlane, j);
        }
        if shared.os {
            let j = columns.iter().position(|c| *c == ColumnId::Os).unwrap();
            fill(Principal::Os, j);
        }
    }

    let interval_starts = (0..n).map(|i| t0 + i as f64 * delta_s).collect();
    Ok(ContributionMatrix { columns, c, activations, interval_starts, delta_s })
}

/// Mean watts per contribution-matrix interval, from a sample-and-hold
/// power trace.
pub fn interval_means(power: &[PowerSample], cm: &ContributionMatrix) -> Vec<f64> {
    cm.interval_starts
        .iter()
        .map(|&lo| sh_integral(power, lo, lo + cm.delta_s) / cm.delta_s)
        .collect()
}

/// A solved disaggregation: watts per column, aligned with the matrix.
#[derive(Debug, Clone)]
pub struct DisaggSolution {
    pub columns: Vec<ColumnId>,
    pub watts: Vec<f64>,
    /// ‖CX − W‖₂ over the window (after any idle subtraction).
    pub residual: f64,
    /// Signal-carrying columns were numerically rank-deficient.
    pub degenerate: bool,
    /// Columns with no activity at all; their watts are 0 by fiat and carry
    /// no information.
    pub unidentifiable: Vec<String>,
}

impl DisaggSolution {
    pub fn watts_for(&self, name: &str) -> Option<f64> {
        self.columns.iter().position(|c| c.name() == name).map(|j| self.watts[j])
    }

    pub fn function_watts(&self) -> BTreeMap<String, f64> {
        self.columns
            .iter()
            .zip(&self.watts)
            .filter_map(|(c, &w)| match c {
                ColumnId::Function(id) => Some((id.clone(), w)),
                _ => None,
            })
            .collect()
    }
}

fn solve_on(cm: &ContributionMatrix, target: &[f64]) -> Result<DisaggSolution> {
    let n = cm.n_intervals();
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals in C but {} power samples",
            n,
            target.len()
        )));
    }
    // Normalizing C by δ turns second-valued contributions into duty cycles,
    // so coefficients are watts and merging intervals leaves them unchanged.
    let live: Vec<usize> =
        (0..cm.columns.len()).filter(|&j| cm.c.column(j).amax() > 0.0).collect();
    if n < live.len() {
        return Err(Error::InsufficientSamples { have: n, need: live.len() });
    }
    let a = DMatrix::from_fn(n, live.len(), |i, k| cm.c[(i, live[k])] / cm.delta_s);
    let b = DVector::from_column_slice(target);
    let sol = nnls(&a, &b);
    let mut watts = vec![0.0; cm.columns.len()];
    for (k, &j) in live.iter().enumerate() {
        watts[j] = sol.x[k];
    }
    let unidentifiable = (0..cm.columns.len())
        .filter(|j| !live.contains(j))
        .map(|j| cm.columns[j].name().to_string())
        .collect();
    Ok(DisaggSolution {
        columns: cm.columns.clone(),
        watts,
        residual: sol.residual,
        degenerate: sol.degenerate,
        unidentifiable,
    })
}

/// Full-power disaggregation: min ‖CX − W‖, X ≥ 0. Idle power is not
/// modeled and lands wherever the running-time columns fit it best.
pub fn solve_full(cm: &ContributionMatrix, w: &[f64]) -> Result<DisaggSolution> {
    solve_on(cm, w)
}

/// Idle-subtracted disaggregation: the target is max(W − idle, 0) per
/// interval, so coefficients are active draw above baseline.
pub fn solve_no_idle(cm: &ContributionMatrix, w: &[f64], idle_watts: f64) -> Result<DisaggSolution> {
    if !(idle_watts >= 0.0) {
        return Err(Error::Invalid(format!("idle watts must be nonnegative, got {idle_watts}")));
    }
    let target: Vec<f64> = w.iter().map(|&x| (x - idle_watts).max(0.0)).collect();
    solve_on(cm, &target)
}

/// Per-interval normalized counter vectors S for every counter principal
/// (functions and the control plane), aligned to a contribution grid.
#[derive(Debug, Clone)]
pub struct CounterMatrix {
    pub principals: Vec<String>,
    pub interval_starts: Vec<f64>,
    /// s[i][p] = principal p's counters ÷ system-wide counters in interval i.
    pub s: Vec<Vec<[f64; 4]>>,
}

impl CounterMatrix {
    /// Aggregate normalized vector per interval (sum over principals).
    pub fn aggregate(&self) -> Vec<[f64; 4]> {
        self.s
            .iter()
            .map(|row| {
                let mut agg = [0.0; 4];
                for v in row {
                    for k in 0..4 {
                        agg[k] += v[k];
                    }
                }
                agg
            })
            .collect()
    }
}

/// Sum counter deltas into the interval grid and normalize by the
/// system-wide totals (0/0 → 0). Multiple rows of one principal inside an
/// interval — concurrent containers, finer sampling — are summed first.
pub fn normalized_counters(
    counters: &[CounterSample],
    delta_s: f64,
    window: (f64, f64),
) -> Result<CounterMatrix> {
    use crate::simulator::SYSTEM_COUNTER_ID;
    let (t0, t1) = window;
    let n = ((t1 - t0) / delta_s + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::Invalid(format!("window [{t0}, {t1}] holds no {delta_s} s interval")));
    }
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for c in counters {
        if c.function_id != SYSTEM_COUNTER_ID
            && c.timestamp_s >= t0
            && c.timestamp_s < t1
        {
            ids.insert(c.function_id.as_str());
        }
    }
    let principals: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    let index: BTreeMap<&str, usize> =
        ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

    let mut raw = vec![vec![[0.0f64; 4]; principals.len()]; n];
    let mut system = vec![[0.0f64; 4]; n];
    for c in counters {
        if c.timestamp_s < t0 || c.timestamp_s >= t1 {
            continue;
        }
        let i = ((c.timestamp_s - t0) / delta_s).floor() as usize;
        if i >= n {
            continue;
        }
        if c.function_id == SYSTEM_COUNTER_ID {
            for k in 0..4 {
                system[i][k] += c.counters[k] as f64;
            }
        } else {
            let p = index[c.function_id.as_str()];
            for k in 0..4 {
                raw[i][p][k] += c.counters[k] as f64;
            }
        }
    }
    if system.iter().all(|s| s.iter().all(|&v| v == 0.0)) {
        return Err(Error::ZeroSystemCounters);
    }
    let s = raw
        .iter()
        .zip(&system)
        .map(|(row, sys)| {
            row.iter()
                .map(|v| {
                    let mut out = [0.0; 4];
                    for k in 0..4 {
                        out[k] = if sys[k] > 0.0 { v[k] / sys[k] } else { 0.0 };
                    }
                    out
                })
                .collect()
        })
        .collect();
    let interval_starts = (0..n).map(|i| t0 + i as f64 * delta_s).collect();
    Ok(CounterMatrix { principals, interval_starts, s })
}

/// Linear map from a normalized counter vector to CPU watts.
///
/// The intercept absorbs baseline package power that no principal causes;
/// per-principal predictions therefore use the weights only, so an idle
/// principal predicts exactly zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerModelCpu {
    pub weights: [f64; 4],
    pub intercept: f64,
    pub trained_at: f64,
    /// Mean absolute residual over mean power on the training window.
    pub training_error: f64,
    pub retrain_threshold: f64,
}

impl PowerModelCpu {
    /// Dynamic CPU watts attributed to one principal's normalized vector.
    pub fn predict(&self, s: &[f64; 4]) -> f64 {
        let raw: f64 = self.weights.iter().zip(s).map(|(w, x)| w * x).sum();
        raw.max(0.0)
    }

    /// Whole-package prediction, intercept included; used for error checks.
    pub fn predict_total(&self, s_agg: &[f64; 4]) -> f64 {
        let raw: f64 =
            self.weights.iter().zip(s_agg).map(|(w, x)| w * x).sum::<f64>() + self.intercept;
        raw.max(0.0)
    }

    /// Relative error of the model on a (counter, CPU-power) window.
    pub fn held_out_error(&self, counters: &CounterMatrix, cpu_watts: &[f64]) -> Result<f64> {
        relative_error(self, counters, cpu_watts)
    }

    pub fn needs_retrain(&self, held_out_error: f64) -> bool {
        held_out_error > self.retrain_threshold
    }
}

fn relative_error(model: &PowerModelCpu, counters: &CounterMatrix, cpu_watts: &[f64]) -> Result<f64> {
    if cpu_watts.len() != counters.s.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} counter intervals vs {} power samples",
            counters.s.len(),
            cpu_watts.len()
        )));
    }
    let agg = counters.aggregate();
    let mean_w = cpu_watts.iter().sum::<f64>() / cpu_watts.len().max(1) as f64;
    if mean_w <= 0.0 {
        return Ok(0.0);
    }
    let mae = agg
        .iter()
        .zip(cpu_watts)
        .map(|(s, &w)| (model.predict_total(s) - w).abs())
        .sum::<f64>()
        / cpu_watts.len() as f64;
    Ok(mae / mean_w)
}

/// Fit the CPU power model on aggregate normalized counters vs. measured
/// CPU watts over a window (least squares with a tiny ridge; the synthetic
/// counter dimensions are often collinear, and prediction is invariant to
/// which of the equivalent weight vectors the solver lands on).
pub fn train_cpu_model(
    counters: &CounterMatrix,
    cpu_watts: &[f64],
    retrain_threshold: f64,
) -> Result<PowerModelCpu> {
    if cpu_watts.len() != counters.s.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} counter intervals vs {} power samples",
            counters.s.len(),
            cpu_watts.len()
        )));
    }
    if cpu_watts.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::InsufficientSamples {
            have: cpu_watts.len(),
            need: MIN_TRAINING_SAMPLES,
        });
    }
    let agg = counters.aggregate();
    let x = DMatrix::from_fn(agg.len(), 5, |i, j| if j < 4 { agg[i][j] } else { 1.0 });
    let y = DVector::from_iterator(cpu_watts.len(), cpu_watts.iter().cloned());
    let w = ridge_regression(&x, &y, 1e-10);
    let mut model = PowerModelCpu {
        weights: [w[0], w[1], w[2], w[3]],
        intercept: w[4],
        trained_at: counters
            .interval_starts
            .last()
            .copied()
            .unwrap_or(0.0),
        training_error: 0.0,
        retrain_threshold,
    };
    model.training_error = relative_error(&model, counters, cpu_watts)?;
    Ok(model)
}

/// Per-interval, per-principal CPU watts from the trained model.
pub fn predict_cpu_power(
    model: &PowerModelCpu,
    counters: &CounterMatrix,
) -> Vec<BTreeMap<String, f64>> {
    counters
        .s
        .iter()
        .map(|row| {
            counters
                .principals
                .iter()
                .zip(row)
                .map(|(id, s)| (id.clone(), model.predict(s)))
                .collect()
        })
        .collect()
}

/// Combined disaggregation: X = X_cpu + X_rest.
///
/// The rest-of-system target is W_sys − W_cpu (minus idle when known),
/// solved like the other modes; the CPU side converts the model's
/// per-interval watt predictions into per-column coefficients by dividing
/// each principal's predicted CPU energy by its running time.
pub fn solve_combined(
    cm: &ContributionMatrix,
    w_sys: &[f64],
    w_cpu: &[f64],
    model: &PowerModelCpu,
    counters: &CounterMatrix,
    idle_watts: Option<f64>,
) -> Result<DisaggSolution> {
    if w_sys.len() != cm.n_intervals() || w_cpu.len() != cm.n_intervals() {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals in C but {} system / {} cpu samples",
            cm.n_intervals(),
            w_sys.len(),
            w_cpu.len()
        )));
    }
    if counters.s.len() != cm.n_intervals() {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals in C but {} counter intervals",
            cm.n_intervals(),
            counters.s.len()
        )));
    }
    let idle = idle_watts.unwrap_or(0.0);
    let target: Vec<f64> =
        w_sys.iter().zip(w_cpu).map(|(&s, &c)| (s - c - idle).max(0.0)).collect();
    let mut solution = solve_on(cm, &target)?;

    let predictions = predict_cpu_power(model, counters);
    for (j, col) in cm.columns.clone().iter().enumerate() {
        let name = col.name();
        let running: f64 = cm.c.column(j).sum();
        if running <= 0.0 {
            continue;
        }
        let cpu_joules: f64 = predictions
            .iter()
            .map(|per| per.get(name).copied().unwrap_or(0.0) * cm.delta_s)
            .sum();
        solution.watts[j] += cpu_joules / running;
    }
    Ok(solution)
}

/// Everything the offline profiler needs from a recorded or simulated run.
#[derive(Debug, Clone, Copy)]
pub struct ProfileInputs<'a> {
    pub invocations: &'a [InvocationRecord],
    pub system_power: &'a [PowerSample],
    pub cpu_power: Option<&'a [PowerSample]>,
    pub utilization: Option<&'a [UtilizationSample]>,
    pub counters: Option<&'a [CounterSample]>,
}

/// Offline profiling configuration.
#[derive(Debug, Clone)]
pub struct ProfileParams {
    pub mode: Mode,
    pub delta_s: f64,
    pub shared: SharedColumns,
    /// Required for no-idle; also subtracted from the combined-mode rest
    /// target when present.
    pub idle_watts: Option<f64>,
    /// Estimate and correct meter skew against the CPU trace (or a
    /// counter-rate series) before solving.
    pub correct_skew: bool,
    pub skew_bound_s: f64,
    pub retrain_threshold: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            mode: Mode::Full,
            delta_s: DEFAULT_DELTA_S,
            shared: SharedColumns::default(),
            idle_watts: None,
            correct_skew: true,
            skew_bound_s: crate::signal::DEFAULT_SKEW_BOUND_S,
            retrain_threshold: DEFAULT_RETRAIN_THRESHOLD,
        }
    }
}

/// Per-function outcome of one profiling window.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FunctionEstimate {
    pub watts: f64,
    /// X times the window's mean latency.
    pub joules_per_invocation: f64,
    pub mean_latency_s: f64,
    pub activations: f64,
}

/// Result of whole-trace offline profiling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProfileReport {
    pub mode: Mode,
    pub window: (f64, f64),
    pub estimates: BTreeMap<String, FunctionEstimate>,
    /// Mean shared-principal draw over the window (solved coefficient
    /// weighted by its duty cycle), so watts × window length is the energy
    /// the model actually assigns to the principal.
    pub cp_watts: Option<f64>,
    pub os_watts: Option<f64>,
    pub residual: f64,
    pub degenerate: bool,
    pub unidentifiable: Vec<String>,
    /// Skew correction applied to the meter trace, if any.
    pub skew: Option<SkewEstimate>,
}

/// Mean latency and completion count per function over a window.
pub fn latency_stats(
    invocations: &[InvocationRecord],
    window: (f64, f64),
) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in invocations {
        if r.end_s >= window.0 && r.end_s < window.1 {
            let e = acc.entry(r.function_id.clone()).or_insert((0.0, 0));
            e.0 += r.latency_s();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (sum, n))| (id, (sum / n as f64, n)))
        .collect()
}

/// Skew-correct the meter trace against the best available reference
/// (the CPU power trace, else a counter-rate series). A flat or too-short
/// signal simply goes uncorrected — if there is nothing to align on, there
/// is nothing to misalign either.
pub fn align_system_power(
    system_power: &[PowerSample],
    cpu_power: Option<&[PowerSample]>,
    counters: Option<&[CounterSample]>,
    bound_s: f64,
    fallback_period_s: f64,
) -> Result<(Vec<PowerSample>, Option<SkewEstimate>)> {
    let reference: Option<Vec<PowerSample>> = match (cpu_power, counters) {
        (Some(cpu), _) => Some(cpu.to_vec()),
        (None, Some(ctr)) => {
            let meter_period = if system_power.len() >= 2 {
                system_power[1].timestamp_s - system_power[0].timestamp_s
            } else {
                fallback_period_s
            };
            Some(counter_rate_reference(ctr, meter_period))
        }
        (None, None) => None,
    };
    if let Some(reference) = reference {
        match estimate_skew(system_power, &reference, bound_s) {
            Ok(est) => {
                let corrected = apply_skew(system_power, est.offset_s);
                return Ok((corrected, Some(est)));
            }
            Err(
                Error::FlatSignal { .. }
                | Error::TraceTooShort { .. }
                | Error::InsufficientSamples { .. },
            ) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((system_power.to_vec(), None))
}

/// Profile a whole recorded run as one window: align, build, solve, and
/// convert power to per-invocation energy via mean latency.
pub fn profile_offline(inputs: &ProfileInputs, params: &ProfileParams) -> Result<ProfileReport> {
    if inputs.system_power.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if params.mode == Mode::NoIdle && params.idle_watts.is_none() {
        return Err(Error::MissingInput("idle_watts (required for no-idle mode)".into()));
    }
    if params.mode == Mode::Combined && (inputs.cpu_power.is_none() || inputs.counters.is_none()) {
        return Err(Error::MissingInput(
            "cpu power trace and counters (required for combined mode)".into(),
        ));
    }

    let (system_power, skew) = if params.correct_skew {
        align_system_power(
            inputs.system_power,
            inputs.cpu_power,
            inputs.counters,
            params.skew_bound_s,
            params.delta_s,
        )?
    } else {
        (inputs.system_power.to_vec(), None)
    };

    let meter_period = if system_power.len() >= 2 {
        system_power[1].timestamp_s - system_power[0].timestamp_s
    } else {
        params.delta_s
    };
    let t0 = (system_power[0].timestamp_s / params.delta_s).floor() * params.delta_s;
    let t_end = system_power.last().unwrap().timestamp_s + meter_period;
    let t1 = t0 + ((t_end - t0) / params.delta_s + 1e-9).floor() * params.delta_s;
    let window = (t0, t1);

    let cm = build_contributions(
        inputs.invocations,
        inputs.utilization,
        params.delta_s,
        window,
        params.shared,
    )?;
    let w = interval_means(&system_power, &cm);
    let solution = match params.mode {
        Mode::Full => solve_full(&cm, &w)?,
        Mode::NoIdle => solve_no_idle(&cm, &w, params.idle_watts.unwrap())?,
        Mode::Combined => {
            let cpu = inputs.cpu_power.unwrap();
            let w_cpu = interval_means(cpu, &cm);
            let counters = normalized_counters(inputs.counters.unwrap(), params.delta_s, window)?;
            let model = train_cpu_model(&counters, &w_cpu, params.retrain_threshold)?;
            solve_combined(&cm, &w, &w_cpu, &model, &counters, params.idle_watts)?
        }
    };

    let stats = latency_stats(inputs.invocations, window);
    let mut estimates = BTreeMap::new();
    for (j, col) in solution.columns.iter().enumerate() {
        if let ColumnId::Function(id) = col {
            let (mean_latency, count) = stats.get(id).copied().unwrap_or((0.0, 0));
            estimates.insert(
                id.clone(),
                FunctionEstimate {
                    watts: solution.watts[j],
                    joules_per_invocation: solution.watts[j] * mean_latency,
                    mean_latency_s: mean_latency,
                    activations: count as f64,
                },
            );
        }
    }
    let mean_draw = |name: &str| {
        let j = cm.column_index(name)?;
        let duty = cm.c.column(j).sum() / (cm.n_intervals() as f64 * cm.delta_s);
        Some(solution.watts[j] * duty)
    };
    Ok(ProfileReport {
        mode: params.mode,
        window,
        cp_watts: mean_draw("cp"),
        os_watts: mean_draw("os"),
        residual: solution.residual,
        degenerate: solution.degenerate,
        unidentifiable: solution.unidentifiable.clone(),
        estimates,
        skew,
    })
}

//! Online refinement of per-function power estimates: an initial
//! least-squares solve over a long warm-up window, then a bank of coupled
//! scalar Kalman updates per 60 s step. Each step blends the previous
//! estimate with a fresh windowed solve (X̂ ← αX̂ + βU) and distributes the
//! remaining innovation by activation count, with gains damped for
//! functions whose latency history is noisy.

use std::collections::{BTreeMap, BTreeSet};

use crate::disagg::{
    align_system_power, build_contributions, interval_means, normalized_counters, solve_combined,
    solve_full, train_cpu_model, ColumnId, ContributionMatrix, DisaggSolution, Mode,
    PowerModelCpu, ProfileInputs, SharedColumns, DEFAULT_DELTA_S, DEFAULT_RETRAIN_THRESHOLD,
};
use crate::signal::{SkewEstimate, DEFAULT_SKEW_BOUND_S};
use crate::trace::InvocationRecord;
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_INIT_LEN_S: f64 = 100.0;
pub const DEFAULT_STEP_LEN_S: f64 = 60.0;

/// Filter configuration. `alpha` weights the previous estimate, `beta` the
/// fresh windowed solve, `gamma` the latency-variance damping of the
/// innovation gain. Measurement noise is r = noise_scale / δ.
#[derive(Debug, Clone)]
pub struct KalmanParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// k in r = k/δ.
    pub noise_scale: f64,
    /// Initial per-function estimate variance.
    pub p0: f64,
    pub init_len_s: f64,
    pub step_len_s: f64,
    pub delta_s: f64,
    pub mode: Mode,
    pub shared: SharedColumns,
    pub idle_watts: Option<f64>,
    pub correct_skew: bool,
    pub skew_bound_s: f64,
    pub retrain_threshold: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        KalmanParams {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            noise_scale: 1.0,
            p0: 1.0,
            init_len_s: DEFAULT_INIT_LEN_S,
            step_len_s: DEFAULT_STEP_LEN_S,
            delta_s: DEFAULT_DELTA_S,
            mode: Mode::Full,
            shared: SharedColumns::default(),
            idle_watts: None,
            correct_skew: true,
            skew_bound_s: DEFAULT_SKEW_BOUND_S,
            retrain_threshold: DEFAULT_RETRAIN_THRESHOLD,
        }
    }
}

impl KalmanParams {
    /// Measurement noise: proportional to 1/δ.
    pub fn r(&self) -> f64 {
        self.noise_scale / self.delta_s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.alpha + self.beta > 1.2 {
            return Err(Error::Invalid(format!(
                "alpha + beta = {} exceeds the 1.2 sanity bound",
                self.alpha + self.beta
            )));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::Invalid(format!(
                "noise scale must be positive (r = k/delta), got {}",
                self.noise_scale
            )));
        }
        if !(self.p0 >= 0.0) {
            return Err(Error::Invalid(format!("p0 must be nonnegative, got {}", self.p0)));
        }
        if !(self.delta_s > 0.0) {
            return Err(Error::Invalid(format!("delta must be positive, got {}", self.delta_s)));
        }
        for (name, v) in [("init length", self.init_len_s), ("step length", self.step_len_s)] {
            if !(v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
            let ratio = v / self.delta_s;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "{name} {v} s is not a whole number of {} s intervals",
                    self.delta_s
                )));
            }
        }
        if self.mode == Mode::NoIdle && self.idle_watts.is_none() {
            return Err(Error::MissingInput("idle_watts (required for no-idle mode)".into()));
        }
        Ok(())
    }
}

/// Running mean/variance accumulator.
#[derive(Debug, Clone, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone)]
struct FnState {
    x_hat: f64,
    p: f64,
    latency: Welford,
}

/// Filter state: one (estimate, variance, latency history) triple per
/// known principal. Single-writer; queries between steps see the snapshot
/// of the last completed step.
#[derive(Debug, Clone)]
pub struct KalmanState {
    entries: BTreeMap<String, FnState>,
    cpu_model: Option<PowerModelCpu>,
    pub params: KalmanParams,
    /// End timestamp of the last processed window.
    pub t_s: f64,
}

impl KalmanState {
    /// State with no estimates; functions join lazily as they appear.
    pub fn empty(params: KalmanParams) -> Result<KalmanState> {
        params.validate()?;
        Ok(KalmanState { entries: BTreeMap::new(), cpu_model: None, params, t_s: 0.0 })
    }

    /// Warm start from a previous run's footprints: X̂ from the prior,
    /// variance reset to p0.
    pub fn from_prior(prior: &BTreeMap<String, f64>, params: KalmanParams) -> Result<KalmanState> {
        let mut state = KalmanState::empty(params)?;
        for (id, &watts) in prior {
            if !(watts >= 0.0) {
                return Err(Error::Invalid(format!("prior for {id} must be nonnegative: {watts}")));
            }
            state.entries.insert(
                id.clone(),
                FnState { x_hat: watts, p: state.params.p0, latency: Welford::default() },
            );
        }
        Ok(state)
    }

    pub fn watts(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|e| e.x_hat)
    }

    pub fn p_variance(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|e| e.p)
    }

    /// Cumulative mean latency, seconds; zero before any completion.
    pub fn mean_latency(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|e| if e.latency.n == 0 { 0.0 } else { e.latency.mean })
    }

    /// Cumulative latency variance σ(T), seconds².
    pub fn latency_variance(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|e| e.latency.variance())
    }

    pub fn function_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// One emitted point per known principal at the current step time.
    pub fn snapshot(&self) -> Vec<FootprintPoint> {
        self.entries
            .iter()
            .map(|(id, e)| {
                let tau = if e.latency.n == 0 { 0.0 } else { e.latency.mean };
                FootprintPoint {
                    timestamp_s: self.t_s,
                    function_id: id.clone(),
                    watts: e.x_hat,
                    joules_per_invocation: e.x_hat * tau,
                    p_variance: e.p,
                }
            })
            .collect()
    }
}

/// One per-function sample of the online footprint series.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FootprintPoint {
    pub timestamp_s: f64,
    pub function_id: String,
    pub watts: f64,
    pub joules_per_invocation: f64,
    pub p_variance: f64,
}

/// Activation count per column: completions for functions, active
/// intervals for shared principals (which never "complete" anything but
/// must still track their drifting draw).
fn activation_vector(cm: &ContributionMatrix) -> Vec<f64> {
    cm.columns
        .iter()
        .enumerate()
        .map(|(j, col)| match col {
            ColumnId::Function(_) => cm.activations.column(j).sum(),
            _ => cm.c.column(j).iter().filter(|&&v| v > 0.0).count() as f64,
        })
        .collect()
}

/// Advance the filter one step with a caller-supplied windowed solve.
///
/// `target` is the measurement the solve saw (idle already subtracted in
/// the idle-aware modes), so the innovation Z̄ — the mean over window rows
/// of target − C X̂ — is consistent with U. Gains follow
///
///   K_j = α p_j A_j / (Σ_k A_k² α p_k + r + γ σ(T)_j),
///
/// so a function with a noisier latency history takes a strictly smaller
/// innovation correction. Functions with zero activations in the window
/// are not touched at all: estimate, variance, and latency history stay
/// bitwise identical.
pub fn kalman_step_with(
    state: &mut KalmanState,
    cm: &ContributionMatrix,
    target: &[f64],
    u: &DisaggSolution,
    completed: &[InvocationRecord],
) -> Result<()> {
    let n = cm.n_intervals();
    let m = cm.columns.len();
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals in C but {} power samples",
            n,
            target.len()
        )));
    }
    if u.columns != cm.columns {
        return Err(Error::DimensionMismatch(
            "solution columns do not match contribution columns".into(),
        ));
    }
    let p = &state.params;
    let r = p.r();
    if !(r >= 0.0) {
        return Err(Error::Invalid(format!("measurement noise r must be nonnegative, got {r}")));
    }
    let (alpha, beta, gamma, p0) = (p.alpha, p.beta, p.gamma, p.p0);

    let a = activation_vector(cm);

    // New principals enter at the windowed solve (α=0, β=1, K=0 on their
    // first appearance).
    let mut fresh: BTreeSet<usize> = BTreeSet::new();
    for (j, col) in cm.columns.iter().enumerate() {
        if !state.entries.contains_key(col.name()) {
            state.entries.insert(
                col.name().to_string(),
                FnState { x_hat: u.watts[j].max(0.0), p: p0, latency: Welford::default() },
            );
            fresh.insert(j);
        }
    }

    // Latency history feeds the gain damping, so it updates first.
    for rec in completed {
        if cm.column_index(&rec.function_id).is_some() {
            if let Some(e) = state.entries.get_mut(&rec.function_id) {
                e.latency.push(rec.latency_s());
            }
        }
    }

    // Scalar innovation: how much measured power the current estimates
    // fail to explain, averaged over the window.
    let mut z_bar = 0.0;
    for i in 0..n {
        let mut predicted = 0.0;
        for j in 0..m {
            let x = state.entries[cm.columns[j].name()].x_hat;
            predicted += cm.c[(i, j)] / cm.delta_s * x;
        }
        z_bar += target[i] - predicted;
    }
    z_bar /= n as f64;

    let denom_base: f64 = (0..m)
        .filter(|j| !fresh.contains(j))
        .map(|j| {
            let pj = state.entries[cm.columns[j].name()].p;
            a[j] * a[j] * alpha * pj
        })
        .sum();

    for j in 0..m {
        if fresh.contains(&j) || a[j] == 0.0 {
            continue;
        }
        let name = cm.columns[j].name().to_string();
        let sigma = state.entries[&name].latency.variance();
        let e = state.entries.get_mut(&name).unwrap();
        let p_pred = alpha * e.p;
        let k = p_pred * a[j] / (denom_base + r + gamma * sigma);
        e.x_hat = (alpha * e.x_hat + beta * u.watts[j] + k * z_bar).max(0.0);
        e.p = (1.0 - k * a[j]) * p_pred;
    }

    state.t_s = cm.interval_starts.last().copied().unwrap_or(state.t_s) + cm.delta_s;
    Ok(())
}

/// Advance the filter one step, solving the window internally (full or
/// idle-subtracted least squares per the configured mode; the combined
/// mode's CPU split needs counters and goes through [`kalman_step_with`]).
pub fn kalman_step(
    state: &mut KalmanState,
    cm: &ContributionMatrix,
    w: &[f64],
    completed: &[InvocationRecord],
) -> Result<()> {
    let idle = match state.params.mode {
        Mode::Full => 0.0,
        _ => state.params.idle_watts.unwrap_or(0.0),
    };
    let target: Vec<f64> = w.iter().map(|&x| (x - idle).max(0.0)).collect();
    let u = solve_full(cm, &target)?;
    kalman_step_with(state, cm, &target, &u, completed)
}

/// Completions inside [lo, hi).
fn completed_in<'a>(
    invocations: &'a [InvocationRecord],
    lo: f64,
    hi: f64,
) -> Vec<InvocationRecord> {
    invocations
        .iter()
        .filter(|r| r.end_s >= lo && r.end_s < hi)
        .cloned()
        .collect()
}

fn init_on(
    power: &[crate::trace::PowerSample],
    inputs: &ProfileInputs,
    params: &KalmanParams,
    window: (f64, f64),
) -> Result<KalmanState> {
    let cm = build_contributions(
        inputs.invocations,
        inputs.utilization,
        params.delta_s,
        window,
        params.shared,
    )?;
    let w = interval_means(power, &cm);
    let mut cpu_model = None;
    let solution = match params.mode {
        Mode::Full => solve_full(&cm, &w)?,
        Mode::NoIdle => {
            let idle = params.idle_watts.unwrap();
            let target: Vec<f64> = w.iter().map(|&x| (x - idle).max(0.0)).collect();
            solve_full(&cm, &target)?
        }
        Mode::Combined => {
            let cpu = inputs
                .cpu_power
                .ok_or_else(|| Error::MissingInput("cpu power trace".into()))?;
            let counters = inputs
                .counters
                .ok_or_else(|| Error::MissingInput("counter trace".into()))?;
            let w_cpu = interval_means(cpu, &cm);
            let counters = normalized_counters(counters, params.delta_s, window)?;
            let model = train_cpu_model(&counters, &w_cpu, params.retrain_threshold)?;
            let sol = solve_combined(&cm, &w, &w_cpu, &model, &counters, params.idle_watts)?;
            cpu_model = Some(model);
            sol
        }
    };
    let mut state = KalmanState::empty(params.clone())?;
    state.cpu_model = cpu_model;
    for (j, col) in solution.columns.iter().enumerate() {
        state.entries.insert(
            col.name().to_string(),
            FnState { x_hat: solution.watts[j].max(0.0), p: params.p0, latency: Welford::default() },
        );
    }
    for rec in completed_in(inputs.invocations, window.0, window.1) {
        if let Some(e) = state.entries.get_mut(&rec.function_id) {
            e.latency.push(rec.latency_s());
        }
    }
    state.t_s = window.1;
    Ok(state)
}

fn grid_bounds(
    power: &[crate::trace::PowerSample],
    delta_s: f64,
) -> (f64, f64) {
    let period = if power.len() >= 2 {
        power[1].timestamp_s - power[0].timestamp_s
    } else {
        delta_s
    };
    let t0 = (power[0].timestamp_s / delta_s).floor() * delta_s;
    let raw_end = power.last().unwrap().timestamp_s + period;
    let t_end = t0 + ((raw_end - t0) / delta_s + 1e-9).floor() * delta_s;
    (t0, t_end)
}

/// Disaggregate the leading init window into the starting estimate. The
/// trace must cover at least `init_len_s`; a window without invocations
/// yields an empty state and functions join lazily during stepping.
pub fn init_state(inputs: &ProfileInputs, params: &KalmanParams) -> Result<KalmanState> {
    params.validate()?;
    if inputs.system_power.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let (power, _) = if params.correct_skew {
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
    let (t0, t_end) = grid_bounds(&power, params.delta_s);
    if t_end - t0 + 1e-9 < params.init_len_s {
        return Err(Error::TraceTooShort { len_s: t_end - t0, need_s: params.init_len_s });
    }
    init_on(&power, inputs, params, (t0, t0 + params.init_len_s))
}

/// The full online footprint series for one run.
#[derive(Debug, Clone)]
pub struct OnlineReport {
    pub points: Vec<FootprintPoint>,
    pub skew: Option<SkewEstimate>,
    pub steps: usize,
    /// CPU-model refits triggered by the held-out error check (combined
    /// mode only).
    pub retrains: usize,
}

/// Run the whole online pipeline: align the meter, solve the init window,
/// then filter step by step, emitting every known principal's footprint at
/// each step boundary.
pub fn run_online(inputs: &ProfileInputs, params: &KalmanParams) -> Result<OnlineReport> {
    params.validate()?;
    if inputs.system_power.is_empty() {
        return Ok(OnlineReport { points: Vec::new(), skew: None, steps: 0, retrains: 0 });
    }
    let (power, skew) = if params.correct_skew {
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
    let (t0, t_end) = grid_bounds(&power, params.delta_s);
    if t_end - t0 + 1e-9 < params.init_len_s {
        return Err(Error::TraceTooShort { len_s: t_end - t0, need_s: params.init_len_s });
    }
    let mut state = init_on(&power, inputs, params, (t0, t0 + params.init_len_s))?;

    let mut points = Vec::new();
    let mut steps = 0;
    let mut retrains = 0;
    let mut t = t0 + params.init_len_s;
    while t + params.step_len_s <= t_end + 1e-9 {
        let window = (t, t + params.step_len_s);
        let cm = build_contributions(
            inputs.invocations,
            inputs.utilization,
            params.delta_s,
            window,
            params.shared,
        )?;
        let w = interval_means(&power, &cm);
        let completed = completed_in(inputs.invocations, window.0, window.1);
        match params.mode {
            Mode::Full | Mode::NoIdle => {
                kalman_step(&mut state, &cm, &w, &completed)?;
            }
            Mode::Combined => {
                let cpu = inputs
                    .cpu_power
                    .ok_or_else(|| Error::MissingInput("cpu power trace".into()))?;
                let ctr = inputs
                    .counters
                    .ok_or_else(|| Error::MissingInput("counter trace".into()))?;
                let w_cpu = interval_means(cpu, &cm);
                let counters = normalized_counters(ctr, params.delta_s, window)?;
                let model = state.cpu_model.as_ref().expect("combined init trains the model");
                let err = model.held_out_error(&counters, &w_cpu)?;
                if model.needs_retrain(err) && counters.s.len() >= 30 {
                    state.cpu_model =
                        Some(train_cpu_model(&counters, &w_cpu, params.retrain_threshold)?);
                    retrains += 1;
                }
                let model = state.cpu_model.as_ref().unwrap();
                let u = solve_combined(&cm, &w, &w_cpu, model, &counters, params.idle_watts)?;
                let idle = params.idle_watts.unwrap_or(0.0);
                let target: Vec<f64> = w.iter().map(|&x| (x - idle).max(0.0)).collect();
                kalman_step_with(&mut state, &cm, &target, &u, &completed)?;
            }
        }
        points.extend(state.snapshot());
        steps += 1;
        t += params.step_len_s;
    }
    Ok(OnlineReport { points, skew, steps, retrains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, GroundTruth, SimScenario, SynthesisOptions};
    use crate::trace::{FunctionSpec, IatDistribution, PowerSample, Source, WorkloadSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(id: &str, latency: f64, cov: f64, iat_mean: f64, offset: f64) -> FunctionSpec {
        FunctionSpec {
            function_id: id.into(),
            mean_latency_s: latency,
            latency_cov: cov,
            iat: IatDistribution::Exponential { mean_s: iat_mean },
            start_offset_s: offset,
            stop_s: None,
        }
    }

    fn steady_scenario(duration_s: f64) -> SimScenario {
        SimScenario {
            name: None,
            workload: WorkloadSpec {
                functions: vec![
                    spec("dd", 0.7, 0.4, 2.0, 0.0),
                    spec("img", 1.5, 0.3, 3.5, 0.0),
                    spec("json", 0.25, 0.2, 1.0, 0.0),
                ],
                duration_s,
                seed: 23,
            },
            truth: GroundTruth {
                idle_watts: 0.0,
                per_function_watts: [
                    ("dd".to_string(), 20.0),
                    ("img".to_string(), 35.0),
                    ("json".to_string(), 5.0),
                ]
                .into_iter()
                .collect(),
                control_plane_joules_per_invocation: 0.0,
                noise_std_watts: 0.0,
                quantization_step_watts: 0.0,
                injected_skew_s: 0.0,
            },
            synthesis: SynthesisOptions::default(),
        }
    }

    fn bare_params() -> KalmanParams {
        KalmanParams {
            shared: SharedColumns::NONE,
            correct_skew: false,
            ..Default::default()
        }
    }

    fn inputs(run: &crate::simulator::SimulatedRun) -> ProfileInputs<'_> {
        ProfileInputs {
            invocations: &run.invocations,
            system_power: &run.system_power,
            cpu_power: run.cpu_power.as_deref(),
            utilization: Some(&run.utilization),
            counters: run.counters.as_deref(),
        }
    }

    #[test]
    fn init_is_solver_passthrough_on_noiseless_data() {
        let run = simulate(&steady_scenario(150.0)).unwrap();
        let params = bare_params();
        let state = init_state(&inputs(&run), &params).unwrap();
        let cm = build_contributions(
            &run.invocations,
            None,
            1.0,
            (0.0, 100.0),
            SharedColumns::NONE,
        )
        .unwrap();
        let w = interval_means(&run.system_power, &cm);
        let sol = solve_full(&cm, &w).unwrap();
        for (j, col) in sol.columns.iter().enumerate() {
            let got = state.watts(col.name()).unwrap();
            assert_eq!(got, sol.watts[j].max(0.0), "{}", col.name());
            assert_eq!(state.p_variance(col.name()).unwrap(), params.p0);
        }
    }

    #[test]
    fn warm_start_prior_is_passthrough() {
        let prior: BTreeMap<String, f64> =
            [("a".to_string(), 12.5), ("b".to_string(), 3.0)].into_iter().collect();
        let state = KalmanState::from_prior(&prior, bare_params()).unwrap();
        assert_eq!(state.watts("a"), Some(12.5));
        assert_eq!(state.watts("b"), Some(3.0));
        assert_eq!(state.p_variance("a"), Some(1.0));
        assert_eq!(state.watts("absent"), None);
    }

    #[test]
    fn function_absent_from_init_window_is_absent_from_state() {
        let mut sc = steady_scenario(200.0);
        sc.workload.functions.push(spec("late", 1.0, 0.2, 2.0, 150.0));
        sc.truth.per_function_watts.insert("late".into(), 10.0);
        let run = simulate(&sc).unwrap();
        let state = init_state(&inputs(&run), &bare_params()).unwrap();
        assert!(state.watts("late").is_none());
        assert!(state.watts("dd").is_some());
    }

    /// Handmade window: every interval row repeats the given per-column
    /// running seconds; activations land in the first row.
    fn toy_cm(ids: &[&str], c: &[f64], a: &[f64], t0: f64, rows: usize) -> ContributionMatrix {
        let m = ids.len();
        ContributionMatrix {
            columns: ids.iter().map(|s| ColumnId::Function(s.to_string())).collect(),
            c: DMatrix::from_fn(rows, m, |_, j| c[j]),
            activations: DMatrix::from_fn(rows, m, |i, j| if i == 0 { a[j] } else { 0.0 }),
            interval_starts: (0..rows).map(|i| t0 + i as f64).collect(),
            delta_s: 1.0,
        }
    }

    #[test]
    fn zero_activation_freeze_is_bitwise_over_randomized_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ids = ["f0", "f1", "f2", "f3", "f4"];
        let prior: BTreeMap<String, f64> =
            ids.iter().map(|s| (s.to_string(), rng.gen_range(1.0..50.0))).collect();
        let mut state = KalmanState::from_prior(&prior, bare_params()).unwrap();
        for step in 0..1000 {
            let mut c = [0.0; 5];
            let mut a = [0.0; 5];
            for j in 0..5 {
                if rng.gen_bool(0.5) {
                    c[j] = rng.gen_range(0.1..1.0);
                    // Some active columns still complete nothing: running
                    // but unfinished work must freeze too.
                    a[j] = if rng.gen_bool(0.8) { rng.gen_range(1.0..5.0_f64).floor() } else { 0.0 };
                }
            }
            let cm = toy_cm(&ids, &c, &a, step as f64, 6);
            let before: Vec<(u64, u64)> = ids
                .iter()
                .map(|id| {
                    (
                        state.watts(id).unwrap().to_bits(),
                        state.p_variance(id).unwrap().to_bits(),
                    )
                })
                .collect();
            let w = [rng.gen_range(0.0..80.0); 6];
            let completed: Vec<InvocationRecord> = (0..5)
                .filter(|&j| a[j] > 0.0)
                .map(|j| InvocationRecord {
                    function_id: ids[j].into(),
                    start_s: step as f64,
                    end_s: step as f64 + rng.gen_range(0.05..0.9),
                    warm: true,
                })
                .collect();
            kalman_step(&mut state, &cm, &w, &completed).unwrap();
            for (j, id) in ids.iter().enumerate() {
                if a[j] == 0.0 {
                    assert_eq!(
                        state.watts(id).unwrap().to_bits(),
                        before[j].0,
                        "step {step}: estimate of {id} moved despite zero activations"
                    );
                    assert_eq!(
                        state.p_variance(id).unwrap().to_bits(),
                        before[j].1,
                        "step {step}: variance of {id} moved despite zero activations"
                    );
                }
            }
        }
    }

    #[test]
    fn truth_is_a_fixed_point_when_alpha_beta_sum_to_one() {
        let run = simulate(&steady_scenario(200.0)).unwrap();
        let truth = &run.truth.per_function_watts;
        let mut state = KalmanState::from_prior(truth, bare_params()).unwrap();
        let cm = build_contributions(
            &run.invocations,
            None,
            1.0,
            (100.0, 160.0),
            SharedColumns::NONE,
        )
        .unwrap();
        let w = interval_means(&run.system_power, &cm);
        let completed = completed_in(&run.invocations, 100.0, 160.0);
        kalman_step(&mut state, &cm, &w, &completed).unwrap();
        for (id, &x) in truth {
            let got = state.watts(id).unwrap();
            assert!(
                (got - x).abs() / x < 1e-9,
                "{id}: truth {x} drifted to {got} despite noiseless fixed point"
            );
        }
    }

    #[test]
    fn converges_from_inflated_prior_within_ten_steps() {
        let run = simulate(&steady_scenario(800.0)).unwrap();
        let prior: BTreeMap<String, f64> = run
            .truth
            .per_function_watts
            .iter()
            .map(|(id, w)| (id.clone(), w * 1.05))
            .collect();
        let mut state = KalmanState::from_prior(&prior, bare_params()).unwrap();
        for step in 0..10 {
            let lo = 100.0 + 60.0 * step as f64;
            let cm = build_contributions(
                &run.invocations,
                None,
                1.0,
                (lo, lo + 60.0),
                SharedColumns::NONE,
            )
            .unwrap();
            let w = interval_means(&run.system_power, &cm);
            let completed = completed_in(&run.invocations, lo, lo + 60.0);
            kalman_step(&mut state, &cm, &w, &completed).unwrap();
        }
        for (id, &x) in &run.truth.per_function_watts {
            let got = state.watts(id).unwrap();
            assert!(
                (got - x).abs() / x < 0.01,
                "{id}: {got} still more than 1% from {x} after 10 steps"
            );
        }
    }

    #[test]
    fn higher_latency_variance_strictly_damps_innovation() {
        // Two identical filters, except one function's latency history is
        // noisier. The innovation correction |X̂' − (αX̂ + βU)| must be
        // strictly smaller for the noisier twin.
        let run_step = |latencies: &[f64]| -> (f64, f64, f64) {
            let prior: BTreeMap<String, f64> = [("f".to_string(), 10.0)].into_iter().collect();
            let mut state = KalmanState::from_prior(&prior, bare_params()).unwrap();
            let completed: Vec<InvocationRecord> = latencies
                .iter()
                .map(|&l| InvocationRecord {
                    function_id: "f".into(),
                    start_s: 0.0,
                    end_s: l,
                    warm: true,
                })
                .collect();
            let cm = toy_cm(&["f"], &[0.8], &[latencies.len() as f64], 0.0, 1);
            // Measured 30 W against a predicted 8 W: large innovation.
            kalman_step(&mut state, &cm, &[30.0], &completed).unwrap();
            let u = solve_full(&cm, &[30.0]).unwrap().watts[0];
            let p = state.params.clone();
            let blended = p.alpha * 10.0 + p.beta * u;
            (state.watts("f").unwrap(), blended, state.latency_variance("f").unwrap())
        };
        let (x_quiet, blend_quiet, var_quiet) = run_step(&[0.50, 0.52, 0.48, 0.51, 0.49]);
        let (x_noisy, blend_noisy, var_noisy) = run_step(&[0.10, 1.30, 0.20, 1.10, 0.05]);
        assert!(var_noisy > var_quiet);
        assert_eq!(blend_quiet, blend_noisy);
        let innov_quiet = (x_quiet - blend_quiet).abs();
        let innov_noisy = (x_noisy - blend_noisy).abs();
        assert!(
            innov_noisy < innov_quiet,
            "innovation {innov_noisy} not damped below {innov_quiet}"
        );
    }

    #[test]
    fn measurement_noise_scales_inversely_with_delta() {
        let p1 = KalmanParams { delta_s: 1.0, ..bare_params() };
        let p2 = KalmanParams { delta_s: 0.5, ..bare_params() };
        assert_eq!(p1.r(), 1.0);
        assert_eq!(p2.r(), 2.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = KalmanParams { alpha: 0.9, beta: 0.5, ..bare_params() };
        assert!(bad.validate().is_err(), "alpha + beta above sanity bound");
        let bad = KalmanParams { noise_scale: 0.0, ..bare_params() };
        assert!(bad.validate().is_err(), "r must stay positive");
        let bad = KalmanParams { gamma: 1.5, ..bare_params() };
        assert!(bad.validate().is_err());
        let bad = KalmanParams { step_len_s: 61.5, ..bare_params() };
        assert!(bad.validate().is_err(), "step must be whole intervals");
        let bad = KalmanParams { mode: Mode::NoIdle, ..bare_params() };
        assert!(matches!(bad.validate(), Err(Error::MissingInput(_))));
    }

    #[test]
    fn new_function_snaps_to_windowed_solve_within_three_steps() {
        let mut sc = steady_scenario(400.0);
        sc.workload.functions.push(spec("late", 1.0, 0.2, 2.0, 160.0));
        sc.truth.per_function_watts.insert("late".into(), 12.0);
        let run = simulate(&sc).unwrap();
        let report = run_online(&inputs(&run), &bare_params()).unwrap();
        let truth = 12.0;
        let late: Vec<&FootprintPoint> =
            report.points.iter().filter(|p| p.function_id == "late").collect();
        assert!(!late.is_empty(), "late function never appeared in the series");
        let first_ts = late[0].timestamp_s;
        for p in late.iter().take(3) {
            assert!(
                (p.watts - truth).abs() / truth < 0.10,
                "at {} s (first seen {first_ts} s): {} vs {truth}",
                p.timestamp_s,
                p.watts
            );
        }
    }

    #[test]
    fn online_series_is_nonnegative_and_tracks_truth_under_noise() {
        let mut sc = steady_scenario(700.0);
        sc.truth.noise_std_watts = 1.0;
        sc.truth.quantization_step_watts = 0.1;
        let run = simulate(&sc).unwrap();
        let report = run_online(&inputs(&run), &bare_params()).unwrap();
        assert_eq!(report.steps, 10);
        assert!(report.points.iter().all(|p| p.watts >= 0.0));
        assert!(report.points.iter().all(|p| p.joules_per_invocation >= 0.0));
        // Last-step estimates should sit near truth despite meter noise.
        let last_ts = report.points.last().unwrap().timestamp_s;
        for (id, &x) in &run.truth.per_function_watts {
            let p = report
                .points
                .iter()
                .find(|p| p.timestamp_s == last_ts && &p.function_id == id)
                .unwrap();
            assert!(
                (p.watts - x).abs() / x < 0.15,
                "{id}: {} vs {x} after {} steps",
                p.watts,
                report.steps
            );
            assert!(
                (p.joules_per_invocation - p.watts * state_mean(&run, id)).abs()
                    / p.joules_per_invocation.max(1e-9)
                    < 0.2,
                "{id}: J inconsistent with X·τ̄"
            );
        }
    }

    /// Mean latency of all completions of `id` in the run (test oracle).
    fn state_mean(run: &crate::simulator::SimulatedRun, id: &str) -> f64 {
        let lats: Vec<f64> = run
            .invocations
            .iter()
            .filter(|r| r.function_id == id)
            .map(|r| r.latency_s())
            .collect();
        lats.iter().sum::<f64>() / lats.len() as f64
    }

    #[test]
    fn empty_trace_yields_empty_series() {
        let empty = ProfileInputs {
            invocations: &[],
            system_power: &[],
            cpu_power: None,
            utilization: None,
            counters: None,
        };
        let report = run_online(&empty, &bare_params()).unwrap();
        assert!(report.points.is_empty());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn short_trace_is_rejected_for_init() {
        let power: Vec<PowerSample> = (0..50)
            .map(|i| PowerSample {
                timestamp_s: i as f64,
                source: Source::System,
                watts: 10.0,
            })
            .collect();
        let inputs = ProfileInputs {
            invocations: &[],
            system_power: &power,
            cpu_power: None,
            utilization: None,
            counters: None,
        };
        assert!(matches!(
            init_state(&inputs, &bare_params()),
            Err(Error::TraceTooShort { .. })
        ));
    }

    #[test]
    fn init_without_invocations_is_empty_and_functions_join_lazily() {
        let mut sc = steady_scenario(300.0);
        // Nothing runs during the init window.
        for f in &mut sc.workload.functions {
            f.start_offset_s = 120.0;
        }
        sc.truth.idle_watts = 15.0;
        let run = simulate(&sc).unwrap();
        let params = KalmanParams {
            mode: Mode::NoIdle,
            idle_watts: Some(15.0),
            ..bare_params()
        };
        let state = init_state(&inputs(&run), &params).unwrap();
        assert_eq!(state.function_ids().count(), 0);
        let report = run_online(&inputs(&run), &params).unwrap();
        assert!(report.points.iter().any(|p| p.function_id == "dd"));
    }

    #[test]
    fn online_combined_mode_runs_and_tracks() {
        let mut sc = steady_scenario(500.0);
        sc.truth.idle_watts = 15.0;
        sc.truth.control_plane_joules_per_invocation = 0.4;
        // Concurrency spikes in this draw brush the default 8-core ceiling.
        sc.synthesis.cores = 16;
        let run = simulate(&sc).unwrap();
        let params = KalmanParams {
            mode: Mode::Combined,
            idle_watts: Some(15.0),
            shared: SharedColumns::default(),
            correct_skew: false,
            ..Default::default()
        };
        let report = run_online(&inputs(&run), &params).unwrap();
        assert!(report.steps > 0);
        let last_ts = report.points.last().unwrap().timestamp_s;
        for (id, &x) in &run.truth.per_function_watts {
            let p = report
                .points
                .iter()
                .find(|p| p.timestamp_s == last_ts && &p.function_id == id)
                .unwrap();
            assert!((p.watts - x).abs() / x < 0.1, "{id}: {} vs {x}", p.watts);
        }
        // The control plane is part of the series too.
        assert!(report.points.iter().any(|p| p.function_id == "cp"));
    }
}

//! Footprint-aware power capping: a closed-loop admission controller that
//! decides, invocation by invocation, whether starting work now would push
//! the node past its power cap over the decision horizon.
//!
//! The footprint-aware rule charges each candidate its estimated energy
//! against the horizon's budget: admit iff `W·t + J ≤ W_cap·t`. The
//! baseline buffer rule admits while the meter reads at least
//! `buffer_watts` below the cap. Inside `run_capped` the controller also
//! keeps its own per-interval energy plan built from the footprint
//! estimates, and a candidate must fit the plan in every interval it
//! touches — a burst of short invocations cannot double-book an interval
//! the meter has not caught up with yet. Decisions observe the latest
//! finished meter sample; the physics underneath accrues true draws, so
//! estimation error shows up as overshoot, exactly as it would on a host.

use std::collections::{BTreeMap, VecDeque};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::disagg::FunctionEstimate;
use crate::simulator::{generate_workload, substream, SimScenario};
use crate::trace::{round_ms, PowerSample, Source};
use crate::{Error, Result};

/// Default admission horizon `t`, seconds.
pub const DEFAULT_HORIZON_S: f64 = 1.0;
/// How long the head of the queue may starve before the run aborts with a
/// diagnostic instead of spinning forever.
pub const STARVATION_PATIENCE_S: f64 = 1800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapMode {
    /// Admit iff `W·t + J ≤ W_cap·t`.
    FootprintAware,
    /// Admit iff `W + buffer < W_cap`; knows nothing about footprints.
    BufferOnly,
}

impl CapMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CapMode::FootprintAware => "footprint-aware",
            CapMode::BufferOnly => "buffer-only",
        }
    }
}

impl std::str::FromStr for CapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<CapMode> {
        match s {
            "footprint-aware" | "fa" => Ok(CapMode::FootprintAware),
            "buffer-only" | "buffer" => Ok(CapMode::BufferOnly),
            other => Err(Error::Invalid(format!(
                "unknown cap mode '{other}' (expected footprint-aware or buffer-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapPolicy {
    pub cap_watts: f64,
    /// Horizon `t` of the admission inequality.
    pub horizon_s: f64,
    pub mode: CapMode,
    /// Headroom `b` of the buffer rule; also used when the footprint-aware
    /// rule meets a function it has no estimate for.
    pub buffer_watts: f64,
}

impl CapPolicy {
    pub fn footprint_aware(cap_watts: f64) -> CapPolicy {
        CapPolicy {
            cap_watts,
            horizon_s: DEFAULT_HORIZON_S,
            mode: CapMode::FootprintAware,
            buffer_watts: 0.0,
        }
    }

    pub fn buffer_only(cap_watts: f64, buffer_watts: f64) -> CapPolicy {
        CapPolicy {
            cap_watts,
            horizon_s: DEFAULT_HORIZON_S,
            mode: CapMode::BufferOnly,
            buffer_watts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap_watts > 0.0) || !self.cap_watts.is_finite() && self.cap_watts != f64::INFINITY
        {
            return Err(Error::Invalid("cap_watts must be positive".into()));
        }
        if !(self.horizon_s > 0.0) {
            return Err(Error::Invalid("horizon_s must be positive".into()));
        }
        if !(self.buffer_watts >= 0.0) {
            return Err(Error::Invalid("buffer_watts must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Admission {
    Admit,
    Defer,
}

/// One admission decision, in the order the controller made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueDecision {
    pub timestamp_s: f64,
    pub function_id: String,
    pub admission: Admission,
    /// The energy charged against the horizon; absent under the buffer
    /// rule.
    pub predicted_joules: Option<f64>,
    /// The meter reading the decision saw.
    pub observed_watts: f64,
    /// The footprint-aware rule had no estimate and fell back to the
    /// buffer rule.
    pub buffer_fallback: bool,
}

/// The admission test in isolation, decoupled from the closed loop: given
/// the power the controller believes in and the candidate's footprint,
/// admit or defer. The second value reports that the buffer rule decided
/// (always under `BufferOnly`, and under `FootprintAware` when
/// `footprint_j` is absent).
pub fn admit(policy: &CapPolicy, observed_watts: f64, footprint_j: Option<f64>) -> (Admission, bool) {
    let buffer_rule = |w: f64| {
        if w + policy.buffer_watts < policy.cap_watts {
            Admission::Admit
        } else {
            Admission::Defer
        }
    };
    match (policy.mode, footprint_j) {
        (CapMode::FootprintAware, Some(j)) => {
            let fits = observed_watts * policy.horizon_s + j <= policy.cap_watts * policy.horizon_s;
            (if fits { Admission::Admit } else { Admission::Defer }, false)
        }
        (CapMode::FootprintAware, None) => (buffer_rule(observed_watts), true),
        (CapMode::BufferOnly, _) => (buffer_rule(observed_watts), true),
    }
}

/// One invocation as it actually ran under the cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CappedExecution {
    pub function_id: String,
    /// When the request arrived (its uncapped start time).
    pub arrival_s: f64,
    /// When the controller admitted it.
    pub start_s: f64,
    pub end_s: f64,
}

impl CappedExecution {
    pub fn wait_s(&self) -> f64 {
        self.start_s - self.arrival_s
    }

    /// Completion latency as the caller experiences it: queue wait plus
    /// execution time.
    pub fn latency_s(&self) -> f64 {
        self.end_s - self.arrival_s
    }
}

/// Everything one closed-loop run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CapReport {
    pub policy: CapPolicy,
    pub decisions: Vec<QueueDecision>,
    pub executions: Vec<CappedExecution>,
    /// Meter samples of the capped run.
    pub power: Vec<PowerSample>,
    /// Fraction of meter samples strictly above the cap.
    pub overshoot_fraction: f64,
    pub mean_wait_s: f64,
    pub max_wait_s: f64,
    pub mean_latency_s: f64,
    pub deferrals: usize,
    pub buffer_fallbacks: usize,
}

/// Add `watts` over [start, end) onto per-interval energy bins.
fn paint(bins: &mut Vec<f64>, delta_s: f64, start: f64, end: f64, watts: f64) {
    if !(end > start) || watts == 0.0 {
        return;
    }
    let mut b = (start / delta_s).floor().max(0.0) as usize;
    loop {
        let lo = b as f64 * delta_s;
        if lo >= end {
            break;
        }
        let hi = lo + delta_s;
        let ov = end.min(hi) - start.max(lo);
        if ov > 0.0 {
            if bins.len() <= b {
                bins.resize(b + 1, 0.0);
            }
            bins[b] += watts * ov;
        }
        b += 1;
    }
}

/// Would the plan stay at or under the cap in every interval the candidate
/// touches?
fn plan_fits(
    planned: &[f64],
    delta_s: f64,
    idle_watts: f64,
    cap_watts: f64,
    start: f64,
    end: f64,
    watts: f64,
) -> bool {
    let mut b = (start / delta_s).floor().max(0.0) as usize;
    loop {
        let lo = b as f64 * delta_s;
        if lo >= end {
            return true;
        }
        let hi = lo + delta_s;
        let ov = end.min(hi) - start.max(lo);
        if ov > 0.0 {
            let base = planned.get(b).copied().unwrap_or(0.0);
            if idle_watts + (base + watts * ov) / delta_s > cap_watts + 1e-9 {
                return false;
            }
        }
        b += 1;
    }
}

struct Pending {
    function_id: String,
    arrival_s: f64,
    latency_s: f64,
}

/// Replay a scenario's arrivals through the admission controller. Power is
/// synthesized from what actually got admitted — idle floor, true
/// per-function draws, causal control-plane smear, then the scenario's
/// meter noise and quantization — so the loop is closed: deferred work
/// draws nothing, and admitted work is what the meter sees next tick.
pub fn run_capped(
    scenario: &SimScenario,
    footprints: &BTreeMap<String, FunctionEstimate>,
    policy: &CapPolicy,
) -> Result<CapReport> {
    policy.validate()?;
    scenario.validate()?;
    let truth = &scenario.truth;
    let delta = scenario.synthesis.period_s;
    let idle = truth.idle_watts;
    let horizon = policy.horizon_s;

    let arrivals = {
        let mut a = generate_workload(&scenario.workload)?;
        a.sort_by(|x, y| {
            x.start_s.total_cmp(&y.start_s).then_with(|| x.function_id.cmp(&y.function_id))
        });
        a
    };
    for r in &arrivals {
        if !truth.per_function_watts.contains_key(&r.function_id) {
            return Err(Error::UnknownFunction(r.function_id.clone()));
        }
    }
    if policy.cap_watts <= idle && !arrivals.is_empty() {
        return Err(Error::Starvation {
            function_id: arrivals[0].function_id.clone(),
            msg: format!(
                "cap {} W is at or below the {} W idle floor; nothing can ever be admitted",
                policy.cap_watts, idle
            ),
        });
    }

    // True (physics) and planned (controller model) energy above idle,
    // per meter interval.
    let mut true_bins: Vec<f64> = Vec::new();
    let mut planned_bins: Vec<f64> = Vec::new();
    let mut samples: Vec<PowerSample> = Vec::new();
    let mut noise_rng = substream(scenario.workload.seed, "__cap_meter_noise");
    let noise = (truth.noise_std_watts > 0.0)
        .then(|| Normal::new(0.0, truth.noise_std_watts).expect("noise params"));

    let cp_j = truth.control_plane_joules_per_invocation;
    let cp_window = scenario.synthesis.cp_window_s;

    let mut queue: VecDeque<Pending> = VecDeque::new();
    let mut decisions: Vec<QueueDecision> = Vec::new();
    let mut executions: Vec<CappedExecution> = Vec::new();
    let mut ai = 0usize;
    let mut tick = delta;
    let mut finalized = 0usize;
    // The meter's latest word; before the first sample lands, the
    // controller assumes the idle floor.
    let mut observed = idle;
    // Energy already charged against the current sample, per the
    // sequential same-reading rule.
    let mut committed_watts = 0.0;
    // A buffer-rule admission is invisible to the plan, so admissions
    // freeze until a sample taken wholly after it exists.
    let mut lock_until = f64::NEG_INFINITY;

    let finalize_bin = |k: usize,
                            true_bins: &[f64],
                            samples: &mut Vec<PowerSample>,
                            noise_rng: &mut rand_chacha::ChaCha8Rng|
     -> f64 {
        let mut w = idle + true_bins.get(k).copied().unwrap_or(0.0) / delta;
        if let Some(n) = &noise {
            w += n.sample(noise_rng);
        }
        if truth.quantization_step_watts > 0.0 {
            let q = truth.quantization_step_watts;
            w = (w / q).round() * q;
        }
        let w = w.max(0.0);
        samples.push(PowerSample {
            timestamp_s: round_ms(k as f64 * delta),
            source: Source::System,
            watts: w,
        });
        w
    };

    while ai < arrivals.len() || !queue.is_empty() {
        let next_arrival = arrivals.get(ai).map(|r| r.start_s);
        let now = match next_arrival {
            Some(a) if a < tick => a,
            _ => tick,
        };
        if now == tick {
            observed = finalize_bin(finalized, &true_bins, &mut samples, &mut noise_rng);
            finalized += 1;
            committed_watts = 0.0;
            tick += delta;
        } else {
            let r = &arrivals[ai];
            queue.push_back(Pending {
                function_id: r.function_id.clone(),
                arrival_s: r.start_s,
                latency_s: r.latency_s(),
            });
            ai += 1;
        }

        // Drain the head of the queue as far as the gates allow.
        while let Some(head) = queue.front() {
            let est = footprints.get(&head.function_id);
            let cur_bin = ((now / delta).floor().max(0.0)) as usize;
            let planned_now = idle + planned_bins.get(cur_bin).copied().unwrap_or(0.0) / delta;
            let w_believed = observed.max(planned_now) + committed_watts;

            let locked = now < lock_until;
            let (mut admission, buffer_ruled) = admit(
                policy,
                w_believed,
                match policy.mode {
                    CapMode::FootprintAware => est.map(|e| e.joules_per_invocation),
                    CapMode::BufferOnly => None,
                },
            );
            if locked {
                admission = Admission::Defer;
            }
            // The plan must also hold in every interval this execution
            // would touch; the buffer rule has no model to plan with.
            if admission == Admission::Admit && !buffer_ruled {
                let e = est.expect("footprint-aware admit always has an estimate");
                if !plan_fits(
                    &planned_bins,
                    delta,
                    idle,
                    policy.cap_watts,
                    now,
                    now + e.mean_latency_s,
                    e.watts,
                ) {
                    admission = Admission::Defer;
                }
            }

            let fallback = policy.mode == CapMode::FootprintAware && est.is_none();
            decisions.push(QueueDecision {
                timestamp_s: now,
                function_id: head.function_id.clone(),
                admission,
                predicted_joules: if buffer_ruled {
                    None
                } else {
                    est.map(|e| e.joules_per_invocation)
                },
                observed_watts: observed,
                buffer_fallback: fallback,
            });

            if admission == Admission::Defer {
                let noiseless =
                    truth.noise_std_watts == 0.0 && truth.quantization_step_watts == 0.0;
                let at_floor = observed <= idle + 1e-9
                    && planned_now <= idle + 1e-9
                    && committed_watts == 0.0
                    && !locked;
                if noiseless && at_floor {
                    return Err(Error::Starvation {
                        function_id: head.function_id.clone(),
                        msg: format!(
                            "{} cannot be admitted even with the node idle under cap {} W",
                            head.function_id, policy.cap_watts
                        ),
                    });
                }
                if now - head.arrival_s > STARVATION_PATIENCE_S {
                    return Err(Error::Starvation {
                        function_id: head.function_id.clone(),
                        msg: format!(
                            "head of queue has waited {:.0} s under cap {} W",
                            now - head.arrival_s,
                            policy.cap_watts
                        ),
                    });
                }
                break;
            }

            let p = queue.pop_front().expect("head exists");
            let x_true = truth.per_function_watts[&p.function_id];
            let end = round_ms(now + p.latency_s);
            paint(&mut true_bins, delta, now, end, x_true);
            if cp_j > 0.0 {
                paint(&mut true_bins, delta, now, now + cp_window, cp_j / cp_window);
            }
            if let Some(e) = est.filter(|_| !buffer_ruled) {
                paint(&mut planned_bins, delta, now, now + e.mean_latency_s, e.watts);
                committed_watts += e.joules_per_invocation / horizon;
            } else {
                // Unknown draw: block admissions until a sample taken
                // entirely after this moment can report it.
                lock_until = ((now / delta).floor() + 2.0) * delta;
            }
            executions.push(CappedExecution {
                function_id: p.function_id,
                arrival_s: p.arrival_s,
                start_s: now,
                end_s: end,
            });
        }
    }

    // Run the meter out over the workload's nominal span and anything
    // still executing.
    let mut span = scenario.workload.duration_s;
    for e in &executions {
        span = span.max(e.end_s);
    }
    let n_bins = ((span / delta).ceil() as usize).max(1);
    while finalized < n_bins {
        finalize_bin(finalized, &true_bins, &mut samples, &mut noise_rng);
        finalized += 1;
    }

    let overshoot = samples.iter().filter(|s| s.watts > policy.cap_watts + 1e-9).count() as f64
        / samples.len().max(1) as f64;
    let n = executions.len() as f64;
    let (mut wait_sum, mut wait_max, mut lat_sum) = (0.0, 0.0f64, 0.0);
    for e in &executions {
        wait_sum += e.wait_s();
        wait_max = wait_max.max(e.wait_s());
        lat_sum += e.latency_s();
    }
    let deferrals = decisions.iter().filter(|d| d.admission == Admission::Defer).count();
    let buffer_fallbacks = decisions
        .iter()
        .filter(|d| d.buffer_fallback && d.admission == Admission::Admit)
        .count();
    Ok(CapReport {
        policy: *policy,
        decisions,
        executions,
        power: samples,
        overshoot_fraction: overshoot,
        mean_wait_s: if n > 0.0 { wait_sum / n } else { 0.0 },
        max_wait_s: wait_max,
        mean_latency_s: if n > 0.0 { lat_sum / n } else { 0.0 },
        deferrals,
        buffer_fallbacks,
    })
}

/// Footprint table straight from ground truth: exact watts, exact mean
/// latency. What a perfect profiler would hand the controller.
pub fn oracle_footprints(scenario: &SimScenario) -> BTreeMap<String, FunctionEstimate> {
    let mut out = BTreeMap::new();
    for f in &scenario.workload.functions {
        let watts = match scenario.truth.per_function_watts.get(&f.function_id) {
            Some(&w) => w,
            None => continue,
        };
        out.insert(
            f.function_id.clone(),
            FunctionEstimate {
                watts,
                joules_per_invocation: watts * f.mean_latency_s,
                mean_latency_s: f.mean_latency_s,
                activations: 0.0,
            },
        );
    }
    out
}

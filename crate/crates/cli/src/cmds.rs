use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use faasmeter_core::attribution::spectrum_from_profile;
use faasmeter_core::capping::{oracle_footprints, run_capped, CapMode, CapPolicy, Admission};
use faasmeter_core::disagg::{
    align_system_power, build_contributions, profile_offline, FunctionEstimate, Mode,
    ProfileInputs, ProfileParams, ProfileReport, SharedColumns, DEFAULT_DELTA_S,
    DEFAULT_RETRAIN_THRESHOLD,
};
use faasmeter_core::kalman::{
    run_online, FootprintPoint, KalmanParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA,
    DEFAULT_INIT_LEN_S, DEFAULT_STEP_LEN_S,
};
use faasmeter_core::signal::{SkewEstimate, DEFAULT_SKEW_BOUND_S};
use faasmeter_core::simulator::{simulate, GroundTruth, SimScenario};
use faasmeter_core::trace::{
    fmt_f64, read_counter_csv, read_invocation_csv, read_power_csv, read_utilization_csv,
    sh_integral, write_counter_csv, write_invocation_csv, write_meta, write_power_csv,
    write_utilization_csv, InvocationRecord, TraceMeta, UtilizationSample,
};
use faasmeter_core::validation::{run_validation, ValidationOptions, ValidationReport};

use crate::out::OutDir;

fn resolve_out(out: Option<PathBuf>, fallback: &Path) -> PathBuf {
    out.unwrap_or_else(|| fallback.to_path_buf())
}

fn maybe<T>(
    path: &Path,
    read: impl Fn(&Path) -> faasmeter_core::Result<Vec<T>>,
) -> Result<Option<Vec<T>>> {
    if path.exists() {
        Ok(Some(read(path)?))
    } else {
        Ok(None)
    }
}

fn load_truth(dir: &Path) -> Result<Option<GroundTruth>> {
    let path = dir.join("truth.json");
    if !path.exists() {
        return Ok(None);
    }
    let body = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let truth: GroundTruth =
        serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(truth))
}

/// Offline estimates or online filter state, as written to `profile.json`.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct ProfileMeta {
    /// "offline" or "online".
    pub kind: String,
    pub mode: String,
    pub delta_s: f64,
    pub idle_watts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ProfileReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_len_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_len_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<SkewEstimate>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario description, JSON
    #[arg(long, value_name = "FILE")]
    pub scenario: PathBuf,
    /// Output directory (default "out")
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

pub fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let scenario = SimScenario::from_file(&args.scenario)?;
    let run = simulate(&scenario)?;
    let mut out = OutDir::create(&resolve_out(args.out, Path::new("out")))?;

    write_invocation_csv(&out.path("invocations.csv"), &run.invocations)?;
    out.record_file("invocations.csv")?;

    write_power_csv(&out.path("system.csv"), &run.system_power)?;
    out.record_file("system.csv")?;
    // Relative timestamps only: a wall-clock epoch would make otherwise
    // identical runs differ byte-for-byte.
    write_meta(
        &out.path("system.csv"),
        &TraceMeta {
            epoch_unix_s: 0.0,
            nominal_period_s: run.period_s,
            source_label: "synthetic wall meter".into(),
        },
    )?;
    out.record_file("system.meta.json")?;

    if let Some(cpu) = &run.cpu_power {
        write_power_csv(&out.path("cpu.csv"), cpu)?;
        out.record_file("cpu.csv")?;
        write_meta(
            &out.path("cpu.csv"),
            &TraceMeta {
                epoch_unix_s: 0.0,
                nominal_period_s: run.period_s,
                source_label: "synthetic cpu rail".into(),
            },
        )?;
        out.record_file("cpu.meta.json")?;
    }

    write_utilization_csv(&out.path("utilization.csv"), &run.utilization)?;
    out.record_file("utilization.csv")?;

    if let Some(counters) = &run.counters {
        write_counter_csv(&out.path("counters.csv"), counters)?;
        out.record_file("counters.csv")?;
    }

    out.write_json("truth.json", &run.truth)?;

    println!(
        "simulated {} invocations across {} functions over {} s",
        run.invocations.len(),
        scenario.workload.functions.len(),
        fmt_f64(run.duration_s),
    );
    let manifest = out.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}

#[derive(Args)]
pub struct SignalArgs {
    /// Directory holding system.csv and, optionally, cpu.csv / counters.csv
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Largest skew magnitude searched, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_SKEW_BOUND_S)]
    pub bound_s: f64,
    /// Meter period fallback when the trace has fewer than two samples, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_DELTA_S)]
    pub delta_s: f64,
    /// Also write the corrected trace as system_aligned.csv
    #[arg(long)]
    pub apply: bool,
    /// Output directory (default: --dir)
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SkewReport {
    skew: Option<SkewEstimate>,
    applied: bool,
}

pub fn signal_cmd(args: SignalArgs) -> Result<()> {
    let system_path = args.dir.join("system.csv");
    if !system_path.exists() {
        bail!("skew estimation needs the meter trace: {} not found", system_path.display());
    }
    let system = read_power_csv(&system_path)?;
    let cpu = maybe(&args.dir.join("cpu.csv"), read_power_csv)?;
    let counters = maybe(&args.dir.join("counters.csv"), read_counter_csv)?;

    let (aligned, skew) = align_system_power(
        &system,
        cpu.as_deref(),
        counters.as_deref(),
        args.bound_s,
        args.delta_s,
    )?;

    let mut out = OutDir::create(&resolve_out(args.out, &args.dir))?;
    out.write_json("skew.json", &SkewReport { skew: skew.clone(), applied: args.apply })?;
    if args.apply {
        write_power_csv(&out.path("system_aligned.csv"), &aligned)?;
        out.record_file("system_aligned.csv")?;
    }

    match &skew {
        Some(s) => println!(
            "estimated skew {} s (residual {})",
            fmt_f64(s.offset_s),
            fmt_f64(s.residual)
        ),
        None => println!("no usable alignment reference; trace left as-is"),
    }
    out.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct ProfileArgs {
    /// Directory holding invocations.csv, system.csv and friends
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Estimator: full, no-idle, or combined
    #[arg(long, value_name = "MODE", default_value = "full")]
    pub mode: Mode,
    /// Run the online filter instead of one whole-trace solve
    #[arg(long)]
    pub online: bool,
    /// Solver interval length, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_DELTA_S)]
    pub delta_s: f64,
    /// Static idle floor, watts (default: idle_watts from DIR/truth.json)
    #[arg(long, value_name = "WATTS")]
    pub idle_watts: Option<f64>,
    /// Drop the shared control-plane column
    #[arg(long)]
    pub no_control_plane: bool,
    /// Add a shared OS column
    #[arg(long)]
    pub os_column: bool,
    /// Skip meter skew estimation and correction
    #[arg(long)]
    pub no_skew_correction: bool,
    /// Largest skew magnitude searched, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_SKEW_BOUND_S)]
    pub skew_bound_s: f64,
    /// Held-out relative error that forces a CPU-model refit (combined mode)
    #[arg(long, value_name = "FRACTION", default_value_t = DEFAULT_RETRAIN_THRESHOLD)]
    pub retrain_threshold: f64,
    /// Estimate memory weight α, dimensionless (online)
    #[arg(long, value_name = "WEIGHT", default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Control-signal weight β, dimensionless (online)
    #[arg(long, value_name = "WEIGHT", default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Latency-variance penalty γ, dimensionless (online)
    #[arg(long, value_name = "WEIGHT", default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Measurement-noise scale k in r = k/δ, watts² × seconds (online)
    #[arg(long, value_name = "SCALE", default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Initial estimate variance, watts² (online)
    #[arg(long, value_name = "VARIANCE", default_value_t = 1.0)]
    pub p0: f64,
    /// Initialization window length, seconds (online)
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_INIT_LEN_S)]
    pub init_len_s: f64,
    /// Filter step length, seconds (online)
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_STEP_LEN_S)]
    pub step_len_s: f64,
    /// Output directory (default "out")
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

pub fn profile_cmd(args: ProfileArgs) -> Result<()> {
    let dir = &args.dir;
    let invocations_path = dir.join("invocations.csv");
    if !invocations_path.exists() {
        bail!("profiling needs the invocation trace: {} not found", invocations_path.display());
    }
    let system_path = dir.join("system.csv");
    if !system_path.exists() {
        bail!("profiling needs the meter trace: {} not found", system_path.display());
    }
    let invocations = read_invocation_csv(&invocations_path)?;
    let system = read_power_csv(&system_path)?;
    let cpu = maybe(&dir.join("cpu.csv"), read_power_csv)?;
    let utilization = maybe(&dir.join("utilization.csv"), read_utilization_csv)?;
    let counters = maybe(&dir.join("counters.csv"), read_counter_csv)?;
    let truth = load_truth(dir)?;

    if args.mode == Mode::Combined {
        if cpu.is_none() {
            bail!(
                "combined mode needs the CPU power trace: {} not found",
                dir.join("cpu.csv").display()
            );
        }
        if counters.is_none() {
            bail!(
                "combined mode needs the hardware-counter trace: {} not found",
                dir.join("counters.csv").display()
            );
        }
    }
    let idle_watts = args.idle_watts.or_else(|| truth.as_ref().map(|t| t.idle_watts));
    if args.mode == Mode::NoIdle && idle_watts.is_none() {
        bail!(
            "no-idle mode needs an idle floor: pass --idle-watts or provide {}",
            dir.join("truth.json").display()
        );
    }
    let shared = SharedColumns { control_plane: !args.no_control_plane, os: args.os_column };
    if shared.control_plane && utilization.is_none() {
        bail!(
            "the shared control-plane column needs the utilization trace: {} not found \
             (or pass --no-control-plane)",
            dir.join("utilization.csv").display()
        );
    }

    let inputs = ProfileInputs {
        invocations: &invocations,
        system_power: &system,
        cpu_power: cpu.as_deref(),
        utilization: utilization.as_deref(),
        counters: counters.as_deref(),
    };

    let mut out = OutDir::create(&resolve_out(args.out, Path::new("out")))?;
    if args.online {
        let params = KalmanParams {
            alpha: args.alpha,
            beta: args.beta,
            gamma: args.gamma,
            noise_scale: args.noise_scale,
            p0: args.p0,
            init_len_s: args.init_len_s,
            step_len_s: args.step_len_s,
            delta_s: args.delta_s,
            mode: args.mode,
            shared,
            idle_watts,
            correct_skew: !args.no_skew_correction,
            skew_bound_s: args.skew_bound_s,
            retrain_threshold: args.retrain_threshold,
        };
        let report = run_online(&inputs, &params)?;
        let mut lines = String::new();
        for p in &report.points {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        out.write_string("footprints.jsonl", &lines)?;
        out.write_json(
            "profile.json",
            &ProfileMeta {
                kind: "online".into(),
                mode: args.mode.as_str().into(),
                delta_s: args.delta_s,
                idle_watts,
                report: None,
                init_len_s: Some(args.init_len_s),
                step_len_s: Some(args.step_len_s),
                steps: Some(report.steps),
                retrains: Some(report.retrains),
                skew: report.skew.clone(),
            },
        )?;
        println!(
            "online profile: {} steps, {} retrains, {} footprint points",
            report.steps,
            report.retrains,
            report.points.len()
        );
    } else {
        let params = ProfileParams {
            mode: args.mode,
            delta_s: args.delta_s,
            shared,
            idle_watts,
            correct_skew: !args.no_skew_correction,
            skew_bound_s: args.skew_bound_s,
            retrain_threshold: args.retrain_threshold,
        };
        let report = profile_offline(&inputs, &params)?;
        let mut lines = String::new();
        for (id, e) in &report.estimates {
            let obj = serde_json::json!({
                "function_id": id,
                "watts": e.watts,
                "joules_per_invocation": e.joules_per_invocation,
                "mean_latency_s": e.mean_latency_s,
                "activations": e.activations,
            });
            lines.push_str(&obj.to_string());
            lines.push('\n');
        }
        out.write_string("footprints.jsonl", &lines)?;
        println!(
            "offline {} profile over [{}, {}] s (residual {}):",
            report.mode,
            fmt_f64(report.window.0),
            fmt_f64(report.window.1),
            fmt_f64(report.residual)
        );
        for (id, e) in &report.estimates {
            println!(
                "  {id}: {:.3} W, {:.3} J/invocation over {} completions",
                e.watts, e.joules_per_invocation, e.activations
            );
        }
        if !report.unidentifiable.is_empty() {
            println!("  unidentifiable: {}", report.unidentifiable.join(", "));
        }
        out.write_json(
            "profile.json",
            &ProfileMeta {
                kind: "offline".into(),
                mode: args.mode.as_str().into(),
                delta_s: args.delta_s,
                idle_watts,
                report: Some(report),
                init_len_s: None,
                step_len_s: None,
                steps: None,
                retrains: None,
                skew: None,
            },
        )?;
    }
    out.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct ValidateArgs {
    /// Scenario description, JSON
    #[arg(long, value_name = "FILE")]
    pub scenario: PathBuf,
    /// Comma-separated estimators to score
    #[arg(long, value_name = "MODES", value_delimiter = ',', default_value = "full,no-idle,combined")]
    pub modes: Vec<Mode>,
    /// Also run the online filter and score per-window Total-Error
    #[arg(long)]
    pub online: bool,
    /// Solver interval length, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = DEFAULT_DELTA_S)]
    pub delta_s: f64,
    /// Skip meter skew estimation and correction
    #[arg(long)]
    pub no_skew_correction: bool,
    /// Output directory (default "out")
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

fn validation_csv(reports: &[ValidationReport]) -> String {
    let mut csv = String::from(
        "scenario,mode,function_id,estimated_j,marginal_j,marginal_negative,\
         individual_difference,latency_normalized_variance,footprint_cov,activations,\
         cosine_similarity,total_error,mean_individual_difference,window_pass_fraction\n",
    );
    for r in reports {
        let pass = r.window_pass_fraction.map(fmt_f64).unwrap_or_default();
        for (id, m) in &r.functions {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.mode,
                id,
                fmt_f64(m.estimated_j),
                fmt_f64(m.marginal_j),
                m.marginal_negative,
                fmt_f64(m.individual_difference),
                fmt_f64(m.latency_normalized_variance),
                fmt_f64(m.footprint_cov),
                fmt_f64(m.activations),
                fmt_f64(r.cosine_similarity),
                fmt_f64(r.total_error),
                fmt_f64(r.mean_individual_difference),
                pass,
            ));
        }
    }
    csv
}

pub fn validate_cmd(args: ValidateArgs) -> Result<()> {
    let scenario = SimScenario::from_file(&args.scenario)?;
    let opts = ValidationOptions {
        modes: args.modes.clone(),
        delta_s: args.delta_s,
        online: args.online,
        correct_skew: !args.no_skew_correction,
        ..ValidationOptions::default()
    };
    let reports = run_validation(&scenario, &opts)?;

    let mut out = OutDir::create(&resolve_out(args.out, Path::new("out")))?;
    out.write_json("validation.json", &reports)?;
    out.write_string("validation.csv", &validation_csv(&reports))?;

    for r in &reports {
        let windows = match r.window_pass_fraction {
            Some(f) => format!(", windows under 10%: {:.0}%", f * 100.0),
            None => String::new(),
        };
        println!(
            "{}/{}: cosine {:.4}, total-error {:.2}%, mean individual difference {:.3}{}",
            r.scenario,
            r.mode,
            r.cosine_similarity,
            r.total_error * 100.0,
            r.mean_individual_difference,
            windows
        );
    }
    out.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct CapArgs {
    /// Scenario description, JSON
    #[arg(long, value_name = "FILE")]
    pub scenario: PathBuf,
    /// Power cap, watts
    #[arg(long, value_name = "WATTS")]
    pub cap_watts: f64,
    /// Controller: footprint-aware or buffer-only
    #[arg(long, value_name = "MODE", default_value = "footprint-aware")]
    pub mode: CapMode,
    /// Admission energy horizon t, seconds
    #[arg(long, value_name = "SECONDS", default_value_t = faasmeter_core::capping::DEFAULT_HORIZON_S)]
    pub horizon_s: f64,
    /// Static safety margin below the cap, watts (buffer-only and fallback)
    #[arg(long, value_name = "WATTS", default_value_t = 0.0)]
    pub buffer_watts: f64,
    /// Footprint table, JSON map of function_id to estimate
    /// (default: derived from the scenario's ground truth)
    #[arg(long, value_name = "FILE")]
    pub footprints: Option<PathBuf>,
    /// Output directory (default "out")
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct CapSummary {
    policy: CapPolicy,
    overshoot_fraction: f64,
    mean_wait_s: f64,
    max_wait_s: f64,
    mean_latency_s: f64,
    deferrals: usize,
    buffer_fallbacks: usize,
    admissions: usize,
    executions: usize,
    power_samples: usize,
}

pub fn cap_cmd(args: CapArgs) -> Result<()> {
    let scenario = SimScenario::from_file(&args.scenario)?;
    let footprints: BTreeMap<String, FunctionEstimate> = match &args.footprints {
        Some(path) => {
            let body =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))?
        }
        None => oracle_footprints(&scenario),
    };
    let policy = CapPolicy {
        cap_watts: args.cap_watts,
        horizon_s: args.horizon_s,
        mode: args.mode,
        buffer_watts: args.buffer_watts,
    };
    let report = run_capped(&scenario, &footprints, &policy)?;

    let mut out = OutDir::create(&resolve_out(args.out, Path::new("out")))?;

    let mut decisions =
        String::from("timestamp_s,function_id,admission,predicted_joules,observed_watts,buffer_fallback\n");
    for d in &report.decisions {
        let admission = match d.admission {
            Admission::Admit => "admit",
            Admission::Defer => "defer",
        };
        decisions.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(d.timestamp_s),
            d.function_id,
            admission,
            d.predicted_joules.map(fmt_f64).unwrap_or_default(),
            fmt_f64(d.observed_watts),
            d.buffer_fallback,
        ));
    }
    out.write_string("cap_decisions.csv", &decisions)?;

    let mut executions = String::from("function_id,arrival_s,start_s,end_s,wait_s,latency_s\n");
    for e in &report.executions {
        executions.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.function_id,
            fmt_f64(e.arrival_s),
            fmt_f64(e.start_s),
            fmt_f64(e.end_s),
            fmt_f64(e.wait_s()),
            fmt_f64(e.latency_s()),
        ));
    }
    out.write_string("cap_executions.csv", &executions)?;

    write_power_csv(&out.path("cap_power.csv"), &report.power)?;
    out.record_file("cap_power.csv")?;

    let admissions =
        report.decisions.iter().filter(|d| d.admission == Admission::Admit).count();
    out.write_json(
        "cap_summary.json",
        &CapSummary {
            policy: report.policy,
            overshoot_fraction: report.overshoot_fraction,
            mean_wait_s: report.mean_wait_s,
            max_wait_s: report.max_wait_s,
            mean_latency_s: report.mean_latency_s,
            deferrals: report.deferrals,
            buffer_fallbacks: report.buffer_fallbacks,
            admissions,
            executions: report.executions.len(),
            power_samples: report.power.len(),
        },
    )?;

    println!(
        "{} at {} W: overshoot {:.2}%, mean wait {:.3} s, mean latency {:.3} s, {} deferrals",
        policy.mode.as_str(),
        fmt_f64(policy.cap_watts),
        report.overshoot_fraction * 100.0,
        report.mean_wait_s,
        report.mean_latency_s,
        report.deferrals
    );
    out.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Results directory holding profile.json and/or validation.json
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Output directory (default: --dir)
    #[arg(long, value_name = "DIR", env = "FAASMETER_OUT")]
    pub out: Option<PathBuf>,
}

fn read_json_if_present<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(value))
}

fn read_footprint_points(path: &Path) -> Result<Vec<FootprintPoint>> {
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: FootprintPoint = serde_json::from_str(line)
            .with_context(|| format!("parsing {} line {}", path.display(), i + 1))?;
        points.push(p);
    }
    Ok(points)
}

/// Column-sum of running-time contributions per principal over a window.
fn colsums(
    invocations: &[InvocationRecord],
    utilization: Option<&[UtilizationSample]>,
    delta_s: f64,
    window: (f64, f64),
    shared: SharedColumns,
) -> Result<BTreeMap<String, f64>> {
    let cm = build_contributions(invocations, utilization, delta_s, window, shared)?;
    Ok(cm
        .columns
        .iter()
        .enumerate()
        .map(|(j, col)| (col.name().to_string(), cm.c.column(j).sum()))
        .collect())
}

/// One stacked-energy row: window bounds, idle, per-principal joules, and
/// their literal sum, which is exactly the energy the profile predicts for
/// the window.
struct StackedRow {
    window: (f64, f64),
    idle_j: f64,
    parts: BTreeMap<String, f64>,
}

fn stacked_csv(ids: &[String], rows: &[StackedRow]) -> String {
    let mut csv = String::from("window_start_s,window_end_s,idle_j");
    for id in ids {
        csv.push_str(&format!(",{id}_j"));
    }
    csv.push_str(",total_j\n");
    for row in rows {
        let mut total = row.idle_j;
        let mut line = format!(
            "{},{},{}",
            fmt_f64(row.window.0),
            fmt_f64(row.window.1),
            fmt_f64(row.idle_j)
        );
        for id in ids {
            let j = row.parts.get(id).copied().unwrap_or(0.0);
            total += j;
            line.push_str(&format!(",{}", fmt_f64(j)));
        }
        csv.push_str(&format!("{line},{}\n", fmt_f64(total)));
    }
    csv
}

fn stacked_offline(profile: &ProfileMeta, report: &ProfileReport, dir: &Path) -> Result<String> {
    let invocations_path = dir.join("invocations.csv");
    if !invocations_path.exists() {
        bail!("stacked energy needs the invocation trace: {} not found", invocations_path.display());
    }
    let invocations = read_invocation_csv(&invocations_path)?;
    // Function columns don't depend on the shared flags, so the matrix can
    // skip the shared principals: their energies come straight from the
    // report's mean draws.
    let sums = colsums(
        &invocations,
        None,
        profile.delta_s,
        report.window,
        SharedColumns::NONE,
    )?;
    let len = report.window.1 - report.window.0;
    let mut parts = BTreeMap::new();
    let mut ids = Vec::new();
    for (id, e) in &report.estimates {
        parts.insert(id.clone(), e.watts * sums.get(id).copied().unwrap_or(0.0));
        ids.push(id.clone());
    }
    if let Some(cp) = report.cp_watts {
        parts.insert("cp".into(), cp * len);
        ids.push("cp".into());
    }
    if let Some(os) = report.os_watts {
        parts.insert("os".into(), os * len);
        ids.push("os".into());
    }
    let idle_j = profile.idle_watts.unwrap_or(0.0) * len;
    let rows = vec![StackedRow { window: report.window, idle_j, parts }];
    Ok(stacked_csv(&ids, &rows))
}

fn stacked_online(profile: &ProfileMeta, dir: &Path) -> Result<String> {
    let points_path = dir.join("footprints.jsonl");
    if !points_path.exists() {
        bail!("stacked energy needs the footprint series: {} not found", points_path.display());
    }
    let points = read_footprint_points(&points_path)?;
    let invocations_path = dir.join("invocations.csv");
    if !invocations_path.exists() {
        bail!("stacked energy needs the invocation trace: {} not found", invocations_path.display());
    }
    let invocations = read_invocation_csv(&invocations_path)?;
    let step_len = profile
        .step_len_s
        .ok_or_else(|| anyhow::anyhow!("online profile.json is missing step_len_s"))?;

    // Group points into steps by their shared snapshot timestamp (the
    // window end). Positive IEEE-754 doubles order the same as their bits.
    let mut steps: BTreeMap<u64, Vec<&FootprintPoint>> = BTreeMap::new();
    for p in &points {
        steps.entry(p.timestamp_s.to_bits()).or_default().push(p);
    }
    let mut ids: Vec<String> = Vec::new();
    for p in &points {
        if !ids.contains(&p.function_id) {
            ids.push(p.function_id.clone());
        }
    }
    ids.sort();
    let has_cp = ids.iter().any(|i| i == "cp");
    let has_os = ids.iter().any(|i| i == "os");
    let shared = SharedColumns { control_plane: has_cp, os: has_os };
    let utilization = if has_cp || has_os {
        let path = dir.join("utilization.csv");
        if !path.exists() {
            bail!(
                "stacked energy with shared principals needs the utilization trace: {} not found",
                path.display()
            );
        }
        Some(read_utilization_csv(&path)?)
    } else {
        None
    };

    let idle = profile.idle_watts.unwrap_or(0.0);
    let mut rows = Vec::new();
    for (bits, group) in &steps {
        let end = f64::from_bits(*bits);
        let window = (end - step_len, end);
        let sums = colsums(&invocations, utilization.as_deref(), profile.delta_s, window, shared)?;
        let mut parts = BTreeMap::new();
        for p in group {
            parts.insert(
                p.function_id.clone(),
                p.watts * sums.get(&p.function_id).copied().unwrap_or(0.0),
            );
        }
        rows.push(StackedRow { window, idle_j: idle * step_len, parts });
    }
    Ok(stacked_csv(&ids, &rows))
}

fn spectrum_csv(profile: &ProfileMeta, report: &ProfileReport, dir: &Path) -> Result<String> {
    let system_path = dir.join("system.csv");
    if !system_path.exists() {
        bail!("the footprint spectrum needs the meter trace: {} not found", system_path.display());
    }
    let system = read_power_csv(&system_path)?;
    let total_measured = sh_integral(&system, report.window.0, report.window.1);
    let spectrum =
        spectrum_from_profile(report, profile.idle_watts.unwrap_or(0.0), total_measured)?;
    let mut csv = String::from("function_id,j_indiv,phi_cp,phi_idle,j_total,activations\n");
    for (id, e) in &spectrum.entries {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            id,
            fmt_f64(e.j_indiv),
            fmt_f64(e.phi_cp),
            fmt_f64(e.phi_idle),
            fmt_f64(e.j_total),
            fmt_f64(e.activations),
        ));
    }
    println!(
        "spectrum over [{}, {}] s: attributed {:.1} J of {:.1} J measured \
         (unattributed cp {:.1} J, idle {:.1} J, residual {:.1} J)",
        fmt_f64(spectrum.window.0),
        fmt_f64(spectrum.window.1),
        spectrum.attributed_j(),
        spectrum.total_measured_j,
        spectrum.unattributed_cp_j,
        spectrum.unattributed_idle_j,
        spectrum.residual_j,
    );
    Ok(csv)
}

fn summary_csv(reports: &[ValidationReport]) -> String {
    let mut csv = String::from(
        "scenario,mode,cosine_similarity,total_error,mean_individual_difference,window_pass_fraction\n",
    );
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scenario,
            r.mode,
            fmt_f64(r.cosine_similarity),
            fmt_f64(r.total_error),
            fmt_f64(r.mean_individual_difference),
            r.window_pass_fraction.map(fmt_f64).unwrap_or_default(),
        ));
    }
    csv
}

pub fn report_cmd(args: ReportArgs) -> Result<()> {
    let dir = &args.dir;
    let profile: Option<ProfileMeta> = read_json_if_present(&dir.join("profile.json"))?;
    let validation: Option<Vec<ValidationReport>> =
        read_json_if_present(&dir.join("validation.json"))?;
    if profile.is_none() && validation.is_none() {
        bail!(
            "nothing to report in {}: expected profile.json or validation.json",
            dir.display()
        );
    }

    let out_root = resolve_out(args.out, dir);
    let mut out = OutDir::create(&out_root)?;
    if let Some(profile) = &profile {
        let stacked = match &profile.report {
            Some(report) => stacked_offline(profile, report, dir)?,
            None => stacked_online(profile, dir)?,
        };
        out.write_string("stacked_energy.csv", &stacked)?;
        if let Some(report) = &profile.report {
            out.write_string("spectrum.csv", &spectrum_csv(profile, report, dir)?)?;
        }
    }
    if let Some(reports) = &validation {
        out.write_string("summary.csv", &summary_csv(reports))?;
        for r in reports {
            println!(
                "{}/{}: cosine {:.4}, total-error {:.2}%",
                r.scenario,
                r.mode,
                r.cosine_similarity,
                r.total_error * 100.0
            );
        }
    }
    out.finish()?;
    println!("report written to {}", out_root.display());
    Ok(())
}

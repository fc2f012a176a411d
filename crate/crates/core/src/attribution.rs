//! Full-spectrum energy footprints: individual draw plus fair shares of
//! the control plane and of idle power. Control-plane energy is divided in
//! proportion to invocation counts (equal per invocation), idle energy
//! evenly across the active functions — the closed forms the Shapley value
//! takes for these cost structures, since enumerating coalitions head-on
//! is hopeless at any real invocation volume.

use std::collections::BTreeMap;

use crate::disagg::ProfileReport;
use crate::{Error, Result};

/// Control-plane energy split over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct CpSplit {
    /// Joules attributed to each function over the whole window.
    pub per_function_j: BTreeMap<String, f64>,
    /// Uniform per-invocation share, J_cp / ΣA.
    pub per_invocation_j: f64,
    /// Control-plane energy with nobody to charge (no invocations at all).
    pub unattributed_j: f64,
}

/// Split control-plane energy in proportion to invocation counts: every
/// invocation pays the same, so function i's total is J_cp·A_i/ΣA.
pub fn split_control_plane(j_cp: f64, activations: &BTreeMap<String, f64>) -> Result<CpSplit> {
    if !(j_cp >= 0.0) {
        return Err(Error::Invalid(format!("control-plane energy must be nonnegative: {j_cp}")));
    }
    let total: f64 = activations.values().sum();
    if total <= 0.0 {
        return Ok(CpSplit {
            per_function_j: activations.keys().map(|id| (id.clone(), 0.0)).collect(),
            per_invocation_j: 0.0,
            unattributed_j: j_cp,
        });
    }
    let per_invocation_j = j_cp / total;
    let per_function_j = activations
        .iter()
        .map(|(id, &a)| (id.clone(), per_invocation_j * a))
        .collect();
    Ok(CpSplit { per_function_j, per_invocation_j, unattributed_j: 0.0 })
}

/// Idle energy split over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleSplit {
    /// Joules per function over the whole window: J_idle / M for each of
    /// the M active functions.
    pub per_function_j: BTreeMap<String, f64>,
    /// Per-invocation share, J_idle / (M·A_i).
    pub per_invocation_j: BTreeMap<String, f64>,
    /// Idle energy in a window with no active function.
    pub unattributed_j: f64,
}

/// Split idle energy evenly among the functions active in the window
/// (A_i > 0). Keeping the machine on benefits everyone equally, however
/// often they run; per invocation the even share is divided by A_i.
pub fn split_idle(j_idle: f64, activations: &BTreeMap<String, f64>) -> Result<IdleSplit> {
    if !(j_idle >= 0.0) {
        return Err(Error::Invalid(format!("idle energy must be nonnegative: {j_idle}")));
    }
    let m = activations.values().filter(|&&a| a > 0.0).count();
    if m == 0 {
        return Ok(IdleSplit {
            per_function_j: activations.keys().map(|id| (id.clone(), 0.0)).collect(),
            per_invocation_j: activations.keys().map(|id| (id.clone(), 0.0)).collect(),
            unattributed_j: j_idle,
        });
    }
    let share = j_idle / m as f64;
    let per_function_j: BTreeMap<String, f64> = activations
        .iter()
        .map(|(id, &a)| (id.clone(), if a > 0.0 { share } else { 0.0 }))
        .collect();
    let per_invocation_j = activations
        .iter()
        .map(|(id, &a)| (id.clone(), if a > 0.0 { share / a } else { 0.0 }))
        .collect();
    Ok(IdleSplit { per_function_j, per_invocation_j, unattributed_j: 0.0 })
}

/// One function's footprint decomposition, all in joules per invocation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumEntry {
    pub j_indiv: f64,
    pub phi_cp: f64,
    pub phi_idle: f64,
    pub j_total: f64,
    pub activations: f64,
}

/// The full per-window footprint spectrum, plus the window's energy
/// accounting: explicitly unattributable buckets and the leftover residual
/// between measured and attributed energy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FootprintSpectrum {
    pub window: (f64, f64),
    pub entries: BTreeMap<String, SpectrumEntry>,
    pub unattributed_cp_j: f64,
    pub unattributed_idle_j: f64,
    /// Measured energy minus everything attributed (including the
    /// unattributed buckets). The solver minimizes this upstream.
    pub residual_j: f64,
    pub total_measured_j: f64,
}

impl FootprintSpectrum {
    /// Joules handed out to functions over the window.
    pub fn attributed_j(&self) -> f64 {
        self.entries.values().map(|e| e.j_total * e.activations).sum()
    }
}

/// Assemble the spectrum from idle-free power estimates, latencies, and
/// activation counts. J_indiv = X·τ̄; shares come from the splits above;
/// J_total is their sum, exactly. Functions without activations get
/// all-zero entries.
pub fn build_spectrum(
    x_no_idle: &BTreeMap<String, f64>,
    mean_latency_s: &BTreeMap<String, f64>,
    j_cp: f64,
    j_idle: f64,
    activations: &BTreeMap<String, f64>,
    window: (f64, f64),
    total_measured_j: f64,
) -> Result<FootprintSpectrum> {
    if !(window.1 > window.0) {
        return Err(Error::Invalid(format!("window [{}, {}] is empty", window.0, window.1)));
    }
    let cp = split_control_plane(j_cp, activations)?;
    let idle = split_idle(j_idle, activations)?;
    let mut entries = BTreeMap::new();
    for (id, &a) in activations {
        if a <= 0.0 {
            entries.insert(
                id.clone(),
                SpectrumEntry {
                    j_indiv: 0.0,
                    phi_cp: 0.0,
                    phi_idle: 0.0,
                    j_total: 0.0,
                    activations: 0.0,
                },
            );
            continue;
        }
        let watts = x_no_idle.get(id).copied().unwrap_or(0.0);
        let tau = mean_latency_s.get(id).copied().unwrap_or(0.0);
        let j_indiv = watts * tau;
        let phi_cp = cp.per_invocation_j;
        let phi_idle = idle.per_invocation_j.get(id).copied().unwrap_or(0.0);
        entries.insert(
            id.clone(),
            SpectrumEntry {
                j_indiv,
                phi_cp,
                phi_idle,
                j_total: j_indiv + phi_cp + phi_idle,
                activations: a,
            },
        );
    }
    let attributed: f64 = entries
        .values()
        .map(|e: &SpectrumEntry| e.j_total * e.activations)
        .sum::<f64>()
        + cp.unattributed_j
        + idle.unattributed_j;
    Ok(FootprintSpectrum {
        window,
        entries,
        unattributed_cp_j: cp.unattributed_j,
        unattributed_idle_j: idle.unattributed_j,
        residual_j: total_measured_j - attributed,
        total_measured_j,
    })
}

/// Spectrum straight from an offline profile: the solved control-plane
/// coefficient times the window length funds the cp pot, configured idle
/// watts fund the idle pot. Estimates are expected to be idle-free
/// (no-idle or combined-with-idle-subtraction modes).
pub fn spectrum_from_profile(
    report: &ProfileReport,
    idle_watts: f64,
    total_measured_j: f64,
) -> Result<FootprintSpectrum> {
    if !(idle_watts >= 0.0) {
        return Err(Error::Invalid(format!("idle watts must be nonnegative: {idle_watts}")));
    }
    let len = report.window.1 - report.window.0;
    let j_cp = report.cp_watts.unwrap_or(0.0) * len;
    let j_idle = idle_watts * len;
    let x: BTreeMap<String, f64> =
        report.estimates.iter().map(|(id, e)| (id.clone(), e.watts)).collect();
    let tau: BTreeMap<String, f64> =
        report.estimates.iter().map(|(id, e)| (id.clone(), e.mean_latency_s)).collect();
    let a: BTreeMap<String, f64> =
        report.estimates.iter().map(|(id, e)| (id.clone(), e.activations)).collect();
    build_spectrum(&x, &tau, j_cp, j_idle, &a, report.window, total_measured_j)
}

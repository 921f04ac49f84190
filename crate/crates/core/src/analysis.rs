//! Gradient-divergence estimates and the error bounds built on them.
//!
//! `δ_m` bounds how far a vehicle's gradient strays from the global one,
//! `Δ_n` the same for an edge's weighted mix of its current members. Both
//! are estimated as maxima over a set of probe points, normally the
//! recorded centralized trajectory plus the origin and the optimum. The
//! per-window bound is
//!
//! ```text
//! r(τ) = δ/β·((1+ηβ)^τ − 1) − τηδ
//! U_k  = r(τ_l τ_e) − η τ_l [ ½ τ_e (τ_e−1) δ − Σ_{j=1}^{τ_e−1} j Δ^[k τ_e + j] ]
//! ```
//!
//! where window `k = 0, 1, …` ends at iteration `(k+1) τ_l τ_e` and
//! `Δ^[j]` is the weighted edge divergence under association snapshot `j`.

use std::collections::HashMap;

use serde::Serialize;

use crate::datasets::Shard;
use crate::engine::{AggregationWeights, VirtualTrace};
use crate::error::{Error, Result};
use crate::mobility::AssociationSnapshot;
use crate::models::{FederatedObjective, ModelSpec};
use crate::params::ParamVector;

/// Slack allowed on every measured-versus-bound comparison.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// `base^exp` by repeated squaring.
pub fn pow_by_squaring(mut base: f64, mut exp: u64) -> f64 {
    let mut acc = 1.0;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= base;
        }
        base *= base;
        exp >>= 1;
    }
    acc
}

pub fn r_function(tau: u64, eta: f64, delta: f64, beta: f64) -> f64 {
    delta / beta * (pow_by_squaring(1.0 + eta * beta, tau) - 1.0) - tau as f64 * eta * delta
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceEstimates {
    pub delta_m: Vec<f64>,
    /// `δ = Σ α_m δ_m`
    pub delta: f64,
    /// `δ_n` per snapshot and edge, `None` for empty edges.
    pub delta_n: Vec<Vec<Option<f64>>>,
    /// `Δ_n` per snapshot and edge, `None` for empty edges.
    pub big_delta_n: Vec<Vec<Option<f64>>>,
    /// `Δ^[j] = Σ_n θ_n Δ_n` under snapshot `j`.
    pub big_delta: Vec<f64>,
    pub probe_count: usize,
}

/// Maximum gradient divergences over `probes` for every snapshot in
/// `history`. Identical snapshots are evaluated once.
pub fn estimate_divergences(
    spec: &ModelSpec,
    shards: &[Shard],
    history: &[AssociationSnapshot],
    probes: &[ParamVector],
) -> Result<DivergenceEstimates> {
    if probes.is_empty() {
        return Err(Error::InvalidParameter("need at least one probe".into()));
    }
    if let Some(p) = probes.iter().find(|p| p.len() != spec.param_len()) {
        return Err(Error::DimensionMismatch {
            expected: spec.param_len(),
            actual: p.len(),
        });
    }
    let objective = FederatedObjective::new(spec, shards)?;
    let sizes: Vec<usize> = shards.iter().map(Shard::size).collect();
    let alpha = objective.weights().to_vec();

    // Per probe: ∇f_m − ∇F for every vehicle.
    let mut diffs: Vec<Vec<ParamVector>> = Vec::with_capacity(probes.len());
    for w in probes {
        let grads = objective.shard_gradients(w)?;
        let global = ParamVector::weighted_sum(alpha.iter().copied().zip(&grads))
            .expect("at least one shard");
        diffs.push(grads.iter().map(|g| g.sub(&global)).collect());
    }

    let mut delta_m = vec![0.0f64; shards.len()];
    for per_probe in &diffs {
        for (d, diff) in delta_m.iter_mut().zip(per_probe) {
            *d = d.max(diff.norm());
        }
    }
    let delta = alpha.iter().zip(&delta_m).map(|(a, d)| a * d).sum();

    let mut cache: HashMap<&[usize], (Vec<Option<f64>>, Vec<Option<f64>>, f64)> = HashMap::new();
    let mut delta_n = Vec::with_capacity(history.len());
    let mut big_delta_n = Vec::with_capacity(history.len());
    let mut big_delta = Vec::with_capacity(history.len());
    for snap in history {
        if snap.vehicle_count() != shards.len() {
            return Err(Error::DimensionMismatch {
                expected: shards.len(),
                actual: snap.vehicle_count(),
            });
        }
        let entry = cache.entry(snap.assignments()).or_insert_with(|| {
            let weights = AggregationWeights::new(&sizes, snap);
            let mut dn = Vec::with_capacity(snap.edge_count());
            let mut bdn = Vec::with_capacity(snap.edge_count());
            for n in 0..snap.edge_count() {
                let members = snap.members(n);
                if members.is_empty() {
                    dn.push(None);
                    bdn.push(None);
                    continue;
                }
                dn.push(Some(members.iter().map(|&m| weights.alpha_mn[m] * delta_m[m]).sum()));
                let mut worst = 0.0f64;
                for per_probe in &diffs {
                    let mix = ParamVector::weighted_sum(
                        members.iter().map(|&m| (weights.alpha_mn[m], &per_probe[m])),
                    )
                    .expect("nonempty edge");
                    worst = worst.max(mix.norm());
                }
                bdn.push(Some(worst));
            }
            let total = bdn
                .iter()
                .zip(&weights.theta_n)
                .filter_map(|(d, t)| d.map(|d| t * d))
                .sum();
            (dn, bdn, total)
        });
        delta_n.push(entry.0.clone());
        big_delta_n.push(entry.1.clone());
        big_delta.push(entry.2);
    }

    Ok(DivergenceEstimates {
        delta_m,
        delta,
        delta_n,
        big_delta_n,
        big_delta,
        probe_count: probes.len(),
    })
}

impl DivergenceEstimates {
    /// Multiplies every divergence by `factor`. Used to check that the
    /// bound checks notice an underestimated heterogeneity.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale_table = |t: &Vec<Vec<Option<f64>>>| {
            t.iter()
                .map(|row| row.iter().map(|v| v.map(|x| x * factor)).collect())
                .collect()
        };
        Self {
            delta_m: self.delta_m.iter().map(|d| d * factor).collect(),
            delta: self.delta * factor,
            delta_n: scale_table(&self.delta_n),
            big_delta_n: scale_table(&self.big_delta_n),
            big_delta: self.big_delta.iter().map(|d| d * factor).collect(),
            probe_count: self.probe_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub eta: f64,
    pub beta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
}

impl StepSchedule {
    fn window(&self) -> usize {
        self.tau_l * self.tau_e
    }

    fn check_tau0(&self, tau0: usize) -> Result<()> {
        if tau0 == 0 || tau0 > self.window() {
            Err(Error::InvalidParameter(format!(
                "tau0 = {tau0} outside 1..={}",
                self.window()
            )))
        } else {
            Ok(())
        }
    }

    /// Distance bound for a vehicle `tau0` steps into a window.
    pub fn vehicle_bound(&self, tau0: usize, delta_m: f64) -> Result<f64> {
        self.check_tau0(tau0)?;
        Ok(delta_m / self.beta * (pow_by_squaring(1.0 + self.eta * self.beta, tau0 as u64) - 1.0))
    }

    /// Distance bound for an edge's virtual model `tau0` steps into a window.
    pub fn edge_bound(&self, tau0: usize, delta_n: f64, big_delta_n: f64) -> Result<f64> {
        Ok(self.vehicle_bound(tau0, delta_n)? - self.eta * tau0 as f64 * (delta_n - big_delta_n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UkEntry {
    /// Window index; the window ends at iteration `(k+1)·τ_l·τ_e`.
    pub k: usize,
    pub u_k: f64,
    pub r_term: f64,
    pub mobility_term: f64,
    pub measured_gap: Option<f64>,
    pub satisfied: Option<bool>,
}

pub fn compute_uk(k: usize, estimates: &DivergenceEstimates, schedule: &StepSchedule) -> Result<UkEntry> {
    let delta = estimates.delta;
    let r_term = r_function(schedule.window() as u64, schedule.eta, delta, schedule.beta);
    let tau_e = schedule.tau_e;
    let mut weighted = 0.0;
    for j in 1..tau_e {
        let idx = k * tau_e + j;
        let d = estimates
            .big_delta
            .get(idx)
            .ok_or(Error::MissingDelta(idx))?;
        weighted += j as f64 * d;
    }
    let half = 0.5 * (tau_e * (tau_e - 1)) as f64;
    let mobility_term = schedule.eta * schedule.tau_l as f64 * (half * delta - weighted);
    Ok(UkEntry {
        k,
        u_k: r_term - mobility_term,
        r_term,
        mobility_term,
        measured_gap: None,
        satisfied: None,
    })
}

/// `U_k` for every window, compared against the recorded gaps.
pub fn uk_report(
    trace: &VirtualTrace,
    estimates: &DivergenceEstimates,
    schedule: &StepSchedule,
    cloud_epochs: usize,
) -> Result<Vec<UkEntry>> {
    (0..cloud_epochs)
        .map(|k| {
            let mut entry = compute_uk(k, estimates, schedule)?;
            let at = (k + 1) * schedule.window();
            if let Some(&gap) = trace.u_vtilde_gap.get(at) {
                entry.measured_gap = Some(gap);
                entry.satisfied = Some(gap <= entry.u_k + BOUND_TOLERANCE);
            }
            Ok(entry)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    VehicleDistance,
    EdgeDistance,
    Recursion,
    WindowGap,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::VehicleDistance => "vehicle_distance",
            CheckKind::EdgeDistance => "edge_distance",
            CheckKind::Recursion => "recursion",
            CheckKind::WindowGap => "window_gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub check: CheckKind,
    pub k: usize,
    pub tau: usize,
    pub tau0: usize,
    /// Vehicle or edge id, where relevant.
    pub unit: Option<usize>,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub check: CheckKind,
    pub comparisons: usize,
    /// Smallest `bound − measured`.
    pub min_slack: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub summaries: Vec<CheckSummary>,
    /// First violation in iteration order.
    pub first_violation: Option<Violation>,
}

impl InequalityReport {
    pub fn all_hold(&self) -> bool {
        self.first_violation.is_none()
    }

    pub fn summary(&self, check: CheckKind) -> &CheckSummary {
        self.summaries
            .iter()
            .find(|s| s.check == check)
            .expect("every kind is summarized")
    }
}

struct Tally {
    summaries: Vec<CheckSummary>,
    first: Option<Violation>,
}

impl Tally {
    fn new() -> Self {
        let kinds = [
            CheckKind::VehicleDistance,
            CheckKind::EdgeDistance,
            CheckKind::Recursion,
            CheckKind::WindowGap,
        ];
        Self {
            summaries: kinds
                .iter()
                .map(|&check| CheckSummary {
                    check,
                    comparisons: 0,
                    min_slack: f64::INFINITY,
                    violations: 0,
                })
                .collect(),
            first: None,
        }
    }

    fn record(&mut self, v: Violation) {
        let s = self
            .summaries
            .iter_mut()
            .find(|s| s.check == v.check)
            .expect("known kind");
        let slack = v.bound - v.measured;
        s.comparisons += 1;
        s.min_slack = s.min_slack.min(slack);
        if !(slack >= -BOUND_TOLERANCE) {
            s.violations += 1;
            let earlier = self
                .first
                .map_or(true, |f| (v.tau, v.check as u8) < (f.tau, f.check as u8));
            if earlier {
                self.first = Some(v);
            }
        }
    }
}

/// Checks every per-vehicle, per-edge, recursion and per-window inequality
/// along a recorded full-batch trace.
pub fn check_inequalities(
    trace: &VirtualTrace,
    estimates: &DivergenceEstimates,
    schedule: &StepSchedule,
    uk: &[UkEntry],
) -> Result<InequalityReport> {
    let window = schedule.window();
    let total = trace.u_vtilde_gap.len().saturating_sub(1);
    if trace.recursion.len() != total || trace.vehicle_gap.len() != total + 1 {
        return Err(Error::Invariant("virtual trace is incomplete".into()));
    }
    let mut tally = Tally::new();
    let eb = schedule.eta * schedule.beta;
    for tau in 1..=total {
        let k = (tau - 1) / window;
        let tau0 = tau - k * window;
        let snap = tau / schedule.tau_l;
        let base = Violation {
            check: CheckKind::VehicleDistance,
            k,
            tau,
            tau0,
            unit: None,
            measured: 0.0,
            bound: 0.0,
        };
        for (m, &gap) in trace.vehicle_gap[tau].iter().enumerate() {
            tally.record(Violation {
                unit: Some(m),
                measured: gap,
                bound: schedule.vehicle_bound(tau0, estimates.delta_m[m])?,
                ..base
            });
        }
        let dn = estimates.delta_n.get(snap).ok_or(Error::MissingDelta(snap))?;
        let bdn = &estimates.big_delta_n[snap];
        for (n, gap) in trace.edge_gap[tau].iter().enumerate() {
            if let (Some(gap), Some(d), Some(bd)) = (gap, dn[n], bdn[n]) {
                tally.record(Violation {
                    check: CheckKind::EdgeDistance,
                    unit: Some(n),
                    measured: *gap,
                    bound: schedule.edge_bound(tau0, d, bd)?,
                    ..base
                });
            }
        }
        let terms = trace.recursion[tau - 1];
        let bound = if (tau - 1) % window == 0 {
            0.0
        } else if (tau - 1) % schedule.tau_l == 0 {
            terms.u_v + eb * terms.edge_term
        } else {
            terms.u_v + eb * terms.vehicle_term
        };
        tally.record(Violation {
            check: CheckKind::Recursion,
            measured: trace.u_vtilde_gap[tau],
            bound,
            ..base
        });
    }
    for entry in uk {
        if let Some(gap) = entry.measured_gap {
            tally.record(Violation {
                check: CheckKind::WindowGap,
                k: entry.k,
                tau: (entry.k + 1) * window,
                tau0: window,
                unit: None,
                measured: gap,
                bound: entry.u_k,
            });
        }
    }
    Ok(InequalityReport {
        summaries: tally.summaries,
        first_violation: tally.first,
    })
}

#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub beta: f64,
    pub rho: f64,
    pub eta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    /// Chosen as the largest value meeting conditions 3 and 4 when absent.
    pub epsilon: Option<f64>,
    pub w_star: ParamVector,
    pub f_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionRow {
    /// Cloud epoch, counted from 1.
    pub k: usize,
    pub step_size: bool,
    pub positive_rate: bool,
    pub centralized_gap: bool,
    pub cloud_value: bool,
    /// Condition 4 with `F*` subtracted.
    pub cloud_gap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBoundReport {
    pub epsilon: Option<f64>,
    pub phi: Option<f64>,
    pub bound: Option<f64>,
    /// Bound under the centered reading of condition 4.
    pub bound_strict: Option<f64>,
    pub measured_final_gap: f64,
    pub applicable: bool,
    pub applicable_strict: bool,
    /// Set when `ṽ` hit the optimum exactly, leaving `φ` undefined.
    pub degenerate: bool,
    pub conditions: Vec<ConditionRow>,
}

impl GapBoundReport {
    pub fn holds(&self) -> Option<bool> {
        self.bound.map(|b| self.measured_final_gap <= b)
    }
}

/// Evaluates the convergence-gap bound for the final cloud model.
///
/// `cloud_models[k]` is the cloud model at the end of epoch `k`, entry 0
/// being the initialization. `uk[k-1]` bounds the gap at the end of epoch
/// `k`.
pub fn check_gap_bound(
    objective: &FederatedObjective<'_>,
    trace: &VirtualTrace,
    cloud_models: &[ParamVector],
    uk: &[UkEntry],
    inputs: &BoundInputs,
) -> Result<GapBoundReport> {
    let kk = inputs.cloud_epochs;
    let window = inputs.tau_l * inputs.tau_e;
    if cloud_models.len() != kk + 1 || uk.len() != kk || trace.vtilde.len() < kk * window + 1 {
        return Err(Error::Invariant("trace does not cover every cloud epoch".into()));
    }
    let measured_final_gap = objective.value(&cloud_models[kk])? - inputs.f_star;

    let numerator = 1.0 - inputs.beta * inputs.eta / 2.0;
    let mut phi = f64::INFINITY;
    let mut degenerate = false;
    for k in 1..=kk {
        let dist = trace.vtilde[(k - 1) * window].distance(&inputs.w_star);
        if dist == 0.0 {
            degenerate = true;
            break;
        }
        phi = phi.min(numerator / (dist * dist));
    }

    let mut centralized = Vec::with_capacity(kk);
    let mut cloud_values = Vec::with_capacity(kk);
    for k in 1..=kk {
        centralized.push(objective.value(&trace.vtilde[k * window])? - inputs.f_star);
        cloud_values.push(objective.value(&cloud_models[k])?);
    }
    let epsilon = inputs.epsilon.or_else(|| {
        let eps = centralized
            .iter()
            .chain(&cloud_values)
            .copied()
            .fold(f64::INFINITY, f64::min);
        (eps > 0.0).then_some(eps)
    });

    let step_size = inputs.eta <= 1.0 / inputs.beta;
    let conditions: Vec<ConditionRow> = (1..=kk)
        .map(|k| {
            let eps = epsilon.unwrap_or(f64::NAN);
            let rate = inputs.eta * phi
                - inputs.rho * uk[k - 1].u_k / (window as f64 * eps * eps);
            ConditionRow {
                k,
                step_size,
                positive_rate: !degenerate && rate > 0.0,
                centralized_gap: centralized[k - 1] >= eps,
                cloud_value: cloud_values[k - 1] >= eps,
                cloud_gap: cloud_values[k - 1] - inputs.f_star >= eps,
            }
        })
        .collect();

    let common = conditions
        .iter()
        .all(|c| c.step_size && c.positive_rate && c.centralized_gap);
    let printed = common && conditions.iter().all(|c| c.cloud_value);
    let strict = common && conditions.iter().all(|c| c.cloud_gap);

    let denominator = epsilon.map(|eps| {
        let total = window as f64 * kk as f64;
        let sum_u: f64 = uk.iter().map(|e| e.u_k).sum();
        total * inputs.eta * phi - inputs.rho * sum_u / (eps * eps)
    });
    let value = denominator.filter(|&d| d > 0.0).map(|d| 1.0 / d);
    let applicable = printed && value.is_some();
    let applicable_strict = strict && value.is_some();
    Ok(GapBoundReport {
        epsilon,
        phi: (!degenerate).then_some(phi),
        bound: value.filter(|_| applicable),
        bound_strict: value.filter(|_| applicable_strict),
        measured_final_gap,
        applicable,
        applicable_strict,
        degenerate,
        conditions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingReport {
    /// `(j, Δ^[j])` for edge rounds `j ≥ 1`.
    pub series: Vec<(usize, f64)>,
    pub first_quarter_mean: f64,
    pub last_quarter_mean: f64,
}

impl MixingReport {
    pub fn ratio(&self) -> f64 {
        self.last_quarter_mean / self.first_quarter_mean
    }
}

pub fn mobility_mixing_report(estimates: &DivergenceEstimates) -> MixingReport {
    let series: Vec<(usize, f64)> = estimates
        .big_delta
        .iter()
        .copied()
        .enumerate()
        .skip(1)
        .collect();
    let quarter = (series.len() / 4).max(1).min(series.len());
    let mean = |s: &[(usize, f64)]| {
        if s.is_empty() {
            f64::NAN
        } else {
            s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64
        }
    };
    MixingReport {
        first_quarter_mean: mean(&series[..quarter]),
        last_quarter_mean: mean(&series[series.len() - quarter..]),
        series,
    }
}

pub const BOUND_REPORT_HEADER: &str = "k,U_k,r_term,mobility_term,measured_gap_u_vtilde,satisfied";

pub fn bound_report_csv(entries: &[UkEntry]) -> String {
    let mut out = String::from(BOUND_REPORT_HEADER);
    out.push('\n');
    for e in entries {
        let gap = e.measured_gap.map(|g| g.to_string()).unwrap_or_default();
        let ok = e.satisfied.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.k, e.u_k, e.r_term, e.mobility_term, gap, ok
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary<'a> {
    pub beta: f64,
    pub rho: f64,
    pub delta: f64,
    pub epsilon: Option<f64>,
    pub phi: Option<f64>,
    pub bound: Option<f64>,
    pub bound_strict: Option<f64>,
    pub measured_final_gap: f64,
    pub applicable: bool,
    pub applicable_strict: bool,
    pub conditions: &'a [ConditionRow],
    pub checks: &'a [CheckSummary],
    pub first_violation: Option<Violation>,
}

/// Pretty JSON; non-finite numbers come out as `null`.
pub fn summary_json(summary: &BoundSummary<'_>) -> String {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    text
}

//! Experiment commands: training runs, speed sweeps, bound verification and
//! partition reports. Every file is written to a temporary sibling first and
//! renamed into place.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{
    bound_report_csv, check_inequalities, check_gap_bound, estimate_divergences,
    mobility_mixing_report, summary_json, uk_report, BoundInputs, BoundSummary, DivergenceEstimates,
    GapBoundReport, InequalityReport, StepSchedule, UkEntry, Violation,
};
use crate::config::{DataSource, ExperimentConfig, MobilityModel};
use crate::datasets::{
    generate_synthetic, load_csv, partition, shared_input_partition, train_test_split,
    LabeledDataset, Partition, PartitionSpec, Regime, SharedInputSpec,
};
use crate::engine::{metrics_csv, run, run_until_accuracy, HflConfig, RunInputs, RunOutput, Topology};
use crate::error::{Error, Result};
use crate::mobility::{
    advance, associate, init_positions, AssociationSnapshot, Placement, RoadNetwork, TRACE_HEADER,
};
use crate::models::{
    estimate_constants, initial_params, solve_optimum, FederatedObjective, ModelSpec,
};
use crate::params::ParamVector;

pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
    pub const VIOLATION: i32 = 5;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::InfeasiblePartition(_)
        | Error::Unsupported(_)
        | Error::DimensionMismatch { .. } => exit::CONFIG,
        Error::Divergence { .. } => exit::DIVERGENCE,
        Error::Io(_) | Error::Parse { .. } | Error::EmptyFile | Error::Checkpoint(_) => exit::IO,
        Error::NotConverged { .. } | Error::Invariant(_) | Error::MissingDelta(_) => exit::INTERNAL,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Data, shards and model shape derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub partition: Partition,
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let p = &cfg.partition;
    let (part, test) = match d.source {
        DataSource::SharedInput => {
            let part = shared_input_partition(&SharedInputSpec {
                vehicle_count: p.vehicles,
                edge_count: p.edges,
                class_count: d.classes,
                classes_per_edge: p.classes_per_unit,
                dim: d.dim,
                samples_per_vehicle: d.samples_per_vehicle,
                feature_scale: d.feature_scale,
                seed: d.seed,
            })?;
            (part, None)
        }
        DataSource::Synthetic | DataSource::Csv => {
            let data = if d.source == DataSource::Csv {
                load_csv(&d.path)?
            } else {
                generate_synthetic(d.classes, d.dim, d.samples_per_class, d.separation, d.seed)?
            };
            let (train, test) = if d.test_fraction > 0.0 {
                let (train, test) = train_test_split(&data, d.test_fraction, d.seed)?;
                (train, Some(test))
            } else {
                (data, None)
            };
            let part = partition(
                &train,
                &PartitionSpec {
                    regime: p.regime,
                    classes_per_unit: p.classes_per_unit,
                    vehicle_count: p.vehicles,
                    edge_count: p.edges,
                    seed: p.seed,
                    allow_partial_class_coverage: p.allow_partial_class_coverage,
                },
            )?;
            (part, test)
        }
    };
    let train = part.union()?;
    let spec = ModelSpec {
        family: cfg.model.family,
        dim: train.dim(),
        class_count: train.class_count(),
        l2_reg: cfg.model.l2_reg,
        hidden_width: cfg.model.hidden_width,
    };
    Ok(Prepared {
        spec,
        partition: part,
        train,
        test,
    })
}

pub fn road_network(cfg: &ExperimentConfig) -> Result<RoadNetwork> {
    let m = &cfg.mobility;
    RoadNetwork::new(m.side_length, m.zone, m.slowdown, m.turn_probability)
}

/// Initial topology. Edge non-i.i.d. vehicles start on their data's side.
pub fn build_topology(cfg: &ExperimentConfig, part: &Partition, speed: f64) -> Result<Topology> {
    match cfg.mobility.model {
        MobilityModel::Static => Ok(Topology::Static(AssociationSnapshot::new(
            part.initial_edge.clone(),
            part.edge_count,
        )?)),
        MobilityModel::Square => {
            let network = road_network(cfg)?;
            let placement = if cfg.partition.regime == Regime::EdgeNonIid {
                Placement::OnSide(part.initial_edge.clone())
            } else {
                Placement::Uniform
            };
            let vehicles =
                init_positions(&network, part.shards.len(), speed, &placement, cfg.mobility.seed)?;
            Ok(Topology::Road { network, vehicles })
        }
    }
}

pub fn hfl_config(cfg: &ExperimentConfig) -> HflConfig {
    let h = &cfg.hfl;
    HflConfig {
        eta: h.eta,
        tau_l: h.tau_l,
        tau_e: h.tau_e,
        cloud_epochs: h.cloud_epochs,
        batch_size: h.batch_size,
        seed: h.seed,
        record_virtual: h.record_virtual,
        full_batch: h.full_batch,
    }
}

/// Trains with the config's speed, starting from `initial` or the default
/// initialization.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    initial: Option<ParamVector>,
) -> Result<RunOutput> {
    run_with_speed(cfg, prepared, cfg.mobility.speed, initial)
}

fn run_with_speed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    speed: f64,
    initial: Option<ParamVector>,
) -> Result<RunOutput> {
    let hfl = hfl_config(cfg);
    run(RunInputs {
        config: &hfl,
        spec: &prepared.spec,
        shards: &prepared.partition.shards,
        test: prepared.test.as_ref(),
        topology: build_topology(cfg, &prepared.partition, speed)?,
        initial: initial.unwrap_or_else(|| initial_params(&prepared.spec, cfg.hfl.seed)),
    })
}

/// Best test accuracy of full-batch gradient descent on the pooled training
/// data over the same number of iterations.
pub fn centralized_ceiling(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<f64> {
    let mut central = cfg.clone();
    central.hfl.full_batch = true;
    central.hfl.record_virtual = false;
    central.partition.regime = Regime::Iid;
    central.partition.vehicles = 1;
    central.partition.edges = 1;
    central.mobility.model = MobilityModel::Static;
    let single = Prepared {
        partition: Partition {
            shards: vec![crate::datasets::Shard {
                owner: 0,
                data: prepared.train.clone(),
            }],
            initial_edge: vec![0],
            edge_count: 1,
        },
        ..prepared.clone()
    };
    let out = run_prepared(&central, &single, None)?;
    out.max_accuracy()
        .ok_or_else(|| Error::InvalidParameter("the ceiling needs a test split".into()))
}

/// Cloud model of an i.i.d., zero-speed run at the first epoch reaching
/// `threshold` test accuracy, with that epoch.
pub fn pretrain(cfg: &ExperimentConfig, threshold: f64) -> Result<(ParamVector, usize)> {
    let mut iid = cfg.clone();
    iid.partition.regime = Regime::Iid;
    iid.mobility.speed = 0.0;
    iid.hfl.cloud_epochs = cfg.sweep.pretrain_max_epochs.max(1);
    iid.hfl.record_virtual = false;
    let prepared = prepare(&iid)?;
    let hfl = hfl_config(&iid);
    let out = run_until_accuracy(
        RunInputs {
            config: &hfl,
            spec: &prepared.spec,
            shards: &prepared.partition.shards,
            test: prepared.test.as_ref(),
            topology: build_topology(&iid, &prepared.partition, 0.0)?,
            initial: initial_params(&prepared.spec, iid.hfl.seed),
        },
        threshold,
    )?;
    let epoch = out.rounds_to_target(threshold).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "pre-training did not reach accuracy {threshold:.4} within {} cloud epochs",
            iid.hfl.cloud_epochs
        ))
    })?;
    Ok((out.cloud_models[epoch].clone(), epoch))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: RunOutput,
    pub max_accuracy: Option<f64>,
}

/// Trains once and writes `metrics.csv`, `checkpoint.bin` and, when the
/// virtual trace is recorded, `virtual_trace.csv`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path, log: &mut dyn Write) -> Result<RunSummary> {
    let prepared = prepare(cfg)?;
    let output = run_prepared(cfg, &prepared, None)?;
    for row in output.metrics.iter().filter(|r| r.cloud_instant) {
        let acc = row
            .test_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            log,
            "cloud_epoch {} iteration {} train_loss {:.6} test_accuracy {}",
            row.cloud_epoch, row.iteration, row.train_loss, acc
        )?;
    }
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(&output.metrics).as_bytes())?;
    write_atomic(
        &out_dir.join("checkpoint.bin"),
        &output.final_state.to_bytes(&cfg.hash()),
    )?;
    if let Some(trace) = &output.trace {
        let mut text = String::from("iteration,u_vtilde_gap\n");
        for (tau, gap) in trace.u_vtilde_gap.iter().enumerate() {
            let _ = writeln!(text, "{tau},{gap}");
        }
        write_atomic(&out_dir.join("virtual_trace.csv"), text.as_bytes())?;
    }
    let max_accuracy = output.max_accuracy();
    Ok(RunSummary {
        output,
        max_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub speed: f64,
    pub seed: u64,
    pub ceiling: f64,
    pub max_accuracy: f64,
    /// Cloud epochs until each target is reached, `None` if never.
    pub rounds: Vec<Option<usize>>,
    pub delta_first_quarter: f64,
    pub delta_last_quarter: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub targets: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("speed,seed,ceiling,max_accuracy");
        for t in &self.targets {
            let _ = write!(out, ",rounds_to_{t}");
        }
        out.push_str(",delta_first_quarter,delta_last_quarter\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.speed, r.seed, r.ceiling, r.max_accuracy);
            for v in &r.rounds {
                match v {
                    Some(k) => {
                        let _ = write!(out, ",{k}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{},{}", r.delta_first_quarter, r.delta_last_quarter);
        }
        out
    }

    /// Per-speed mean and standard deviation of the best accuracy, and mean
    /// rounds over the cells that reached each target.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("speed,cells,mean_max_accuracy,std_max_accuracy");
        for t in &self.targets {
            let _ = write!(out, ",reached_{t},mean_rounds_to_{t}");
        }
        out.push('\n');
        for speed in self.speeds() {
            let cells: Vec<&SweepRow> = self.rows.iter().filter(|r| r.speed == speed).collect();
            let accs: Vec<f64> = cells.iter().map(|r| r.max_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let _ = write!(out, "{speed},{},{mean},{std}", cells.len());
            for i in 0..self.targets.len() {
                let reached: Vec<f64> = cells.iter().filter_map(|r| r.rounds[i]).map(|k| k as f64).collect();
                let avg = if reached.is_empty() {
                    String::new()
                } else {
                    mean_std(&reached).0.to_string()
                };
                let _ = write!(out, ",{},{avg}", reached.len());
            }
            out.push('\n');
        }
        out
    }

    /// Distinct speeds in first-seen order.
    pub fn speeds(&self) -> Vec<f64> {
        let mut seen: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.speed) {
                seen.push(r.speed);
            }
        }
        seen
    }

    pub fn cell(&self, speed: f64, seed: u64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.speed == speed && r.seed == seed)
    }

    pub fn mean_max_accuracy(&self, speed: f64) -> f64 {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.speed == speed)
            .map(|r| r.max_accuracy)
            .collect();
        mean_std(&accs).0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Everything one seed's cells share: data, shards, ceiling and start.
struct SeedContext {
    cfg: ExperimentConfig,
    prepared: Prepared,
    ceiling: f64,
    initial: Option<ParamVector>,
}

fn seed_context(base: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let mut cfg = base.clone();
    cfg.set_seed(seed);
    let prepared = prepare(&cfg)?;
    let ceiling = centralized_ceiling(&cfg, &prepared)?;
    let initial = if cfg.sweep.pretrain {
        Some(pretrain(&cfg, cfg.sweep.pretrain_fraction * ceiling)?.0)
    } else {
        None
    };
    Ok(SeedContext {
        cfg,
        prepared,
        ceiling,
        initial,
    })
}

fn sweep_cell(ctx: &SeedContext, speed: f64) -> Result<SweepRow> {
    let out = run_with_speed(&ctx.cfg, &ctx.prepared, speed, ctx.initial.clone())?;
    let targets = &ctx.cfg.sweep.targets;
    let probes = [
        out.cloud_models[0].clone(),
        out.cloud_models.last().expect("initial model").clone(),
    ];
    let estimates = estimate_divergences(
        &ctx.prepared.spec,
        &ctx.prepared.partition.shards,
        &out.history,
        &probes,
    )?;
    let mixing = mobility_mixing_report(&estimates);
    Ok(SweepRow {
        speed,
        seed: ctx.cfg.hfl.seed,
        ceiling: ctx.ceiling,
        max_accuracy: out.max_accuracy().unwrap_or(f64::NAN),
        rounds: targets
            .iter()
            .map(|t| out.rounds_to_target(t * ctx.ceiling))
            .collect(),
        delta_first_quarter: mixing.first_quarter_mean,
        delta_last_quarter: mixing.last_quarter_mean,
    })
}

/// Runs every (speed, seed) pair. Cells of one seed share the dataset,
/// partition, initial positions and batch streams, so only the vehicles'
/// speed differs. `parallel` bounds the number of worker threads.
pub fn sweep_speed(
    cfg: &ExperimentConfig,
    speeds: &[f64],
    seeds: &[u64],
    parallel: usize,
) -> (Vec<(f64, u64)>, Result<SweepResult>) {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build() {
        Ok(pool) => pool,
        Err(e) => return (Vec::new(), Err(Error::Invariant(e.to_string()))),
    };
    pool.install(|| {
        let contexts: Vec<Result<SeedContext>> =
            seeds.par_iter().map(|&s| seed_context(cfg, s)).collect();
        let cells: Vec<(usize, f64)> = (0..seeds.len())
            .flat_map(|i| speeds.iter().map(move |&v| (i, v)))
            .collect();
        let results: Vec<Result<SweepRow>> = cells
            .par_iter()
            .map(|&(i, v)| match &contexts[i] {
                Ok(ctx) => sweep_cell(ctx, v),
                Err(e) => Err(Error::Invariant(format!("seed {} failed: {e}", seeds[i]))),
            })
            .collect();
        let mut rows = Vec::new();
        let mut done = Vec::new();
        let mut first_err = None;
        for ((i, v), r) in cells.iter().zip(results) {
            match r {
                Ok(row) => {
                    done.push((*v, seeds[*i]));
                    rows.push(row);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        // A failed seed context carries the more specific error.
        if let Some(pos) = contexts.iter().position(Result::is_err) {
            if let Some(Err(e)) = contexts.into_iter().nth(pos) {
                first_err = Some(e);
            }
        }
        let result = SweepResult {
            targets: cfg.sweep.targets.clone(),
            rows,
        };
        match first_err {
            Some(e) => (done, Err(e)),
            None => (done, Ok(result)),
        }
    })
}

/// Sweep entry point writing `sweep.csv`, `summary.csv` and
/// `manifest.csv` (the completed cells), even when some cells fail.
pub fn cmd_sweep_speed(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    parallel: usize,
    log: &mut dyn Write,
) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.sweep.speeds.is_empty() || cfg.sweep.seeds.is_empty() {
        return Err(Error::Config(vec!["sweep needs at least one speed and one seed".into()]));
    }
    let (done, result) = sweep_speed(cfg, &cfg.sweep.speeds, &cfg.sweep.seeds, parallel);
    let mut manifest = String::from("speed,seed\n");
    for (v, s) in &done {
        let _ = writeln!(manifest, "{v},{s}");
    }
    write_atomic(&out_dir.join("manifest.csv"), manifest.as_bytes())?;
    let result = result?;
    write_atomic(&out_dir.join("sweep.csv"), result.csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), result.summary_csv().as_bytes())?;
    for speed in result.speeds() {
        writeln!(log, "speed {speed} mean_max_accuracy {:.4}", result.mean_max_accuracy(speed))?;
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub beta: f64,
    pub rho: f64,
    pub estimates: DivergenceEstimates,
    pub uk: Vec<UkEntry>,
    pub inequalities: InequalityReport,
    pub gap: GapBoundReport,
    pub run: RunOutput,
}

impl VerifyOutcome {
    /// Every inequality holds, including the final-gap bound when it
    /// applies.
    pub fn passed(&self) -> bool {
        self.inequalities.all_hold() && self.gap.holds() != Some(false)
    }

    pub fn first_violation(&self) -> Option<Violation> {
        self.inequalities.first_violation
    }
}

/// Full-batch run with the virtual trace, followed by every bound check.
pub fn verify_bounds(cfg: &ExperimentConfig) -> Result<VerifyOutcome> {
    if !cfg.model.family.is_convex() {
        return Err(Error::Unsupported(cfg.model.family.as_str()));
    }
    let mut cfg = cfg.clone();
    cfg.hfl.full_batch = true;
    cfg.hfl.record_virtual = true;
    let prepared = prepare(&cfg)?;
    let run = run_prepared(&cfg, &prepared, None)?;
    let trace = run.trace.as_ref().expect("recording was forced on");
    let optimum = solve_optimum(&prepared.spec, &prepared.train)?;

    let mut probes = trace.vtilde.clone();
    probes.push(ParamVector::zeros(prepared.spec.param_len()));
    probes.push(optimum.params.clone());
    let constants = estimate_constants(&prepared.spec, &prepared.train, &probes)?;
    let estimates = estimate_divergences(
        &prepared.spec,
        &prepared.partition.shards,
        &run.history,
        &probes,
    )?
    .scaled(cfg.verify.delta_scale);

    let schedule = StepSchedule {
        eta: cfg.hfl.eta,
        beta: constants.beta,
        tau_l: cfg.hfl.tau_l,
        tau_e: cfg.hfl.tau_e,
    };
    let uk = uk_report(trace, &estimates, &schedule, cfg.hfl.cloud_epochs)?;
    let inequalities = check_inequalities(trace, &estimates, &schedule, &uk)?;
    let objective = FederatedObjective::new(&prepared.spec, &prepared.partition.shards)?;
    let gap = check_gap_bound(
        &objective,
        trace,
        &run.cloud_models,
        &uk,
        &BoundInputs {
            beta: constants.beta,
            rho: constants.rho,
            eta: cfg.hfl.eta,
            tau_l: cfg.hfl.tau_l,
            tau_e: cfg.hfl.tau_e,
            cloud_epochs: cfg.hfl.cloud_epochs,
            epsilon: cfg.verify.epsilon,
            w_star: optimum.params,
            f_star: optimum.value,
        },
    )?;
    Ok(VerifyOutcome {
        beta: constants.beta,
        rho: constants.rho,
        estimates,
        uk,
        inequalities,
        gap,
        run,
    })
}

/// Writes `bound_report.csv`, `bound_summary.json` and `metrics.csv`.
/// Returns the exit code: 0 when everything holds, 5 otherwise.
pub fn cmd_verify_bounds(cfg: &ExperimentConfig, out_dir: &Path, log: &mut dyn Write) -> Result<(i32, VerifyOutcome)> {
    let outcome = verify_bounds(cfg)?;
    write_atomic(&out_dir.join("bound_report.csv"), bound_report_csv(&outcome.uk).as_bytes())?;
    let summary = BoundSummary {
        beta: outcome.beta,
        rho: outcome.rho,
        delta: outcome.estimates.delta,
        epsilon: outcome.gap.epsilon,
        phi: outcome.gap.phi,
        bound: outcome.gap.bound,
        bound_strict: outcome.gap.bound_strict,
        measured_final_gap: outcome.gap.measured_final_gap,
        applicable: outcome.gap.applicable,
        applicable_strict: outcome.gap.applicable_strict,
        conditions: &outcome.gap.conditions,
        checks: &outcome.inequalities.summaries,
        first_violation: outcome.inequalities.first_violation,
    };
    write_atomic(&out_dir.join("bound_summary.json"), summary_json(&summary).as_bytes())?;
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(&outcome.run.metrics).as_bytes())?;
    for s in &outcome.inequalities.summaries {
        writeln!(
            log,
            "{} comparisons {} min_slack {:e} violations {}",
            s.check.as_str(),
            s.comparisons,
            s.min_slack,
            s.violations
        )?;
    }
    match outcome.gap.bound {
        Some(b) => writeln!(
            log,
            "final gap {:e} bound {:e}",
            outcome.gap.measured_final_gap, b
        )?,
        None if outcome.gap.degenerate => writeln!(log, "final gap bound degenerate: training already optimal")?,
        None => writeln!(log, "final gap bound not applicable")?,
    }
    if let Some(v) = outcome.first_violation() {
        writeln!(
            log,
            "first violation: {} at k {} tau0 {} unit {} measured {:e} bound {:e}",
            v.check.as_str(),
            v.k,
            v.tau0,
            v.unit.map_or("-".to_string(), |u| u.to_string()),
            v.measured,
            v.bound
        )?;
    } else if outcome.gap.holds() == Some(false) {
        writeln!(log, "first violation: final gap exceeds its bound")?;
    }
    let code = if outcome.passed() { exit::OK } else { exit::VIOLATION };
    Ok((code, outcome))
}

/// Mobility trace CSV for `rounds` edge rounds starting at time 0.
pub fn mobility_trace(cfg: &ExperimentConfig, part: &Partition, rounds: usize) -> Result<String> {
    let mut buf = Vec::new();
    writeln!(buf, "{TRACE_HEADER}")?;
    match build_topology(cfg, part, cfg.mobility.speed)? {
        Topology::Road { network, mut vehicles } => {
            for t in 0..=rounds {
                if t > 0 {
                    advance(&network, &mut vehicles, 1.0);
                }
                let snap = associate(&network, &vehicles);
                crate::mobility::write_trace_rows(&mut buf, t as f64, &vehicles, &snap)?;
            }
        }
        Topology::Static(snap) => {
            for t in 0..=rounds {
                for m in 0..snap.vehicle_count() {
                    writeln!(buf, "{t},{m},,{}", snap.edge_of(m))?;
                }
            }
        }
    }
    Ok(String::from_utf8(buf).expect("ASCII output"))
}

/// Writes `partition.csv` and `mobility_trace.csv` without training.
pub fn cmd_partition_report(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Prepared> {
    let prepared = prepare(cfg)?;
    write_atomic(
        &out_dir.join("partition.csv"),
        prepared.partition.report_csv().as_bytes(),
    )?;
    let trace = mobility_trace(cfg, &prepared.partition, cfg.output.trace_rounds)?;
    write_atomic(&out_dir.join("mobility_trace.csv"), trace.as_bytes())?;
    Ok(prepared)
}

/// Output directory: the explicit override, else the config's.
pub fn output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| PathBuf::from(&cfg.output.dir), Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.classes = 4;
        cfg.dataset.dim = 4;
        cfg.dataset.samples_per_class = 50;
        cfg.partition.vehicles = 8;
        cfg.hfl.cloud_epochs = 2;
        cfg.hfl.tau_l = 2;
        cfg.hfl.tau_e = 3;
        cfg.hfl.batch_size = 5;
        cfg
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config(vec![])), 2);
        assert_eq!(exit_code(&Error::Divergence { iteration: 1, vehicle: 0 }), 3);
        assert_eq!(exit_code(&Error::EmptyFile), 4);
        assert_eq!(exit_code(&Error::Unsupported("mlp1")), 2);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/a.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn run_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let mut log = Vec::new();
        let summary = cmd_run(&cfg, dir.path(), &mut log).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 6);
        let bytes = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
        let (state, hash) = crate::engine::FleetState::from_bytes(&bytes).unwrap();
        assert_eq!(hash, cfg.hash());
        assert_eq!(state, summary.output.final_state);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);
    }

    #[test]
    fn partition_report_shows_edge_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.partition.classes_per_unit = 1;
        cfg.mobility.speed = 0.0;
        cmd_partition_report(&cfg, dir.path()).unwrap();
        let report = std::fs::read_to_string(dir.path().join("partition.csv")).unwrap();
        assert_eq!(report.lines().count(), 9);
        let trace = std::fs::read_to_string(dir.path().join("mobility_trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 8 * 11);
    }

    #[test]
    fn nonconvex_verification_is_refused() {
        let mut cfg = small();
        cfg.model.family = crate::models::Family::Mlp1;
        assert_eq!(exit_code(&verify_bounds(&cfg).unwrap_err()), 2);
    }

    #[test]
    fn single_cell_sweep_matches_run() {
        let mut cfg = small();
        cfg.sweep.speeds = vec![30.0];
        cfg.sweep.seeds = vec![cfg.hfl.seed];
        let (_, result) = sweep_speed(&cfg, &[30.0], &[cfg.hfl.seed], 2);
        let result = result.unwrap();
        let prepared = prepare(&cfg).unwrap();
        let out = run_prepared(&cfg, &prepared, None).unwrap();
        assert_eq!(result.rows.len(), 1);
        assert_eq!(Some(result.rows[0].max_accuracy), out.max_accuracy());
    }
}

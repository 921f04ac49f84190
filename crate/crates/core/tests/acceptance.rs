//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mobhfl::config::{ExperimentConfig, MobilityModel};
use mobhfl::datasets::{generate_synthetic, partition, PartitionSpec, Regime};
use mobhfl::engine::{local_update, run, BatchSampler, HflConfig, RunInputs, Topology};
use mobhfl::harness::{self, exit, SweepResult};
use mobhfl::mobility::AssociationSnapshot;
use mobhfl::models::{estimate_constants, initial_params, Family, ModelSpec};

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    limit: Duration,
}

impl Outcome {
    fn line(&self) -> String {
        let ok = self.passed && self.elapsed <= self.limit;
        format!(
            "{} {}: {} [{:.1}s of {}s]",
            if ok { "PASS" } else { "FAIL" },
            self.id,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        )
    }

    fn ok(&self) -> bool {
        self.passed && self.elapsed <= self.limit
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    ExperimentConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn cell_accuracy(sweep: &SweepResult, speed: f64, seed: u64) -> f64 {
    sweep.cell(speed, seed).expect("cell present").max_accuracy
}

fn a1() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(4, 6, 100, 3.0, 5).unwrap();
    let part = partition(
        &data,
        &PartitionSpec {
            regime: Regime::Iid,
            classes_per_unit: 1,
            vehicle_count: 1,
            edge_count: 1,
            seed: 5,
            allow_partial_class_coverage: false,
        },
    )
    .unwrap();
    let spec = ModelSpec {
        family: Family::MultinomialLogistic,
        dim: 6,
        class_count: 4,
        l2_reg: 0.01,
        hidden_width: 0,
    };
    let config = HflConfig {
        eta: 0.1,
        tau_l: 10,
        tau_e: 10,
        cloud_epochs: 10,
        batch_size: 20,
        seed: 9,
        record_virtual: false,
        full_batch: false,
    };
    let w0 = initial_params(&spec, 9);
    let out = run(RunInputs {
        config: &config,
        spec: &spec,
        shards: &part.shards,
        test: None,
        topology: Topology::Static(AssociationSnapshot::new(vec![0], 1).unwrap()),
        initial: w0.clone(),
    })
    .unwrap();

    let shard = &part.shards[0].data;
    let mut sampler = BatchSampler::new(config.seed, 0, shard.len(), config.batch_size);
    let mut w = w0;
    let window = config.tau_l * config.tau_e;
    let mut mismatches = 0;
    for tau in 1..=config.total_iterations() {
        w = local_update(&spec, shard, &w, sampler.next_batch(), config.eta, 0, tau as u64).unwrap();
        if tau % window == 0 {
            let cloud = &out.cloud_models[tau / window];
            let same = cloud
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    let final_same = out.final_state.vehicle_params[0]
        .as_slice()
        .iter()
        .zip(w.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome {
        id: "A1 degenerate equivalence",
        passed: mismatches == 0 && final_same && config.total_iterations() == 1000,
        detail: format!(
            "{} iterations, {mismatches} cloud models differ bitwise from plain SGD",
            config.total_iterations()
        ),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(5),
    }
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.partition.regime = Regime::EdgeNonIid;
    cfg.partition.classes_per_unit = 2;
    cfg.hfl.cloud_epochs = 20;
    cfg.mobility.speed = 30.0;
    let prepared = harness::prepare(&cfg).unwrap();
    let out = harness::run_prepared(&cfg, &prepared, None).unwrap();
    let worst = out.cloud_identity_error.iter().copied().fold(0.0, f64::max);
    Outcome {
        id: "A2 aggregation identity",
        passed: out.cloud_identity_error.len() == 20 && worst <= 1e-12,
        detail: format!(
            "{} cloud instants, largest coordinate error {worst:e}",
            out.cloud_identity_error.len()
        ),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(60),
    }
}

fn a3() -> Outcome {
    let start = Instant::now();
    let base = config("verify_quadratic.ini");
    let mut details = Vec::new();
    let mut passed = true;
    for speed in [0.0, 30.0] {
        let mut cfg = base.clone();
        cfg.mobility.speed = speed;
        let outcome = harness::verify_bounds(&cfg).unwrap();
        let min_slack = outcome
            .inequalities
            .summaries
            .iter()
            .map(|s| s.min_slack)
            .fold(f64::INFINITY, f64::min);
        let violations: usize = outcome.inequalities.summaries.iter().map(|s| s.violations).sum();
        passed &= violations == 0 && min_slack >= -1e-9 && outcome.inequalities.summaries.len() == 4;
        let sum_u: f64 = outcome.uk.iter().map(|e| e.u_k).sum();
        details.push(format!("v={speed}: min slack {min_slack:e}, sum U_k {sum_u:.4}"));
    }
    Outcome {
        id: "A3 bound inequality suite",
        passed,
        detail: details.join("; "),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(120),
    }
}

fn a4() -> Outcome {
    let start = Instant::now();
    let mut cfg = config("gap_bound_logistic.ini");
    let prepared = harness::prepare(&cfg).unwrap();
    let beta = estimate_constants(&prepared.spec, &prepared.train, &[]).unwrap().beta;
    cfg.hfl.eta = 1.0 / beta;
    let outcome = harness::verify_bounds(&cfg).unwrap();
    let gap = &outcome.gap;
    let detail = match gap.bound {
        Some(b) => format!(
            "conditions hold, measured gap {:e} <= bound {b:e}, slack {:e}",
            gap.measured_final_gap,
            b - gap.measured_final_gap
        ),
        None => "conditions not satisfied, bound reported as not applicable".to_string(),
    };
    Outcome {
        id: "A4 final-gap bound",
        passed: gap.applicable && gap.holds() == Some(true),
        detail,
        elapsed: start.elapsed(),
        limit: Duration::from_secs(120),
    }
}

fn a5() -> Outcome {
    let start = Instant::now();
    let cfg = config("iid_insensitivity.ini");
    let sweep = harness::sweep_speed(&cfg, &[0.0, 30.0], &cfg.sweep.seeds, 4).1.unwrap();
    let diff = mean(
        cfg.sweep
            .seeds
            .iter()
            .map(|&s| cell_accuracy(&sweep, 30.0, s) - cell_accuracy(&sweep, 0.0, s)),
    );
    Outcome {
        id: "A5 i.i.d. insensitivity",
        passed: cfg.sweep.seeds.len() >= 3 && diff.abs() <= 0.02,
        detail: format!(
            "mean paired difference {:+.2} pp over {} seeds",
            100.0 * diff,
            cfg.sweep.seeds.len()
        ),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(600),
    }
}

fn a6(sweep: &SweepResult, seeds: &[u64], elapsed: Duration) -> Outcome {
    let slow = mean(seeds.iter().map(|&s| cell_accuracy(sweep, 0.0, s)));
    let fast = mean(seeds.iter().map(|&s| cell_accuracy(sweep, 30.0, s)));
    Outcome {
        id: "A6 mobility benefit",
        passed: seeds.len() >= 3 && fast >= slow + 0.05,
        detail: format!(
            "mean max accuracy {:.2}% at v=30 vs {:.2}% at v=0",
            100.0 * fast,
            100.0 * slow
        ),
        elapsed,
        limit: Duration::from_secs(600),
    }
}

fn a7() -> Outcome {
    let start = Instant::now();
    let cfg = config("edge_noniid_l2_pretrained.ini");
    let sweep = harness::sweep_speed(&cfg, &[0.0, 1.0, 30.0], &cfg.sweep.seeds, 4).1.unwrap();
    let target = cfg
        .sweep
        .targets
        .iter()
        .position(|&t| t == 0.75)
        .expect("0.75 target configured");
    let rounds = |v: f64, s: u64| sweep.cell(v, s).expect("cell present").rounds[target];
    // A target never reached counts as infinitely many rounds.
    let le = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(x), Some(y)) => x <= y,
    };
    let mut ordered = 0;
    let mut cells = Vec::new();
    for &s in &cfg.sweep.seeds {
        let (r30, r1, r0) = (rounds(30.0, s), rounds(1.0, s), rounds(0.0, s));
        ordered += usize::from(le(r30, r1) && le(r1, r0));
        let show = |r: Option<usize>| r.map_or("never".to_string(), |k| k.to_string());
        cells.push(format!("seed {s}: {}/{}/{}", show(r30), show(r1), show(r0)));
    }
    Outcome {
        id: "A7 convergence-speed ordering",
        passed: cfg.sweep.seeds.len() == 3 && ordered >= 2,
        detail: format!(
            "rounds to 0.75 x ceiling at v=30/1/0: {}; ordered in {ordered} of 3",
            cells.join(", ")
        ),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(600),
    }
}

fn a8(sweep: &SweepResult, seeds: &[u64], elapsed: Duration) -> Outcome {
    let first = mean(seeds.iter().map(|&s| sweep.cell(30.0, s).unwrap().delta_first_quarter));
    let last = mean(seeds.iter().map(|&s| sweep.cell(30.0, s).unwrap().delta_last_quarter));
    let static_ok = seeds.iter().all(|&s| {
        let c = sweep.cell(0.0, s).unwrap();
        (c.delta_last_quarter - c.delta_first_quarter).abs() <= 0.01 * c.delta_first_quarter.abs()
    });
    Outcome {
        id: "A8 divergence mixing trend",
        passed: last < first && static_ok,
        detail: format!(
            "v=30 mean edge divergence {first:.4} in first quarter, {last:.4} in last; v=0 flat within 1%: {static_ok}"
        ),
        elapsed,
        limit: Duration::from_secs(300),
    }
}

fn a9(sweep: &SweepResult, seeds: &[u64], speeds: &[f64], elapsed: Duration) -> Outcome {
    let n = speeds.len();
    let early = mean(
        seeds
            .iter()
            .map(|&s| cell_accuracy(sweep, speeds[1], s) - cell_accuracy(sweep, speeds[0], s)),
    );
    let late = mean(seeds.iter().map(|&s| {
        cell_accuracy(sweep, speeds[n - 1], s) - cell_accuracy(sweep, speeds[n - 2], s)
    }));
    Outcome {
        id: "A9 saturation",
        passed: late <= early,
        detail: format!(
            "mean gain v={}->{} is {:+.2} pp, v={}->{} is {:+.2} pp",
            speeds[0],
            speeds[1],
            100.0 * early,
            speeds[n - 2],
            speeds[n - 1],
            100.0 * late
        ),
        elapsed,
        limit: Duration::from_secs(900),
    }
}

fn a10() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut checked = Vec::new();

    let mut run_cfg = config("edge_noniid_l1.ini");
    run_cfg.hfl.cloud_epochs = 5;
    for attempt in ["a", "b"] {
        harness::cmd_run(&run_cfg, &dir.path().join(attempt).join("run"), &mut std::io::sink()).unwrap();
    }
    let mut sweep_cfg = run_cfg.clone();
    sweep_cfg.sweep.speeds = vec![0.0, 30.0];
    sweep_cfg.sweep.seeds = vec![1, 2];
    for (attempt, threads) in [("a", 1), ("b", 3)] {
        harness::cmd_sweep_speed(&sweep_cfg, &dir.path().join(attempt).join("sweep"), threads, &mut std::io::sink())
            .unwrap();
    }
    let verify_cfg = config("verify_quadratic.ini");
    for attempt in ["a", "b"] {
        let (code, _) =
            harness::cmd_verify_bounds(&verify_cfg, &dir.path().join(attempt).join("verify"), &mut std::io::sink())
                .unwrap();
        identical &= code == exit::OK;
    }
    for file in [
        "run/metrics.csv",
        "run/checkpoint.bin",
        "sweep/sweep.csv",
        "sweep/summary.csv",
        "verify/bound_report.csv",
        "verify/bound_summary.json",
        "verify/metrics.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        identical &= a == b;
        checked.push(file);
    }
    Outcome {
        id: "A10 determinism",
        passed: identical,
        detail: format!("{} output files byte-identical across repeats", checked.len()),
        elapsed: start.elapsed(),
        limit: Duration::from_secs(600),
    }
}

fn main() -> ExitCode {
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{}", o.line());
        outcomes.push(o.ok());
    };
    report(a1());
    report(a2());
    report(a3());
    report(a4());
    report(a5());

    let cfg = config("edge_noniid_l1.ini");
    assert_eq!(cfg.model.family, Family::Mlp1);
    assert_eq!(cfg.mobility.model, MobilityModel::Square);
    let speeds = cfg.sweep.speeds.clone();
    let seeds = cfg.sweep.seeds.clone();
    cfg.validate().unwrap();
    let start = Instant::now();
    let sweep = harness::sweep_speed(&cfg, &speeds, &seeds, 4).1.unwrap();
    let elapsed = start.elapsed();
    report(a6(&sweep, &seeds, elapsed));
    report(a7());
    report(a8(&sweep, &seeds, elapsed));
    report(a9(&sweep, &seeds, &speeds, elapsed));
    report(a10());

    let failed = outcomes.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Hierarchical training loop with mobility-driven edge membership.
//!
//! One edge round is `tau_l` local SGD steps on every vehicle, a 1 s
//! mobility advance, re-association and edge aggregation. Every `tau_e`-th
//! edge round ends with a cloud aggregation. Iteration `τ` uses the
//! association snapshot `⌊τ/τ_l⌋`, where snapshot 0 is the initial
//! placement and snapshot `j` is taken after the `j`-th advance.
//!
//! With `record_virtual` set the engine also follows the virtual sequences
//! used by the analysis: `u = Σ α_m w_m`, the centralized full-batch step
//! `ṽ(τ) = v(τ−1) − η∇F(v(τ−1))`, and `v`, which equals `ṽ` except at cloud
//! instants where it is reset to `u`.

use rayon::prelude::*;

use crate::datasets::{LabeledDataset, Shard};
use crate::error::{Error, Result};
use crate::mobility::{advance, associate, AssociationSnapshot, RoadNetwork, VehicleState};
use crate::models::{accuracy, gradient_on, FederatedObjective, ModelSpec};
use crate::params::{take_u64, ParamVector};
use crate::rng::{stream, SplitMix64};

/// Seconds of driving between two edge aggregations.
pub const EDGE_ROUND_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HflConfig {
    pub eta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub record_virtual: bool,
    /// Vehicles use their whole shard for every step.
    pub full_batch: bool,
}

impl HflConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta must be a non-negative number, got {}", self.eta));
        }
        if self.tau_l == 0 {
            problems.push("tau_l must be at least 1".into());
        }
        if self.tau_e == 0 {
            problems.push("tau_e must be at least 1".into());
        }
        if self.cloud_epochs == 0 {
            problems.push("cloud_epochs must be at least 1".into());
        }
        if self.batch_size == 0 && !self.full_batch {
            problems.push("batch_size must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn iterations_per_cloud_epoch(&self) -> usize {
        self.tau_l * self.tau_e
    }

    pub fn total_iterations(&self) -> usize {
        self.cloud_epochs * self.tau_l * self.tau_e
    }

    pub fn edge_rounds(&self) -> usize {
        self.cloud_epochs * self.tau_e
    }
}

/// Per-vehicle minibatch stream: a seeded permutation of the shard consumed
/// in chunks, reshuffled when fewer than `batch_size` indices remain.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: SplitMix64,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, vehicle: usize, shard_len: usize, batch_size: usize) -> Self {
        let full = batch_size == 0 || batch_size >= shard_len;
        Self {
            rng: SplitMix64::derive(seed, &[stream::BATCH, vehicle as u64]),
            order: (0..shard_len).collect(),
            cursor: if full { 0 } else { shard_len },
            batch_size: if full { shard_len } else { batch_size },
        }
    }

    /// Sampler that always returns the whole shard in index order.
    pub fn full(shard_len: usize) -> Self {
        Self::new(0, 0, shard_len, 0)
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.batch_size == self.order.len() {
            return &self.order;
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

/// `α_m`, and `α_{m,n}` / `θ_n` for one association snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub alpha_m: Vec<f64>,
    /// `α_{m,n}` for each vehicle `m` with respect to its current edge.
    pub alpha_mn: Vec<f64>,
    pub theta_n: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(sizes: &[usize], snapshot: &AssociationSnapshot) -> Self {
        let total: usize = sizes.iter().sum();
        let mut edge_total = vec![0usize; snapshot.edge_count()];
        for (m, &s) in sizes.iter().enumerate() {
            edge_total[snapshot.edge_of(m)] += s;
        }
        Self {
            alpha_m: sizes.iter().map(|&s| s as f64 / total as f64).collect(),
            alpha_mn: sizes
                .iter()
                .enumerate()
                .map(|(m, &s)| s as f64 / edge_total[snapshot.edge_of(m)] as f64)
                .collect(),
            theta_n: edge_total.iter().map(|&s| s as f64 / total as f64).collect(),
        }
    }
}

/// One SGD step: `w − η ∇f(w; batch)`.
pub fn local_update(
    spec: &ModelSpec,
    data: &LabeledDataset,
    w: &ParamVector,
    batch: &[usize],
    eta: f64,
    vehicle: usize,
    iteration: u64,
) -> Result<ParamVector> {
    let g = gradient_on(spec, w, data, batch)?;
    let mut next = w.clone();
    next.axpy(-eta, &g);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::Divergence { iteration, vehicle })
    }
}

/// Data-size weighted average of the members' models, or `None` for an
/// edge without vehicles.
pub fn edge_aggregate(
    members: &[usize],
    vehicle_params: &[ParamVector],
    sizes: &[usize],
) -> Option<ParamVector> {
    let total: usize = members.iter().map(|&m| sizes[m]).sum();
    ParamVector::weighted_sum(
        members
            .iter()
            .map(|&m| (sizes[m] as f64 / total as f64, &vehicle_params[m])),
    )
}

/// `Σ θ_n w_{e,n}` over edges with nonzero weight.
pub fn cloud_aggregate(edge_params: &[ParamVector], theta: &[f64]) -> Result<ParamVector> {
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invariant(format!("edge weights sum to {sum}")));
    }
    ParamVector::weighted_sum(
        theta
            .iter()
            .zip(edge_params)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, w)| (t, w)),
    )
    .ok_or_else(|| Error::Invariant("no edge carries weight".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub tau: u64,
    pub vehicle_params: Vec<ParamVector>,
    pub edge_params: Vec<ParamVector>,
    pub cloud_params: ParamVector,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MHFLCKP1";

impl FleetState {
    pub fn uniform(w0: &ParamVector, vehicles: usize, edges: usize) -> Self {
        Self {
            tau: 0,
            vehicle_params: vec![w0.clone(); vehicles],
            edge_params: vec![w0.clone(); edges],
            cloud_params: w0.clone(),
        }
    }

    /// Magic, config hash, iteration, cloud model, then the edge and
    /// vehicle models as counted lists of length-prefixed vectors.
    pub fn to_bytes(&self, config_hash: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(config_hash);
        out.extend_from_slice(&self.tau.to_le_bytes());
        self.cloud_params.encode(&mut out);
        for list in [&self.edge_params, &self.vehicle_params] {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for w in list {
                w.encode(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, returning the state and its config hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, [u8; 32])> {
        if bytes.len() < 40 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hash: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
        let (tau, rest) = take_u64(&bytes[40..])?;
        let (cloud_params, mut rest) = ParamVector::decode(rest)?;
        let mut lists = Vec::with_capacity(2);
        for _ in 0..2 {
            let (count, tail) = take_u64(rest)?;
            rest = tail;
            let mut list = Vec::new();
            for _ in 0..count {
                let (w, tail) = ParamVector::decode(rest)?;
                rest = tail;
                list.push(w);
            }
            lists.push(list);
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let vehicle_params = lists.pop().expect("two lists");
        let edge_params = lists.pop().expect("two lists");
        Ok((
            Self {
                tau,
                vehicle_params,
                edge_params,
                cloud_params,
            },
            hash,
        ))
    }
}

/// How vehicles map to edges over time.
#[derive(Debug, Clone)]
pub enum Topology {
    Road {
        network: RoadNetwork,
        vehicles: Vec<VehicleState>,
    },
    /// Fixed membership, never re-evaluated.
    Static(AssociationSnapshot),
}

impl Topology {
    fn edge_count(&self) -> usize {
        match self {
            Topology::Road { network, .. } => network.edge_count(),
            Topology::Static(s) => s.edge_count(),
        }
    }

    fn snapshot(&self) -> AssociationSnapshot {
        match self {
            Topology::Road { network, vehicles } => associate(network, vehicles),
            Topology::Static(s) => s.clone(),
        }
    }

    fn step(&mut self) {
        if let Topology::Road { network, vehicles } = self {
            advance(network, vehicles, EDGE_ROUND_SECONDS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub cloud_epoch: usize,
    pub edge_round: usize,
    pub iteration: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub u_vtilde_gap: Option<f64>,
    pub edge_counts: Vec<usize>,
    pub cloud_instant: bool,
}

pub const METRICS_HEADER: &str =
    "cloud_epoch,edge_round,iteration,train_loss,test_accuracy,u_vtilde_gap,edge_membership_counts";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let counts: Vec<String> = self.edge_counts.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.cloud_epoch,
            self.edge_round,
            self.iteration,
            self.train_loss,
            opt(self.test_accuracy),
            opt(self.u_vtilde_gap),
            counts.join(";")
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Right-hand-side ingredients of the one-step recursion for `‖u − ṽ‖`,
/// all evaluated at `τ − 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionTerms {
    /// `‖u − v‖`
    pub u_v: f64,
    /// `Σ_m α_m ‖w_m − v‖`
    pub vehicle_term: f64,
    /// `Σ_n θ_n ‖u_n − v‖`
    pub edge_term: f64,
}

/// Virtual sequences, indexed by iteration `τ = 0..=T`.
#[derive(Debug, Clone, Default)]
pub struct VirtualTrace {
    /// `‖u(τ) − ṽ(τ)‖`, with `ṽ` taken before any synchronization.
    pub u_vtilde_gap: Vec<f64>,
    pub vtilde: Vec<ParamVector>,
    /// `‖w_m(τ) − ṽ(τ)‖` for each vehicle.
    pub vehicle_gap: Vec<Vec<f64>>,
    /// `‖u_n(τ) − ṽ(τ)‖` for each edge, `None` when the edge is empty.
    pub edge_gap: Vec<Vec<Option<f64>>>,
    /// Entry `τ − 1` holds the terms for step `τ`.
    pub recursion: Vec<RecursionTerms>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub final_state: FleetState,
    /// Snapshot `j` is the membership used from iteration `j·τ_l`.
    pub history: Vec<AssociationSnapshot>,
    /// Cloud model at every cloud instant, entry 0 being the initial model.
    pub cloud_models: Vec<ParamVector>,
    /// Largest coordinate difference between the cloud model and the direct
    /// `α_m`-weighted vehicle average, per cloud instant.
    pub cloud_identity_error: Vec<f64>,
    pub trace: Option<VirtualTrace>,
}

impl RunOutput {
    fn cloud_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.metrics.iter().filter(|r| r.cloud_instant)
    }

    /// Best test accuracy over cloud instants.
    pub fn max_accuracy(&self) -> Option<f64> {
        self.cloud_rows()
            .filter_map(|r| r.test_accuracy)
            .fold(None, |best, a| Some(best.map_or(a, |b: f64| b.max(a))))
    }

    /// First cloud epoch whose model reaches `target` test accuracy.
    pub fn rounds_to_target(&self, target: f64) -> Option<usize> {
        self.cloud_rows()
            .find(|r| r.test_accuracy.is_some_and(|a| a >= target))
            .map(|r| r.cloud_epoch)
    }
}

pub struct RunInputs<'a> {
    pub config: &'a HflConfig,
    pub spec: &'a ModelSpec,
    pub shards: &'a [Shard],
    pub test: Option<&'a LabeledDataset>,
    pub topology: Topology,
    pub initial: ParamVector,
}

struct Fleet<'a> {
    sizes: Vec<usize>,
    objective: FederatedObjective<'a>,
}

impl Fleet<'_> {
    fn u(&self, params: &[ParamVector]) -> ParamVector {
        ParamVector::weighted_sum(self.objective.weights().iter().copied().zip(params))
            .expect("at least one vehicle")
    }

    /// `u_n` for every edge under `snapshot`.
    fn edge_points(&self, params: &[ParamVector], snapshot: &AssociationSnapshot) -> Vec<Option<ParamVector>> {
        (0..snapshot.edge_count())
            .map(|n| edge_aggregate(&snapshot.members(n), params, &self.sizes))
            .collect()
    }
}

pub fn run(inputs: RunInputs<'_>) -> Result<RunOutput> {
    run_inner(inputs, None)
}

/// Like [`run`], but stops after the first cloud aggregation whose model
/// reaches `target` test accuracy.
pub fn run_until_accuracy(inputs: RunInputs<'_>, target: f64) -> Result<RunOutput> {
    run_inner(inputs, Some(target))
}

fn run_inner(inputs: RunInputs<'_>, stop_at: Option<f64>) -> Result<RunOutput> {
    let RunInputs {
        config,
        spec,
        shards,
        test,
        mut topology,
        initial,
    } = inputs;
    config.validate()?;
    if initial.len() != spec.param_len() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_len(),
            actual: initial.len(),
        });
    }
    let fleet = Fleet {
        sizes: shards.iter().map(Shard::size).collect(),
        objective: FederatedObjective::new(spec, shards)?,
    };
    let vehicles = shards.len();
    let edges = topology.edge_count();
    let mut snapshot = topology.snapshot();
    if snapshot.vehicle_count() != vehicles {
        return Err(Error::DimensionMismatch {
            expected: vehicles,
            actual: snapshot.vehicle_count(),
        });
    }

    let mut samplers: Vec<BatchSampler> = shards
        .iter()
        .enumerate()
        .map(|(m, s)| {
            if config.full_batch {
                BatchSampler::full(s.size())
            } else {
                BatchSampler::new(config.seed, m, s.size(), config.batch_size)
            }
        })
        .collect();

    let mut state = FleetState::uniform(&initial, vehicles, edges);
    let mut history = vec![snapshot.clone()];
    let mut cloud_models = vec![initial.clone()];
    let mut cloud_identity_error = Vec::new();
    let mut metrics = Vec::with_capacity(config.edge_rounds());

    let mut trace = config.record_virtual.then(VirtualTrace::default);
    let mut v = initial.clone();
    if let Some(tr) = trace.as_mut() {
        record_point(tr, &fleet, &state.vehicle_params, &snapshot, &initial, &fleet.u(&state.vehicle_params));
    }

    'rounds: for round in 1..=config.edge_rounds() {
        for step in 0..config.tau_l {
            let tau = (round - 1) * config.tau_l + step + 1;
            if let Some(tr) = trace.as_mut() {
                tr.recursion.push(recursion_terms(&fleet, &state.vehicle_params, &snapshot, &v));
            }

            let results: Vec<Result<ParamVector>> = state
                .vehicle_params
                .par_iter()
                .zip(samplers.par_iter_mut())
                .zip(shards.par_iter())
                .enumerate()
                .map(|(m, ((w, sampler), shard))| {
                    local_update(spec, &shard.data, w, sampler.next_batch(), config.eta, m, tau as u64)
                })
                .collect();
            for (slot, result) in state.vehicle_params.iter_mut().zip(results) {
                *slot = result?;
            }
            state.tau = tau as u64;

            let vtilde = if trace.is_some() {
                let mut next = v.clone();
                next.axpy(-config.eta, &fleet.objective.gradient(&v)?);
                Some(next)
            } else {
                None
            };

            let end_of_round = step + 1 == config.tau_l;
            let mut cloud_instant = false;
            if end_of_round {
                topology.step();
                snapshot = topology.snapshot();
                history.push(snapshot.clone());
                let weights = AggregationWeights::new(&fleet.sizes, &snapshot);
                let direct = fleet.u(&state.vehicle_params);
                for n in 0..edges {
                    let members = snapshot.members(n);
                    if let Some(w) = edge_aggregate(&members, &state.vehicle_params, &fleet.sizes) {
                        for &m in &members {
                            state.vehicle_params[m] = w.clone();
                        }
                        state.edge_params[n] = w;
                    }
                }
                if round % config.tau_e == 0 {
                    cloud_instant = true;
                    let cloud = cloud_aggregate(&state.edge_params, &weights.theta_n)?;
                    let err = cloud
                        .as_slice()
                        .iter()
                        .zip(direct.as_slice())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    cloud_identity_error.push(err);
                    state.edge_params.iter_mut().for_each(|w| *w = cloud.clone());
                    state.vehicle_params.iter_mut().for_each(|w| *w = cloud.clone());
                    state.cloud_params = cloud.clone();
                    cloud_models.push(cloud);
                }
            }

            if let (Some(tr), Some(vtilde)) = (trace.as_mut(), vtilde) {
                let u = fleet.u(&state.vehicle_params);
                record_point(tr, &fleet, &state.vehicle_params, &snapshot, &vtilde, &u);
                v = if cloud_instant { u } else { vtilde };
            }

            if end_of_round {
                let u = if cloud_instant {
                    state.cloud_params.clone()
                } else {
                    fleet.u(&state.vehicle_params)
                };
                let test_accuracy = test.map(|t| accuracy(spec, &u, t)).transpose()?;
                metrics.push(MetricsRow {
                    cloud_epoch: (round - 1) / config.tau_e + 1,
                    edge_round: round,
                    iteration: tau,
                    train_loss: fleet.objective.value(&u)?,
                    test_accuracy,
                    u_vtilde_gap: trace.as_ref().map(|tr| tr.u_vtilde_gap[tau]),
                    edge_counts: snapshot.counts(),
                    cloud_instant,
                });
                if let (true, Some(target), Some(acc)) = (cloud_instant, stop_at, test_accuracy) {
                    if acc >= target {
                        break 'rounds;
                    }
                }
            }
        }
    }

    Ok(RunOutput {
        metrics,
        final_state: state,
        history,
        cloud_models,
        cloud_identity_error,
        trace,
    })
}

fn record_point(
    tr: &mut VirtualTrace,
    fleet: &Fleet<'_>,
    params: &[ParamVector],
    snapshot: &AssociationSnapshot,
    vtilde: &ParamVector,
    u: &ParamVector,
) {
    tr.u_vtilde_gap.push(u.distance(vtilde));
    tr.vehicle_gap.push(params.iter().map(|w| w.distance(vtilde)).collect());
    tr.edge_gap.push(
        fleet
            .edge_points(params, snapshot)
            .iter()
            .map(|p| p.as_ref().map(|p| p.distance(vtilde)))
            .collect(),
    );
    tr.vtilde.push(vtilde.clone());
}

fn recursion_terms(
    fleet: &Fleet<'_>,
    params: &[ParamVector],
    snapshot: &AssociationSnapshot,
    v: &ParamVector,
) -> RecursionTerms {
    let weights = AggregationWeights::new(&fleet.sizes, snapshot);
    let u = fleet.u(params);
    let vehicle_term = weights
        .alpha_m
        .iter()
        .zip(params)
        .map(|(a, w)| a * w.distance(v))
        .sum();
    let edge_term = fleet
        .edge_points(params, snapshot)
        .iter()
        .zip(&weights.theta_n)
        .filter_map(|(p, t)| p.as_ref().map(|p| t * p.distance(v)))
        .sum();
    RecursionTerms {
        u_v: u.distance(v),
        vehicle_term,
        edge_term,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, partition, PartitionSpec, Regime};
    use crate::mobility::{init_positions, Placement};
    use crate::models::Family;
    use proptest::prelude::*;

    fn quad(dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            family: Family::Quadratic,
            dim,
            class_count: classes,
            l2_reg: 0.0,
            hidden_width: 0,
        }
    }

    fn config(tau_l: usize, tau_e: usize, k: usize) -> HflConfig {
        HflConfig {
            eta: 0.1,
            tau_l,
            tau_e,
            cloud_epochs: k,
            batch_size: 5,
            seed: 3,
            record_virtual: false,
            full_batch: false,
        }
    }

    fn fixture(m: usize, regime: Regime) -> (ModelSpec, Vec<Shard>, LabeledDataset) {
        let data = generate_synthetic(4, 3, 40, 3.0, 1).unwrap();
        let part = partition(
            &data,
            &PartitionSpec {
                regime,
                classes_per_unit: 1,
                vehicle_count: m,
                edge_count: 4,
                seed: 2,
                allow_partial_class_coverage: false,
            },
        )
        .unwrap();
        (quad(3, 4), part.shards, data)
    }

    fn road(m: usize, speed: f64, initial: &[usize]) -> Topology {
        let network = RoadNetwork::with_defaults(100.0).unwrap();
        let vehicles =
            init_positions(&network, m, speed, &Placement::OnSide(initial.to_vec()), 4).unwrap();
        Topology::Road { network, vehicles }
    }

    #[test]
    fn local_update_examples() {
        let data = LabeledDataset::new(vec![1.0], 1, vec![0], 1)
            .unwrap()
            .with_targets(vec![2.0])
            .unwrap();
        let spec = quad(1, 1);
        let w = ParamVector::zeros(1);
        let next = local_update(&spec, &data, &w, &[0], 0.1, 0, 1).unwrap();
        assert!((next[0] - 0.2).abs() < 1e-15);
        assert_eq!(local_update(&spec, &data, &w, &[0], 0.0, 0, 1).unwrap(), w);
        let opt = ParamVector::new(vec![2.0]);
        assert_eq!(local_update(&spec, &data, &opt, &[0], 0.1, 0, 1).unwrap(), opt);
        let huge = ParamVector::new(vec![1e300]);
        assert!(matches!(
            local_update(&spec, &data, &huge, &[0], 1e10, 7, 9),
            Err(Error::Divergence { iteration: 9, vehicle: 7 })
        ));
    }

    #[test]
    fn edge_aggregate_examples() {
        let params = vec![ParamVector::zeros(2), ParamVector::new(vec![4.0, 4.0])];
        let w = edge_aggregate(&[0, 1], &params, &[1, 3]).unwrap();
        assert_eq!(w.as_slice(), &[3.0, 3.0]);
        assert_eq!(edge_aggregate(&[1], &params, &[1, 3]).unwrap(), params[1]);
        assert!(edge_aggregate(&[], &params, &[1, 3]).is_none());
    }

    #[test]
    fn edge_aggregate_matches_dot_product_oracle() {
        let mut rng = SplitMix64::new(21);
        let params: Vec<ParamVector> = (0..8)
            .map(|_| ParamVector::new((0..5).map(|_| rng.next_normal()).collect()))
            .collect();
        let sizes: Vec<usize> = (0..8).map(|_| 1 + rng.below(50) as usize).collect();
        let members: Vec<usize> = (0..8).collect();
        let w = edge_aggregate(&members, &params, &sizes).unwrap();
        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        for k in 0..5 {
            let oracle: f64 = (0..8).map(|m| sizes[m] as f64 * params[m][k]).sum::<f64>() / total;
            assert!((w[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cloud_aggregate_examples() {
        let same = vec![ParamVector::new(vec![1.5, -2.0]); 4];
        assert_eq!(cloud_aggregate(&same, &[0.25; 4]).unwrap(), same[0]);
        let edges: Vec<ParamVector> = (0..4).map(|n| ParamVector::new(vec![n as f64])).collect();
        assert_eq!(cloud_aggregate(&edges, &[0.25; 4]).unwrap()[0], 1.5);
        assert!(matches!(cloud_aggregate(&edges, &[0.3; 4]), Err(Error::Invariant(_))));
    }

    #[test]
    fn unbalanced_membership_matches_vehicle_oracle() {
        let counts = [10usize, 6, 9, 7];
        let edge_of: Vec<usize> = counts.iter().enumerate().flat_map(|(n, &c)| vec![n; c]).collect();
        let snap = AssociationSnapshot::new(edge_of, 4).unwrap();
        let mut rng = SplitMix64::new(5);
        let params: Vec<ParamVector> = (0..32)
            .map(|_| ParamVector::new((0..3).map(|_| rng.next_normal()).collect()))
            .collect();
        let sizes = vec![100usize; 32];
        let weights = AggregationWeights::new(&sizes, &snap);
        let edges: Vec<ParamVector> = (0..4)
            .map(|n| edge_aggregate(&snap.members(n), &params, &sizes).unwrap())
            .collect();
        let cloud = cloud_aggregate(&edges, &weights.theta_n).unwrap();
        for k in 0..3 {
            let oracle: f64 = params.iter().map(|w| w[k]).sum::<f64>() / 32.0;
            assert!((cloud[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_sampler_covers_each_pass() {
        let mut s = BatchSampler::new(1, 0, 10, 5);
        let mut seen: Vec<usize> = s.next_batch().to_vec();
        seen.extend_from_slice(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = BatchSampler::new(1, 0, 4, 10);
        assert_eq!(full.next_batch(), &[0, 1, 2, 3]);
        let a: Vec<Vec<usize>> = {
            let mut s = BatchSampler::new(9, 2, 30, 7);
            (0..10).map(|_| s.next_batch().to_vec()).collect()
        };
        let b: Vec<Vec<usize>> = {
            let mut s = BatchSampler::new(9, 2, 30, 7);
            (0..10).map(|_| s.next_batch().to_vec()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn single_vehicle_equals_plain_sgd() {
        let (spec, shards, _) = fixture(1, Regime::Iid);
        let snap = AssociationSnapshot::new(vec![0], 1).unwrap();
        let cfg = config(3, 2, 5);
        let out = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: None,
            topology: Topology::Static(snap),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        let mut w = ParamVector::zeros(spec.param_len());
        let mut sampler = BatchSampler::new(cfg.seed, 0, shards[0].size(), cfg.batch_size);
        for tau in 1..=cfg.total_iterations() {
            w = local_update(&spec, &shards[0].data, &w, sampler.next_batch(), cfg.eta, 0, tau as u64)
                .unwrap();
        }
        assert_eq!(out.final_state.cloud_params, w);
        assert_eq!(out.metrics.len(), cfg.edge_rounds());
    }

    #[test]
    fn identical_shards_keep_u_on_the_centralized_path() {
        let data = generate_synthetic(3, 2, 10, 3.0, 0).unwrap();
        let shards: Vec<Shard> = (0..6).map(|m| Shard { owner: m, data: data.clone() }).collect();
        let spec = quad(2, 3);
        let mut cfg = config(1, 1, 8);
        cfg.full_batch = true;
        cfg.record_virtual = true;
        let out = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: None,
            topology: road(6, 30.0, &[0, 1, 2, 3, 0, 1]),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        let trace = out.trace.unwrap();
        assert!(trace.u_vtilde_gap.iter().all(|&g| g <= 1e-12));
    }

    #[test]
    fn consensus_and_identity_at_cloud_instants() {
        let (spec, shards, data) = fixture(16, Regime::EdgeNonIid);
        let initial: Vec<usize> = (0..16).map(|m| m / 4).collect();
        let mut cfg = config(2, 3, 4);
        cfg.eta = 0.01;
        let out = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: Some(&data),
            topology: road(16, 30.0, &initial),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        assert_eq!(out.cloud_models.len(), 5);
        assert!(out.cloud_identity_error.iter().all(|&e| e <= 1e-12), "{:?}", out.cloud_identity_error);
        for w in &out.final_state.vehicle_params {
            assert_eq!(w, &out.final_state.cloud_params);
        }
        assert_eq!(out.history.len(), cfg.edge_rounds() + 1);
        assert!(out.max_accuracy().is_some());
    }

    #[test]
    fn zero_speed_matches_static_membership() {
        let (spec, shards, _) = fixture(8, Regime::EdgeNonIid);
        let initial: Vec<usize> = (0..8).map(|m| m / 2).collect();
        let cfg = config(2, 2, 3);
        let moving = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: None,
            topology: road(8, 0.0, &initial),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        let fixed = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: None,
            topology: Topology::Static(AssociationSnapshot::new(initial, 4).unwrap()),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        assert_eq!(moving.final_state, fixed.final_state);
        assert_eq!(metrics_csv(&moving.metrics), metrics_csv(&fixed.metrics));
    }

    #[test]
    fn empty_edges_keep_their_model() {
        let (spec, shards, _) = fixture(4, Regime::Iid);
        let snap = AssociationSnapshot::new(vec![0, 0, 2, 2], 4).unwrap();
        let cfg = config(2, 2, 2);
        let out = run(RunInputs {
            config: &cfg,
            spec: &spec,
            shards: &shards,
            test: None,
            topology: Topology::Static(snap),
            initial: ParamVector::zeros(spec.param_len()),
        })
        .unwrap();
        assert!(out.metrics.iter().all(|r| r.edge_counts == vec![2, 0, 2, 0]));
        assert!(out.final_state.cloud_params.is_finite());
    }

    #[test]
    fn metrics_line_format() {
        let row = MetricsRow {
            cloud_epoch: 1,
            edge_round: 2,
            iteration: 12,
            train_loss: 0.5,
            test_accuracy: None,
            u_vtilde_gap: Some(0.0),
            edge_counts: vec![8, 7, 9, 8],
            cloud_instant: false,
        };
        assert_eq!(row.csv_line(), "1,2,12,0.5,,0,8;7;9;8");
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(FleetState::from_bytes(b"nope").is_err());
        let state = FleetState::uniform(&ParamVector::new(vec![1.0]), 2, 1);
        let mut bytes = state.to_bytes(&[7; 32]);
        bytes.push(0);
        assert!(FleetState::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(
            tau in any::<u64>(),
            cloud in proptest::collection::vec(-1e6f64..1e6, 0..6),
            edges in 0usize..4,
            vehicles in 0usize..6,
            hash in any::<[u8; 32]>(),
        ) {
            let w = ParamVector::new(cloud);
            let mut state = FleetState::uniform(&w, vehicles, edges);
            state.tau = tau;
            let (back, h) = FleetState::from_bytes(&state.to_bytes(&hash)).unwrap();
            prop_assert_eq!(back, state);
            prop_assert_eq!(h, hash);
        }

        #[test]
        fn aggregation_weights_are_normalized(
            sizes in proptest::collection::vec(1usize..200, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let edge_of: Vec<usize> = sizes.iter().map(|_| rng.below(4) as usize).collect();
            let snap = AssociationSnapshot::new(edge_of, 4).unwrap();
            let w = AggregationWeights::new(&sizes, &snap);
            prop_assert!((w.alpha_m.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((w.theta_n.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for n in 0..4 {
                let members = snap.members(n);
                if !members.is_empty() {
                    let s: f64 = members.iter().map(|&m| w.alpha_mn[m]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
                for &m in &members {
                    prop_assert!((w.theta_n[n] * w.alpha_mn[m] - w.alpha_m[m]).abs() <= 1e-12);
                }
            }
        }
    }
}

//! Labeled datasets, synthetic generators and per-vehicle partitioning.
//!
//! A [`LabeledDataset`] is a dense row-major feature matrix plus integer
//! class labels. Partitioning splits a training set into one [`Shard`] per
//! vehicle under one of three regimes:
//!
//! * [`Regime::Iid`]: a uniform random split into equal shards.
//! * [`Regime::LocalNonIid`]: label-sorted data cut into `M * l` contiguous
//!   blocks, dealt round-robin so each vehicle holds `l` label blocks.
//! * [`Regime::EdgeNonIid`]: each edge owns `l` classes, and its samples are
//!   split uniformly among the `M / N` vehicles that start on that edge.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix64};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    /// Optional real-valued regression targets (`len × class_count`),
    /// used by the quadratic model instead of one-hot labels.
    targets: Option<Vec<f64>>,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be > 0".into()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidParameter("dataset must be nonempty".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::InvalidParameter(format!(
                "label {y} of sample {i} outside [0, {class_count})"
            )));
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite feature in sample {}",
                i / dim
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            class_count,
            targets: None,
        })
    }

    /// Attaches explicit regression targets, one row of `class_count` values
    /// per sample.
    pub fn with_targets(mut self, targets: Vec<f64>) -> Result<Self> {
        if targets.len() != self.len() * self.class_count {
            return Err(Error::DimensionMismatch {
                expected: self.len() * self.class_count,
                actual: targets.len(),
            });
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn has_targets(&self) -> bool {
        self.targets.is_some()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    #[inline]
    pub fn target_row(&self, i: usize) -> Option<&[f64]> {
        self.targets
            .as_ref()
            .map(|t| &t[i * self.class_count..(i + 1) * self.class_count])
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut targets = self
            .targets
            .as_ref()
            .map(|_| Vec::with_capacity(indices.len() * self.class_count));
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            if let (Some(out), Some(row)) = (targets.as_mut(), self.target_row(i)) {
                out.extend_from_slice(row);
            }
        }
        Self {
            features,
            dim: self.dim,
            labels,
            class_count: self.class_count,
            targets,
        }
    }

    /// Concatenates datasets with the same dimension and class count.
    pub fn concat<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a LabeledDataset>,
    {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::InvalidParameter("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for part in iter {
            if part.dim != out.dim || part.class_count != out.class_count {
                return Err(Error::DimensionMismatch {
                    expected: out.dim,
                    actual: part.dim,
                });
            }
            if part.has_targets() != out.has_targets() {
                return Err(Error::InvalidParameter(
                    "cannot mix datasets with and without targets".into(),
                ));
            }
            out.features.extend_from_slice(&part.features);
            out.labels.extend_from_slice(&part.labels);
            if let (Some(t), Some(p)) = (out.targets.as_mut(), part.targets.as_ref()) {
                t.extend_from_slice(p);
            }
        }
        Ok(out)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    pub fn distinct_labels(&self) -> usize {
        self.label_histogram().iter().filter(|&&c| c > 0).count()
    }

    /// Sample indices sorted by label, stable within a label.
    fn indices_by_label(&self, indices: &[usize]) -> Vec<usize> {
        let mut sorted = indices.to_vec();
        sorted.sort_by_key(|&i| (self.labels[i], i));
        sorted
    }
}

/// One vehicle's immutable local dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub owner: usize,
    pub data: LabeledDataset,
}

impl Shard {
    pub fn size(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Iid,
    LocalNonIid,
    EdgeNonIid,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Iid => "iid",
            Regime::LocalNonIid => "local_noniid",
            Regime::EdgeNonIid => "edge_noniid",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Regime::Iid),
            "local_noniid" => Ok(Regime::LocalNonIid),
            "edge_noniid" => Ok(Regime::EdgeNonIid),
            other => Err(Error::InvalidParameter(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub regime: Regime,
    /// `l`: classes per vehicle (local) or per edge (edge); ignored for IID.
    pub classes_per_unit: usize,
    pub vehicle_count: usize,
    pub edge_count: usize,
    pub seed: u64,
    /// Edge non-i.i.d. with `l * N < C`: drop the classes no edge owns
    /// instead of failing.
    pub allow_partial_class_coverage: bool,
}

/// Shards plus the edge each vehicle starts on.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Shard>,
    pub initial_edge: Vec<usize>,
    pub edge_count: usize,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Shard::size).collect()
    }

    /// Concatenation of all shards in vehicle order.
    pub fn union(&self) -> Result<LabeledDataset> {
        LabeledDataset::concat(self.shards.iter().map(|s| &s.data))
    }

    /// CSV rows `vehicle_id,edge_id,shard_size,label_histogram` with the
    /// histogram semicolon-joined over all classes.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("vehicle_id,edge_id,shard_size,label_histogram\n");
        for (shard, edge) in self.shards.iter().zip(&self.initial_edge) {
            let hist: Vec<String> = shard
                .data
                .label_histogram()
                .iter()
                .map(ToString::to_string)
                .collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                shard.owner,
                edge,
                shard.size(),
                hist.join(";")
            ));
        }
        out
    }
}

/// Gaussian-mixture classification data: `class_count` unit-variance
/// isotropic clusters whose means are at least `separation` apart.
///
/// Samples are emitted class by class.
pub fn generate_synthetic(
    class_count: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 || dim < 2 || samples_per_class < 1 {
        return Err(Error::InvalidParameter(format!(
            "need C >= 2, d >= 2, s >= 1 (got C={class_count}, d={dim}, s={samples_per_class})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut rng = SplitMix64::derive(seed, &[stream::DATASET]);
    let mut means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.next_normal()).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..class_count {
        for b in a + 1..class_count {
            min_dist = min_dist.min(euclidean(&means[a], &means[b]));
        }
    }
    let scale = separation / min_dist;
    for mean in &mut means {
        mean.iter_mut().for_each(|x| *x *= scale);
    }

    let n = class_count * samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            features.extend(mean.iter().map(|m| m + rng.next_normal()));
            labels.push(class);
        }
    }
    LabeledDataset::new(features, dim, labels, class_count)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Stratified split: from every class, `round(n_c * test_fraction)` samples
/// go to the test set. Both halves keep the original sample order.
pub fn train_test_split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = SplitMix64::derive(seed, &[stream::TRAIN_TEST_SPLIT]);
    let mut is_test = vec![false; data.len()];
    for class in 0..data.class_count() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        rng.shuffle(&mut members);
        let take = (members.len() as f64 * test_fraction).round() as usize;
        for &i in &members[..take] {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..data.len()).filter(|&i| is_test[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidParameter(
            "split leaves an empty train or test set".into(),
        ));
    }
    Ok((data.subset(&train), data.subset(&test)))
}

/// Drops `len % multiple` samples, one at a time from the currently largest
/// class (lowest class id on ties, highest sample index first).
fn truncate_to_multiple(data: &LabeledDataset, indices: &[usize], multiple: usize) -> Vec<usize> {
    let excess = indices.len() % multiple;
    let mut keep = vec![true; indices.len()];
    let mut hist = vec![0usize; data.class_count()];
    for &i in indices {
        hist[data.label(i)] += 1;
    }
    for _ in 0..excess {
        let largest = (0..hist.len())
            .max_by_key(|&c| (hist[c], std::cmp::Reverse(c)))
            .expect("class_count > 0");
        let pos = (0..indices.len())
            .rev()
            .find(|&p| keep[p] && data.label(indices[p]) == largest)
            .expect("largest class has a kept sample");
        keep[pos] = false;
        hist[largest] -= 1;
    }
    indices
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&i, _)| i)
        .collect()
}

/// Boundaries splitting `len` items into `parts` contiguous chunks whose
/// sizes differ by at most one.
fn chunk_bounds(len: usize, parts: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..parts).map(move |p| (p * len / parts, (p + 1) * len / parts))
}

/// Classes owned by edge `n`: `{(n*l + i) mod C : i < l}`.
pub fn edge_classes(edge: usize, classes_per_edge: usize, class_count: usize) -> Vec<usize> {
    (0..classes_per_edge)
        .map(|i| (edge * classes_per_edge + i) % class_count)
        .collect()
}

pub fn partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    let m = spec.vehicle_count;
    let n_edges = spec.edge_count;
    let c = data.class_count();
    let l = spec.classes_per_unit;
    if m == 0 || n_edges == 0 {
        return Err(Error::InvalidParameter(
            "vehicle and edge counts must be positive".into(),
        ));
    }
    if spec.regime != Regime::Iid && (l == 0 || l > c) {
        return Err(Error::InfeasiblePartition(format!(
            "classes per unit must lie in [1, {c}], got {l}"
        )));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let contiguous_edges: Vec<usize> = (0..m).map(|v| v * n_edges / m).collect();

    let (groups, initial_edge) = match spec.regime {
        Regime::Iid => {
            let kept = truncate_to_multiple(data, &all, m);
            if kept.len() < m {
                return Err(Error::InfeasiblePartition(format!(
                    "{} samples cannot fill {m} shards",
                    data.len()
                )));
            }
            let mut perm = kept;
            SplitMix64::derive(spec.seed, &[stream::PARTITION]).shuffle(&mut perm);
            let groups = chunk_bounds(perm.len(), m)
                .map(|(a, b)| perm[a..b].to_vec())
                .collect();
            (groups, contiguous_edges)
        }
        Regime::LocalNonIid => {
            if l * m < c {
                return Err(Error::InfeasiblePartition(format!(
                    "local non-i.i.d. needs l*M >= C ({l}*{m} < {c})"
                )));
            }
            let kept = truncate_to_multiple(data, &all, m);
            let sorted = data.indices_by_label(&kept);
            if sorted.len() < m * l {
                return Err(Error::InfeasiblePartition(format!(
                    "{} samples cannot form {} label blocks",
                    sorted.len(),
                    m * l
                )));
            }
            let mut groups = vec![Vec::new(); m];
            for (block, (a, b)) in chunk_bounds(sorted.len(), m * l).enumerate() {
                groups[block % m].extend_from_slice(&sorted[a..b]);
            }
            (groups, contiguous_edges)
        }
        Regime::EdgeNonIid => edge_noniid_groups(data, spec)?,
    };

    let shards = groups
        .into_iter()
        .enumerate()
        .map(|(owner, mut idx)| {
            idx.sort_unstable();
            Shard {
                owner,
                data: data.subset(&idx),
            }
        })
        .collect::<Vec<_>>();
    if let Some(empty) = shards.iter().find(|s| s.data.is_empty()) {
        return Err(Error::InfeasiblePartition(format!(
            "vehicle {} received no samples",
            empty.owner
        )));
    }
    Ok(Partition {
        shards,
        initial_edge,
        edge_count: n_edges,
    })
}

fn edge_noniid_groups(
    data: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let m = spec.vehicle_count;
    let n_edges = spec.edge_count;
    let c = data.class_count();
    let l = spec.classes_per_unit;
    if m % n_edges != 0 {
        return Err(Error::InfeasiblePartition(format!(
            "edge non-i.i.d. needs M divisible by N ({m} % {n_edges} != 0)"
        )));
    }
    if l * n_edges < c && !spec.allow_partial_class_coverage {
        return Err(Error::InfeasiblePartition(format!(
            "edge non-i.i.d. needs l*N >= C ({l}*{n_edges} < {c}); \
             set allow_partial_class_coverage to drop unowned classes"
        )));
    }
    let owners: Vec<Vec<usize>> = {
        let mut owners = vec![Vec::new(); c];
        for edge in 0..n_edges {
            for class in edge_classes(edge, l, c) {
                owners[class].push(edge);
            }
        }
        owners
    };
    let covered: Vec<usize> = (0..data.len())
        .filter(|&i| !owners[data.label(i)].is_empty())
        .collect();
    let kept = truncate_to_multiple(data, &covered, m);
    let sorted = data.indices_by_label(&kept);

    let mut pools = vec![Vec::new(); n_edges];
    let mut start = 0;
    for (class, class_owners) in owners.iter().enumerate() {
        let end = start + sorted[start..].iter().take_while(|&&i| data.label(i) == class).count();
        if !class_owners.is_empty() {
            let block = &sorted[start..end];
            for (k, (a, b)) in chunk_bounds(block.len(), class_owners.len()).enumerate() {
                pools[class_owners[k]].extend_from_slice(&block[a..b]);
            }
        }
        start = end;
    }

    let per_edge = m / n_edges;
    let mut groups = vec![Vec::new(); m];
    let mut initial_edge = vec![0; m];
    for (edge, pool) in pools.iter_mut().enumerate() {
        let distinct = {
            let mut labels: Vec<usize> = pool.iter().map(|&i| data.label(i)).collect();
            labels.dedup();
            labels.len()
        };
        if distinct != l {
            return Err(Error::InfeasiblePartition(format!(
                "edge {edge} would hold {distinct} classes instead of {l}"
            )));
        }
        SplitMix64::derive(spec.seed, &[stream::PARTITION, edge as u64]).shuffle(pool);
        for (k, (a, b)) in chunk_bounds(pool.len(), per_edge).enumerate() {
            let vehicle = edge * per_edge + k;
            groups[vehicle] = pool[a..b].to_vec();
            initial_edge[vehicle] = edge;
        }
    }
    Ok((groups, initial_edge))
}

/// Parameters of the shared-input construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedInputSpec {
    pub vehicle_count: usize,
    pub edge_count: usize,
    pub class_count: usize,
    /// Classes carried by each initial edge group; `class_count` makes all
    /// shards identical.
    pub classes_per_edge: usize,
    pub dim: usize,
    pub samples_per_vehicle: usize,
    /// Largest eigenvalue of `XᵀX / n` after rescaling the features.
    pub feature_scale: f64,
    pub seed: u64,
}

/// Every shard shares one feature matrix `X` and differs only in labels:
/// the vehicles of initial edge group `g` label sample `i` with
/// `(g*l + i mod l) mod C`. For the quadratic loss this makes
/// `∇f_m − ∇F` independent of the parameters, and every vehicle has the same
/// gradient divergence.
pub fn shared_input_partition(spec: &SharedInputSpec) -> Result<Partition> {
    let SharedInputSpec {
        vehicle_count: m,
        edge_count: n_edges,
        class_count: c,
        classes_per_edge: l,
        dim,
        samples_per_vehicle: n,
        feature_scale,
        seed,
    } = *spec;
    if m == 0 || n_edges == 0 || m % n_edges != 0 {
        return Err(Error::InfeasiblePartition(format!(
            "shared-input construction needs M divisible by N (M={m}, N={n_edges})"
        )));
    }
    if c == 0 || l == 0 || l > c || dim == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "shared-input construction needs C, l <= C, d and n positive".into(),
        ));
    }
    if !(feature_scale > 0.0) {
        return Err(Error::InvalidParameter("feature scale must be positive".into()));
    }
    let mut rng = SplitMix64::derive(seed, &[stream::DATASET]);
    let mut features: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
    let moment = second_moment(&features, dim, false);
    let top = crate::models::power_iteration(&moment, dim, seed)?;
    let factor = (feature_scale / top).sqrt();
    features.iter_mut().for_each(|x| *x *= factor);

    let per_edge = m / n_edges;
    let mut shards = Vec::with_capacity(m);
    let mut initial_edge = Vec::with_capacity(m);
    for vehicle in 0..m {
        let group = vehicle / per_edge;
        let labels = (0..n).map(|i| (group * l + i % l) % c).collect();
        shards.push(Shard {
            owner: vehicle,
            data: LabeledDataset::new(features.clone(), dim, labels, c)?,
        });
        initial_edge.push(group);
    }
    Ok(Partition {
        shards,
        initial_edge,
        edge_count: n_edges,
    })
}

/// `(1/n) Σ x̃ x̃ᵀ` as a dense row-major matrix, where `x̃` is the feature row
/// optionally extended with a constant 1.
pub fn second_moment(features: &[f64], dim: usize, with_bias: bool) -> Vec<f64> {
    let n = features.len() / dim;
    let p = dim + usize::from(with_bias);
    let mut out = vec![0.0; p * p];
    let mut ext = vec![1.0; p];
    for row in features.chunks_exact(dim) {
        ext[..dim].copy_from_slice(row);
        for a in 0..p {
            let xa = ext[a];
            for b in a..p {
                out[a * p + b] += xa * ext[b];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = out[a * p + b] / n as f64;
            out[a * p + b] = v;
            out[b * p + a] = v;
        }
    }
    out
}

/// Reads one sample per line: comma-separated features, integer label last.
/// No header. The class count is one more than the largest label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Parse {
                row,
                message: "need at least one feature and a label".into(),
            });
        }
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {d} features, found {width}"),
                })
            }
            _ => {}
        }
        for field in record.iter().take(width) {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                message: format!("bad feature value {field:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite feature {field:?}"),
                });
            }
            features.push(x);
        }
        let raw = &record[width];
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("label {raw:?} is not a non-negative integer"),
        })?;
        labels.push(label);
    }
    let dim = dim.ok_or(Error::EmptyFile)?;
    let class_count = labels.iter().max().map_or(0, |&y| y + 1);
    LabeledDataset::new(features, dim, labels, class_count)
}

/// Writes the dataset in the format read by [`load_csv`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv(data: &LabeledDataset, mut out: impl Write) -> Result<()> {
    let mut line = String::new();
    for i in 0..data.len() {
        line.clear();
        for x in data.row(i) {
            line.push_str(&format!("{x:?},"));
        }
        line.push_str(&data.label(i).to_string());
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(regime: Regime, l: usize, m: usize, n: usize, seed: u64) -> PartitionSpec {
        PartitionSpec {
            regime,
            classes_per_unit: l,
            vehicle_count: m,
            edge_count: n,
            seed,
            allow_partial_class_coverage: false,
        }
    }

    fn rows(data: &LabeledDataset) -> Vec<(Vec<u64>, usize)> {
        let mut out: Vec<_> = (0..data.len())
            .map(|i| (data.row(i).iter().map(|x| x.to_bits()).collect(), data.label(i)))
            .collect();
        out.sort();
        out
    }

    #[test]
    fn synthetic_two_points_are_separated() {
        let data = generate_synthetic(2, 2, 1, 10.0, 7).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.labels(), &[0, 1]);
        // Means are exactly 10 apart; unit noise moves each point a little.
        let d = euclidean(data.row(0), data.row(1));
        assert!(d > 5.0, "distance {d}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(8, 16, 500, 4.0, 1).unwrap();
        let b = generate_synthetic(8, 16, 500, 4.0, 1).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_csv(&a, &mut ba).unwrap();
        write_csv(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate_synthetic(8, 16, 500, 4.0, 2).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_dimensions() {
        assert!(generate_synthetic(1, 2, 1, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 1, 1, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 2, 0, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 2, 1, 0.0, 0).is_err());
    }

    #[test]
    fn edge_noniid_two_classes_per_edge() {
        let data = generate_synthetic(8, 4, 50, 4.0, 3).unwrap();
        let part = partition(&data, &spec(Regime::EdgeNonIid, 2, 32, 4, 9)).unwrap();
        let mut seen = vec![None; 8];
        for edge in 0..4 {
            let mut hist = vec![0; 8];
            for (shard, &e) in part.shards.iter().zip(&part.initial_edge) {
                if e == edge {
                    for (h, c) in hist.iter_mut().zip(shard.data.label_histogram()) {
                        *h += c;
                    }
                }
            }
            let labels: Vec<usize> = (0..8).filter(|&c| hist[c] > 0).collect();
            assert_eq!(labels.len(), 2, "edge {edge}: {labels:?}");
            for c in labels {
                assert!(seen[c].is_none(), "class {c} owned twice");
                seen[c] = Some(edge);
            }
        }
        assert!(seen.iter().all(Option::is_some));
        assert_eq!(part.initial_edge.iter().filter(|&&e| e == 0).count(), 8);
    }

    #[test]
    fn iid_single_vehicle_is_the_dataset() {
        let data = generate_synthetic(3, 2, 7, 2.0, 0).unwrap();
        let part = partition(&data, &spec(Regime::Iid, 0, 1, 1, 5)).unwrap();
        assert_eq!(part.shards.len(), 1);
        assert_eq!(part.shards[0].data, data);
    }

    #[test]
    fn local_noniid_one_class_per_vehicle() {
        let data = generate_synthetic(8, 2, 5000, 4.0, 0).unwrap();
        let part = partition(&data, &spec(Regime::LocalNonIid, 1, 32, 4, 0)).unwrap();
        for shard in &part.shards {
            assert_eq!(shard.size(), 40000 / 32);
            assert_eq!(shard.data.distinct_labels(), 1);
        }
    }

    #[test]
    fn infeasible_partitions_are_rejected() {
        let data = generate_synthetic(8, 2, 10, 4.0, 0).unwrap();
        let err = partition(&data, &spec(Regime::EdgeNonIid, 1, 32, 4, 0)).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition(_)), "{err}");
        let err = partition(&data, &spec(Regime::LocalNonIid, 1, 4, 4, 0)).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition(_)), "{err}");
        let err = partition(&data, &spec(Regime::EdgeNonIid, 2, 30, 4, 0)).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition(_)), "{err}");
    }

    #[test]
    fn partial_class_coverage_drops_unowned_classes() {
        let data = generate_synthetic(8, 2, 40, 4.0, 0).unwrap();
        let mut s = spec(Regime::EdgeNonIid, 1, 32, 4, 0);
        s.allow_partial_class_coverage = true;
        let part = partition(&data, &s).unwrap();
        let union = part.union().unwrap();
        assert_eq!(union.len(), 160);
        let hist = union.label_histogram();
        assert_eq!(&hist[..4], &[40, 40, 40, 40]);
        assert!(hist[4..].iter().all(|&c| c == 0));
        for (shard, &edge) in part.shards.iter().zip(&part.initial_edge) {
            assert_eq!(shard.data.labels().iter().all(|&y| y == edge), true);
        }
    }

    #[test]
    fn truncation_drops_from_the_largest_class() {
        let labels = vec![0, 0, 0, 1, 1, 2];
        let data = LabeledDataset::new(vec![0.0; 6], 1, labels, 3).unwrap();
        let part = partition(&data, &spec(Regime::Iid, 0, 4, 1, 0)).unwrap();
        let hist = part.union().unwrap().label_histogram();
        assert_eq!(hist, vec![1, 2, 1]);
    }

    #[test]
    fn iid_shards_track_the_global_histogram() {
        let data = generate_synthetic(8, 2, 1000, 4.0, 4).unwrap();
        let part = partition(&data, &spec(Regime::Iid, 0, 8, 4, 21)).unwrap();
        let global = data.label_histogram();
        for shard in &part.shards {
            assert!(shard.size() >= 500);
            for (c, &count) in shard.data.label_histogram().iter().enumerate() {
                let local = count as f64 / shard.size() as f64;
                let reference = global[c] as f64 / data.len() as f64;
                assert!((local - reference).abs() <= 0.05, "class {c}: {local} vs {reference}");
            }
        }
    }

    #[test]
    fn stratified_split_keeps_class_balance() {
        let data = generate_synthetic(4, 3, 50, 3.0, 0).unwrap();
        let (train, test) = train_test_split(&data, 0.2, 1).unwrap();
        assert_eq!(train.label_histogram(), vec![40; 4]);
        assert_eq!(test.label_histogram(), vec![10; 4]);
    }

    #[test]
    fn shared_input_construction() {
        let part = shared_input_partition(&SharedInputSpec {
            vehicle_count: 8,
            edge_count: 4,
            class_count: 4,
            classes_per_edge: 1,
            dim: 3,
            samples_per_vehicle: 10,
            feature_scale: 2.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(part.shards.len(), 8);
        assert_eq!(part.initial_edge, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        for shard in &part.shards {
            assert_eq!(shard.data.features(), part.shards[0].data.features());
            assert!(shard.data.labels().iter().all(|&y| y == part.initial_edge[shard.owner]));
        }
        let moment = second_moment(part.shards[0].data.features(), 3, false);
        let top = crate::models::power_iteration(&moment, 3, 0).unwrap();
        assert!((top - 2.0).abs() < 1e-6);
    }

    #[test]
    fn partition_report_lists_histograms() {
        let data = generate_synthetic(2, 2, 4, 3.0, 0).unwrap();
        let part = partition(&data, &spec(Regime::LocalNonIid, 1, 2, 2, 0)).unwrap();
        assert_eq!(
            part.report_csv(),
            "vehicle_id,edge_id,shard_size,label_histogram\n0,0,4,4;0\n1,1,4,0;4\n"
        );
    }

    #[test]
    fn csv_reads_the_documented_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1.0,2.0,0\n0.5,0.1,1\n2.2,3.3,0\n").unwrap();
        let data = load_csv(&path).unwrap();
        assert_eq!((data.len(), data.dim(), data.class_count()), (3, 2, 2));
        assert_eq!(data.row(2), &[2.2, 3.3]);
    }

    #[test]
    fn csv_rejects_negative_label_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1.0,2.0,0\n0.5,0.1,-1\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_rejects_empty_and_ragged_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty).unwrap_err(), Error::EmptyFile));
        let ragged = dir.path().join("r.csv");
        std::fs::write(&ragged, "1,2,0\n1,0\n").unwrap();
        assert!(matches!(load_csv(&ragged).unwrap_err(), Error::Parse { row: 2, .. }));
        assert!(matches!(load_csv(dir.path().join("missing.csv")).unwrap_err(), Error::Io(_)));
    }

    #[test]
    fn csv_round_trip() {
        let data = generate_synthetic(3, 4, 20, 2.5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&data, std::fs::File::create(&path).unwrap()).unwrap();
        assert_eq!(load_csv(&path).unwrap(), data);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_is_exact_and_deterministic(
            seed in 0u64..1000,
            regime in prop_oneof![Just(Regime::Iid), Just(Regime::LocalNonIid), Just(Regime::EdgeNonIid)],
            l in 1usize..=2,
            per_class in 16usize..40,
        ) {
            let data = generate_synthetic(4, 2, per_class, 3.0, seed).unwrap();
            let s = spec(regime, if regime == Regime::EdgeNonIid { 1 } else { l }, 8, 4, seed);
            let part = partition(&data, &s).unwrap();
            prop_assert_eq!(&part, &partition(&data, &s).unwrap());

            // Only the truncation remainder may be dropped.
            let union = part.union().unwrap();
            prop_assert_eq!(union.len(), data.len() - data.len() % 8);
            let mut remaining = rows(&data);
            for row in rows(&union) {
                let pos = remaining.binary_search(&row);
                prop_assert!(pos.is_ok());
                remaining.remove(pos.unwrap());
            }

            if regime == Regime::EdgeNonIid {
                for edge in 0..4 {
                    let members: Vec<&LabeledDataset> = part.shards.iter()
                        .filter(|sh| part.initial_edge[sh.owner] == edge)
                        .map(|sh| &sh.data)
                        .collect();
                    prop_assert_eq!(LabeledDataset::concat(members).unwrap().distinct_labels(), 1);
                }
            }
        }
    }
}

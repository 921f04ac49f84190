//! Experiment configuration files.
//!
//! The format is a flat list of `[section]` headers and `key = value`
//! lines. `#` starts a comment at the beginning of a line or after
//! whitespace. Lists are comma separated. Every key is optional; missing
//! keys take the defaults shown by [`ExperimentConfig::to_text`] on
//! `ExperimentConfig::default()`.
//!
//! ```text
//! [dataset]
//! source = synthetic        # synthetic | csv | shared_input
//! [partition]
//! regime = edge_noniid
//! classes_per_unit = 2
//! [mobility]
//! speed = 30
//! [hfl]
//! cloud_epochs = 100
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datasets::Regime;
use crate::error::{Error, Result};
use crate::models::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
    SharedInput,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Csv => "csv",
            DataSource::SharedInput => "shared_input",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "csv" => Ok(DataSource::Csv),
            "shared_input" => Ok(DataSource::SharedInput),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MobilityModel {
    Square,
    Static,
}

impl MobilityModel {
    pub fn as_str(self) -> &'static str {
        match self {
            MobilityModel::Square => "square",
            MobilityModel::Static => "static",
        }
    }
}

impl FromStr for MobilityModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "square" => Ok(MobilityModel::Square),
            "static" => Ok(MobilityModel::Static),
            other => Err(format!("unknown mobility model {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub path: String,
    pub test_fraction: f64,
    pub samples_per_vehicle: usize,
    pub feature_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    pub regime: Regime,
    pub classes_per_unit: usize,
    pub vehicles: usize,
    pub edges: usize,
    pub allow_partial_class_coverage: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilitySection {
    pub model: MobilityModel,
    pub side_length: f64,
    pub speed: f64,
    pub slowdown: f64,
    pub zone: f64,
    pub turn_probability: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HflSection {
    pub eta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    pub batch_size: usize,
    pub record_virtual: bool,
    pub full_batch: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub family: Family,
    pub l2_reg: f64,
    pub hidden_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    /// `None` selects the largest admissible value.
    pub epsilon: Option<f64>,
    /// Multiplies the divergence estimates before checking.
    pub delta_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub speeds: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fractions of the centralized accuracy ceiling.
    pub targets: Vec<f64>,
    /// Start every cell from a model pre-trained on i.i.d. data.
    pub pretrain: bool,
    pub pretrain_fraction: f64,
    pub pretrain_max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: String,
    pub trace_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub mobility: MobilitySection,
    pub hfl: HflSection,
    pub model: ModelSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection {
                source: DataSource::Synthetic,
                classes: 8,
                dim: 16,
                samples_per_class: 500,
                separation: 4.0,
                path: String::new(),
                test_fraction: 0.2,
                samples_per_vehicle: 100,
                feature_scale: 1.0,
                seed: 1,
            },
            partition: PartitionSection {
                regime: Regime::EdgeNonIid,
                classes_per_unit: 2,
                vehicles: 32,
                edges: 4,
                allow_partial_class_coverage: false,
                seed: 1,
            },
            mobility: MobilitySection {
                model: MobilityModel::Square,
                side_length: 1000.0,
                speed: 30.0,
                slowdown: 0.5,
                zone: 50.0,
                turn_probability: 0.0,
                seed: 1,
            },
            hfl: HflSection {
                eta: 0.1,
                tau_l: 6,
                tau_e: 10,
                cloud_epochs: 600,
                batch_size: 20,
                record_virtual: false,
                full_batch: false,
                seed: 1,
            },
            model: ModelSection {
                family: Family::MultinomialLogistic,
                l2_reg: 0.0,
                hidden_width: 32,
            },
            verify: VerifySection {
                epsilon: None,
                delta_scale: 1.0,
            },
            sweep: SweepSection {
                speeds: vec![0.0, 30.0],
                seeds: vec![1, 2, 3],
                targets: vec![0.65, 0.70, 0.75],
                pretrain: false,
                pretrain_fraction: 0.60,
                pretrain_max_epochs: 500,
            },
            output: OutputSection {
                dir: "out".into(),
                trace_rounds: 10,
            },
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Replaces every section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.partition.seed = seed;
        self.mobility.seed = seed;
        self.hfl.seed = seed;
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let _ = writeln!(s, "[dataset]");
        let _ = writeln!(s, "source = {}", d.source.as_str());
        let _ = writeln!(s, "classes = {}", d.classes);
        let _ = writeln!(s, "dim = {}", d.dim);
        let _ = writeln!(s, "samples_per_class = {}", d.samples_per_class);
        let _ = writeln!(s, "separation = {}", d.separation);
        let _ = writeln!(s, "path = {}", d.path);
        let _ = writeln!(s, "test_fraction = {}", d.test_fraction);
        let _ = writeln!(s, "samples_per_vehicle = {}", d.samples_per_vehicle);
        let _ = writeln!(s, "feature_scale = {}", d.feature_scale);
        let _ = writeln!(s, "seed = {}", d.seed);
        let p = &self.partition;
        let _ = writeln!(s, "\n[partition]");
        let _ = writeln!(s, "regime = {}", p.regime.as_str());
        let _ = writeln!(s, "classes_per_unit = {}", p.classes_per_unit);
        let _ = writeln!(s, "vehicles = {}", p.vehicles);
        let _ = writeln!(s, "edges = {}", p.edges);
        let _ = writeln!(s, "allow_partial_class_coverage = {}", p.allow_partial_class_coverage);
        let _ = writeln!(s, "seed = {}", p.seed);
        let m = &self.mobility;
        let _ = writeln!(s, "\n[mobility]");
        let _ = writeln!(s, "model = {}", m.model.as_str());
        let _ = writeln!(s, "side_length = {}", m.side_length);
        let _ = writeln!(s, "speed = {}", m.speed);
        let _ = writeln!(s, "slowdown = {}", m.slowdown);
        let _ = writeln!(s, "zone = {}", m.zone);
        let _ = writeln!(s, "turn_probability = {}", m.turn_probability);
        let _ = writeln!(s, "seed = {}", m.seed);
        let h = &self.hfl;
        let _ = writeln!(s, "\n[hfl]");
        let _ = writeln!(s, "eta = {}", h.eta);
        let _ = writeln!(s, "tau_l = {}", h.tau_l);
        let _ = writeln!(s, "tau_e = {}", h.tau_e);
        let _ = writeln!(s, "cloud_epochs = {}", h.cloud_epochs);
        let _ = writeln!(s, "batch_size = {}", h.batch_size);
        let _ = writeln!(s, "record_virtual = {}", h.record_virtual);
        let _ = writeln!(s, "full_batch = {}", h.full_batch);
        let _ = writeln!(s, "seed = {}", h.seed);
        let md = &self.model;
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "family = {}", md.family.as_str());
        let _ = writeln!(s, "l2_reg = {}", md.l2_reg);
        let _ = writeln!(s, "hidden_width = {}", md.hidden_width);
        let v = &self.verify;
        let _ = writeln!(s, "\n[verify]");
        match v.epsilon {
            Some(e) => {
                let _ = writeln!(s, "epsilon = {e}");
            }
            None => {
                let _ = writeln!(s, "epsilon = auto");
            }
        }
        let _ = writeln!(s, "delta_scale = {}", v.delta_scale);
        let sw = &self.sweep;
        let _ = writeln!(s, "\n[sweep]");
        let _ = writeln!(s, "speeds = {}", join(&sw.speeds));
        let _ = writeln!(s, "seeds = {}", join(&sw.seeds));
        let _ = writeln!(s, "targets = {}", join(&sw.targets));
        let _ = writeln!(s, "pretrain = {}", sw.pretrain);
        let _ = writeln!(s, "pretrain_fraction = {}", sw.pretrain_fraction);
        let _ = writeln!(s, "pretrain_max_epochs = {}", sw.pretrain_max_epochs);
        let o = &self.output;
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", o.dir);
        let _ = writeln!(s, "trace_rounds = {}", o.trace_rounds);
        s
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses and validates, reporting every problem at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut entries: BTreeMap<(String, String), (usize, String)> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    errors.push(format!("line {line_no}: unknown section [{name}]"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {line_no}: expected `key = value`"));
                continue;
            };
            let key = key.trim().to_string();
            let Some(sec) = section.clone() else {
                errors.push(format!("line {line_no}: `{key}` appears before any section"));
                continue;
            };
            let known = KEYS
                .iter()
                .find(|(s, _)| *s == sec)
                .is_some_and(|(_, keys)| keys.contains(&key.as_str()));
            if !known {
                if KEYS.iter().any(|(s, _)| *s == sec) {
                    errors.push(format!("line {line_no}: unknown key `{key}` in [{sec}]"));
                }
                continue;
            }
            if let Some((first, _)) = entries.get(&(sec.clone(), key.clone())) {
                errors.push(format!("line {line_no}: `{key}` already set on line {first}"));
                continue;
            }
            entries.insert((sec, key), (line_no, value.trim().to_string()));
        }

        let mut reader = Reader {
            entries,
            errors: &mut errors,
        };
        let mut cfg = ExperimentConfig::default();
        let explicit_zone = reader.has("mobility", "zone");
        {
            let d = &mut cfg.dataset;
            reader.read("dataset", "source", &mut d.source);
            reader.read("dataset", "classes", &mut d.classes);
            reader.read("dataset", "dim", &mut d.dim);
            reader.read("dataset", "samples_per_class", &mut d.samples_per_class);
            reader.read("dataset", "separation", &mut d.separation);
            reader.read("dataset", "path", &mut d.path);
            reader.read("dataset", "test_fraction", &mut d.test_fraction);
            reader.read("dataset", "samples_per_vehicle", &mut d.samples_per_vehicle);
            reader.read("dataset", "feature_scale", &mut d.feature_scale);
            reader.read("dataset", "seed", &mut d.seed);
        }
        {
            let p = &mut cfg.partition;
            reader.read_with("partition", "regime", &mut p.regime, |s| {
                Regime::from_str(s).map_err(|e| e.to_string())
            });
            reader.read("partition", "classes_per_unit", &mut p.classes_per_unit);
            reader.read("partition", "vehicles", &mut p.vehicles);
            reader.read("partition", "edges", &mut p.edges);
            reader.read("partition", "allow_partial_class_coverage", &mut p.allow_partial_class_coverage);
            reader.read("partition", "seed", &mut p.seed);
        }
        {
            let m = &mut cfg.mobility;
            reader.read("mobility", "model", &mut m.model);
            reader.read("mobility", "side_length", &mut m.side_length);
            reader.read("mobility", "speed", &mut m.speed);
            reader.read("mobility", "slowdown", &mut m.slowdown);
            reader.read("mobility", "zone", &mut m.zone);
            reader.read("mobility", "turn_probability", &mut m.turn_probability);
            reader.read("mobility", "seed", &mut m.seed);
            if !explicit_zone {
                m.zone = 0.05 * m.side_length;
            }
        }
        {
            let h = &mut cfg.hfl;
            reader.read("hfl", "eta", &mut h.eta);
            reader.read("hfl", "tau_l", &mut h.tau_l);
            reader.read("hfl", "tau_e", &mut h.tau_e);
            reader.read("hfl", "cloud_epochs", &mut h.cloud_epochs);
            reader.read("hfl", "batch_size", &mut h.batch_size);
            reader.read("hfl", "record_virtual", &mut h.record_virtual);
            reader.read("hfl", "full_batch", &mut h.full_batch);
            reader.read("hfl", "seed", &mut h.seed);
        }
        {
            let md = &mut cfg.model;
            reader.read_with("model", "family", &mut md.family, |s| {
                Family::from_str(s).map_err(|e| e.to_string())
            });
            reader.read("model", "l2_reg", &mut md.l2_reg);
            reader.read("model", "hidden_width", &mut md.hidden_width);
        }
        {
            let v = &mut cfg.verify;
            reader.read_with("verify", "epsilon", &mut v.epsilon, |s| {
                if s == "auto" {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|e| e.to_string())
                }
            });
            reader.read("verify", "delta_scale", &mut v.delta_scale);
        }
        {
            let sw = &mut cfg.sweep;
            reader.read_with("sweep", "speeds", &mut sw.speeds, parse_list);
            reader.read_with("sweep", "seeds", &mut sw.seeds, parse_list);
            reader.read_with("sweep", "targets", &mut sw.targets, parse_list);
            reader.read("sweep", "pretrain", &mut sw.pretrain);
            reader.read("sweep", "pretrain_fraction", &mut sw.pretrain_fraction);
            reader.read("sweep", "pretrain_max_epochs", &mut sw.pretrain_max_epochs);
        }
        {
            let o = &mut cfg.output;
            reader.read("output", "dir", &mut o.dir);
            reader.read("output", "trace_rounds", &mut o.trace_rounds);
        }

        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Every cross-field inconsistency.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.dataset;
        let p = &self.partition;
        let m = &self.mobility;
        let h = &self.hfl;
        match d.source {
            DataSource::Synthetic => {
                if d.classes < 2 {
                    out.push("dataset.classes must be at least 2".into());
                }
                if d.dim == 0 {
                    out.push("dataset.dim must be at least 1".into());
                }
                if d.samples_per_class == 0 {
                    out.push("dataset.samples_per_class must be at least 1".into());
                }
                if !(d.separation > 0.0) {
                    out.push("dataset.separation must be positive".into());
                }
            }
            DataSource::Csv => {
                if d.path.is_empty() {
                    out.push("dataset.path is required for source = csv".into());
                }
            }
            DataSource::SharedInput => {
                if d.classes < 1 || d.dim == 0 || d.samples_per_vehicle == 0 {
                    out.push("shared_input needs classes, dim and samples_per_vehicle of at least 1".into());
                }
                if !(d.feature_scale > 0.0) {
                    out.push("dataset.feature_scale must be positive".into());
                }
                if p.regime != Regime::EdgeNonIid {
                    out.push("shared_input assigns labels by edge; use regime = edge_noniid".into());
                }
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            out.push(format!("dataset.test_fraction {} must lie in [0, 1)", d.test_fraction));
        }
        if p.vehicles == 0 {
            out.push("partition.vehicles must be at least 1".into());
        }
        if p.edges == 0 {
            out.push("partition.edges must be at least 1".into());
        }
        if p.regime != Regime::Iid {
            if p.classes_per_unit == 0 {
                out.push("partition.classes_per_unit must be at least 1".into());
            }
            if d.source != DataSource::Csv && p.classes_per_unit > d.classes {
                out.push(format!(
                    "partition.classes_per_unit {} exceeds dataset.classes {}",
                    p.classes_per_unit, d.classes
                ));
            }
        }
        if p.regime == Regime::EdgeNonIid && p.edges > 0 && p.vehicles % p.edges != 0 {
            out.push(format!(
                "edge_noniid needs vehicles ({}) divisible by edges ({})",
                p.vehicles, p.edges
            ));
        }
        match m.model {
            MobilityModel::Square => {
                if p.edges != 4 {
                    out.push(format!("the square road has 4 edges, partition.edges is {}", p.edges));
                }
                if !(m.side_length > 0.0) {
                    out.push("mobility.side_length must be positive".into());
                }
                if !(m.zone >= 0.0 && m.zone < m.side_length / 2.0) {
                    out.push(format!("mobility.zone {} must lie in [0, side_length/2)", m.zone));
                }
                if !(m.slowdown > 0.0 && m.slowdown <= 1.0) {
                    out.push("mobility.slowdown must lie in (0, 1]".into());
                }
                if !(0.0..=1.0).contains(&m.turn_probability) {
                    out.push("mobility.turn_probability must lie in [0, 1]".into());
                }
            }
            MobilityModel::Static => {}
        }
        if !(m.speed >= 0.0 && m.speed.is_finite()) {
            out.push("mobility.speed must be non-negative".into());
        }
        if !(h.eta >= 0.0 && h.eta.is_finite()) {
            out.push("hfl.eta must be non-negative".into());
        }
        for (name, value) in [("tau_l", h.tau_l), ("tau_e", h.tau_e), ("cloud_epochs", h.cloud_epochs)] {
            if value == 0 {
                out.push(format!("hfl.{name} must be at least 1"));
            }
        }
        if h.batch_size == 0 && !h.full_batch {
            out.push("hfl.batch_size must be at least 1".into());
        }
        if self.model.family == Family::Mlp1 && self.model.hidden_width == 0 {
            out.push("model.hidden_width must be at least 1 for mlp1".into());
        }
        if !(self.model.l2_reg >= 0.0) {
            out.push("model.l2_reg must be non-negative".into());
        }
        if let Some(e) = self.verify.epsilon {
            if !(e > 0.0) {
                out.push("verify.epsilon must be positive".into());
            }
        }
        if !(self.verify.delta_scale > 0.0) {
            out.push("verify.delta_scale must be positive".into());
        }
        let sw = &self.sweep;
        if sw.speeds.iter().any(|v| !(*v >= 0.0)) {
            out.push("sweep.speeds must be non-negative".into());
        }
        if sw.targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            out.push("sweep.targets must lie in (0, 1]".into());
        }
        if !(sw.pretrain_fraction > 0.0 && sw.pretrain_fraction <= 1.0) {
            out.push("sweep.pretrain_fraction must lie in (0, 1]".into());
        }
        out
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "source",
            "classes",
            "dim",
            "samples_per_class",
            "separation",
            "path",
            "test_fraction",
            "samples_per_vehicle",
            "feature_scale",
            "seed",
        ],
    ),
    (
        "partition",
        &["regime", "classes_per_unit", "vehicles", "edges", "allow_partial_class_coverage", "seed"],
    ),
    (
        "mobility",
        &["model", "side_length", "speed", "slowdown", "zone", "turn_probability", "seed"],
    ),
    (
        "hfl",
        &["eta", "tau_l", "tau_e", "cloud_epochs", "batch_size", "record_virtual", "full_batch", "seed"],
    ),
    ("model", &["family", "l2_reg", "hidden_width"]),
    ("verify", &["epsilon", "delta_scale"]),
    (
        "sweep",
        &["speeds", "seeds", "targets", "pretrain", "pretrain_fraction", "pretrain_max_epochs"],
    ),
    ("output", &["dir", "trace_rounds"]),
];

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    let bytes = line.as_bytes();
    for i in 1..bytes.len() {
        if bytes[i] == b'#' && bytes[i - 1].is_ascii_whitespace() {
            return &line[..i];
        }
    }
    line
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| item.trim().parse::<T>().map_err(|e| format!("{item:?}: {e}")))
        .collect()
}

struct Reader<'a> {
    entries: BTreeMap<(String, String), (usize, String)>,
    errors: &'a mut Vec<String>,
}

impl Reader<'_> {
    fn has(&self, section: &str, key: &str) -> bool {
        self.entries.contains_key(&(section.to_string(), key.to_string()))
    }

    fn read_with<T>(
        &mut self,
        section: &str,
        key: &str,
        slot: &mut T,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) {
        if let Some((line, value)) = self.entries.get(&(section.to_string(), key.to_string())) {
            match parse(value) {
                Ok(v) => *slot = v,
                Err(e) => self
                    .errors
                    .push(format!("line {line}: {section}.{key} = {value:?}: {e}")),
            }
        }
    }

    fn read<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T)
    where
        T::Err: std::fmt::Display,
    {
        self.read_with(section, key, slot, |s| s.parse::<T>().map_err(|e| e.to_string()));
    }
}

//! Experiment plumbing: deterministic batch execution, target selection,
//! sweeps, JSON configs, run manifests and a cache of trained models.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{bypass_run, region_attack, BypassPlan, ModelSet, NetworkOracle, RegionAttackConfig};
use crate::error::{Error, Result};
use crate::io::{cifar, idx, model_file, synth};
use crate::metrics::{ExperimentReport, ReportRow, RowLabel, TransferMatrix};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::train::LabeledDataset;
use crate::whitebox::{epsilon_attack, AttackResult, EpsAttackConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Derives an independent stream seed for cell `index` (SplitMix64 finalizer).
pub fn cell_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates `f(0..n)` on up to `workers` threads, returning results in index order.
pub fn run_cells<R, F>(n: usize, workers: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSelection {
    /// Every class other than the true label.
    AllOthers,
    /// One class other than the true label, drawn per image from the run seed.
    RandomOne,
}

/// `(image index, target)` pairs for the first `images` entries of `labels`.
pub fn attack_cells(
    labels: &[usize],
    classes: usize,
    images: usize,
    selection: TargetSelection,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if images == 0 || images > labels.len() {
        return Err(Error::Config(format!(
            "requested {images} images from a dataset of {}",
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(Error::Config("targeted attacks need at least two classes".into()));
    }
    let mut cells = Vec::new();
    for (i, &label) in labels[..images].iter().enumerate() {
        match selection {
            TargetSelection::AllOthers => {
                cells.extend((0..classes).filter(|&t| t != label).map(|t| (i, t)));
            }
            TargetSelection::RandomOne => {
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, i as u64));
                let k = rng.random_range(0..classes - 1);
                cells.push((i, if k >= label { k + 1 } else { k }));
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackSpec {
    Epsilon(EpsAttackConfig),
    Region(RegionAttackConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Epsilon(_) => "epsilon",
            AttackSpec::Region(_) => "region",
        }
    }

    pub fn epsilon_8bit(&self) -> f64 {
        match self {
            AttackSpec::Epsilon(c) => c.epsilon_8bit,
            AttackSpec::Region(c) => c.epsilon_8bit,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            AttackSpec::Epsilon(_) => 0.0,
            AttackSpec::Region(c) => c.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Epsilon(c) => c.validate(),
            AttackSpec::Region(c) => c.validate(),
        }
    }
}

/// Attacks every cell on `net`. Region attacks on cell `k` draw noise from
/// `cell_seed(seed, k)`, so results do not depend on `workers`.
pub fn attack_batch(
    net: &Network,
    attack: &AttackSpec,
    images: &[Tensor],
    cells: &[(usize, usize)],
    seed: u64,
    workers: usize,
) -> Result<Vec<AttackResult>> {
    attack.validate()?;
    let oracle = NetworkOracle::new(net);
    run_cells(cells.len(), workers, |k| {
        let (i, t) = cells[k];
        match attack {
            AttackSpec::Epsilon(cfg) => epsilon_attack(net, &images[i], t, cfg),
            AttackSpec::Region(cfg) => {
                let cfg = RegionAttackConfig {
                    seed: cell_seed(seed, k as u64),
                    ..cfg.clone()
                };
                region_attack(&oracle, &images[i], t, &cfg)
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Epsilon,
    Temperature,
    Sigma,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "temperature" => Ok(SweepAxis::Temperature),
            "sigma" => Ok(SweepAxis::Sigma),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    /// Model attacked on the epsilon and sigma axes.
    pub model_temperature: f64,
    pub attack: AttackSpec,
    pub images: usize,
    pub targets: TargetSelection,
    pub seed: u64,
}

pub struct SweepOutcome {
    pub report: ExperimentReport,
    /// Raw results per grid point.
    pub results: Vec<Vec<AttackResult>>,
}

/// One report row per grid point, attacking the same cells at each point.
pub fn sweep(
    spec: &SweepSpec,
    models: &ModelSet<'_>,
    data: &LabeledDataset,
    workers: usize,
    with_timing: bool,
) -> Result<SweepOutcome> {
    if spec.grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if spec.axis == SweepAxis::Sigma && matches!(spec.attack, AttackSpec::Epsilon(_)) {
        return Err(Error::Config("a sigma sweep needs the region attack".into()));
    }
    let cells = attack_cells(data.labels(), data.classes(), spec.images, spec.targets, spec.seed)?;
    let mut report = ExperimentReport::default();
    let mut results = Vec::new();
    for &value in &spec.grid {
        let mut attack = spec.attack.clone();
        let mut temperature = spec.model_temperature;
        match (spec.axis, &mut attack) {
            (SweepAxis::Epsilon, AttackSpec::Epsilon(c)) => c.epsilon_8bit = value,
            (SweepAxis::Epsilon, AttackSpec::Region(c)) => c.epsilon_8bit = value,
            (SweepAxis::Sigma, AttackSpec::Region(c)) => c.sigma = value,
            (SweepAxis::Temperature, _) => temperature = value,
            (SweepAxis::Sigma, AttackSpec::Epsilon(_)) => unreachable!(),
        }
        let net = models.get(temperature)?;
        let batch = attack_batch(net, &attack, data.images(), &cells, spec.seed, workers)?;
        let label = RowLabel {
            model_id: format!("T={temperature}"),
            temperature,
            attack: attack.name().into(),
            epsilon_8bit: attack.epsilon_8bit(),
            sigma: attack.sigma(),
            seed: spec.seed,
        };
        report.rows.push(ReportRow::summarize(label, &batch, with_timing)?);
        results.push(batch);
    }
    Ok(SweepOutcome { report, results })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Mnist {
        dir: PathBuf,
        split: String,
        limit: Option<usize>,
    },
    Cifar {
        batches: Vec<PathBuf>,
        limit: Option<usize>,
    },
    Synth {
        classes: usize,
        per_class: usize,
        dims: Vec<usize>,
        separation: f64,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Mnist { dir, split, limit } => {
                let d = idx::load_mnist(dir, split)?;
                Ok(limit.map_or(d.clone(), |n| d.take(n)))
            }
            DatasetSource::Cifar { batches, limit } => {
                let paths: Vec<&Path> = batches.iter().map(PathBuf::as_path).collect();
                let d = cifar::load_batches(&paths)?;
                Ok(limit.map_or(d.clone(), |n| d.take(n)))
            }
            DatasetSource::Synth {
                classes,
                per_class,
                dims,
                separation,
                seed,
            } => synth::synth_blobs(*classes, *per_class, dims, *separation, *seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub temperature: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Sweep(SweepSpec),
    Bypass {
        plan: BypassPlan,
        images: usize,
        targets: TargetSelection,
        seed: u64,
    },
}

/// Everything needed to reproduce one attack experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub models: Vec<ModelRef>,
    pub task: Task,
    pub workers: usize,
    /// Single worker and no wall-clock columns, so output is byte-stable.
    pub reproducible: bool,
    /// CSV output path.
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub enum ExperimentOutput {
    Report(ExperimentReport),
    Transfer(TransferMatrix),
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> Result<String> {
        match self {
            ExperimentOutput::Report(r) => r.to_csv(),
            ExperimentOutput::Transfer(m) => m.to_csv(),
        }
    }

    pub fn render_table(&self) -> String {
        match self {
            ExperimentOutput::Report(r) => r.render_table(),
            ExperimentOutput::Transfer(m) => m.render_table(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for m in &self.models {
            if !m.path.is_file() {
                return Err(Error::Config(format!("model file {} not found", m.path.display())));
            }
        }
        match &self.task {
            Task::Sweep(s) if s.grid.is_empty() => Err(Error::Config("sweep grid is empty".into())),
            Task::Bypass { plan, .. }
                if plan.source_temperatures.is_empty() || plan.target_temperatures.is_empty() =>
            {
                Err(Error::Config("bypass needs source and target temperatures".into()))
            }
            _ => Ok(()),
        }
    }

    /// Loads data and models, runs the task and writes the CSV to `output`.
    pub fn run(&self) -> Result<ExperimentOutput> {
        self.validate()?;
        let data = self.dataset.load()?;
        let models = self
            .models
            .iter()
            .map(|m| Ok((m.temperature, model_file::load(&m.path)?)))
            .collect::<Result<Vec<_>>>()?;
        let set = ModelSet::new(&models)?;
        let workers = if self.reproducible { 1 } else { self.workers.max(1) };
        let out = match &self.task {
            Task::Sweep(spec) => ExperimentOutput::Report(sweep(spec, &set, &data, workers, !self.reproducible)?.report),
            Task::Bypass {
                plan,
                images,
                targets,
                seed,
            } => {
                let cells = attack_cells(data.labels(), data.classes(), *images, *targets, *seed)?;
                let imgs: Vec<Tensor> = cells.iter().map(|&(i, _)| data.images()[i].clone()).collect();
                let tgts: Vec<usize> = cells.iter().map(|&(_, t)| t).collect();
                let plan = BypassPlan {
                    attack: RegionAttackConfig {
                        seed: *seed,
                        ..plan.attack.clone()
                    },
                    ..plan.clone()
                };
                ExperimentOutput::Transfer(bypass_run(&plan, &set, &imgs, &tgts, workers)?.matrix)
            }
        };
        if let Some(dir) = self.output.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&self.output, out.to_csv()?).map_err(|e| Error::io(&self.output, e))?;
        Ok(out)
    }
}

/// Written beside every output: the command, its full configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, outputs: Vec<PathBuf>) -> Result<Self> {
        Ok(Manifest {
            command: command.into(),
            code_version: CODE_VERSION.into(),
            seed,
            config: serde_json::to_value(config)?,
            outputs,
        })
    }

    /// `<output>.manifest.json`
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Returns the network stored under `dir` for `(name, key)`, building and
/// saving it first if absent. The file name carries a CRC-32 of `key`'s JSON.
pub fn cached_model(
    dir: &Path,
    name: &str,
    key: &impl Serialize,
    build: impl FnOnce() -> Result<Network>,
) -> Result<Network> {
    let digest = crc32fast::hash(serde_json::to_string(key)?.as_bytes());
    let path = dir.join(format!("{name}-{digest:08x}.advl"));
    if path.is_file() {
        return model_file::load(&path);
    }
    let net = build()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    model_file::save(&net, &tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(net)
}

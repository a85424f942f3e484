use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advl::blackbox::{BypassPlan, GradientMode, RegionAttackConfig};
use advl::experiment::{
    AttackSpec, DatasetSource, ExperimentConfig, Manifest, ModelRef, SweepAxis, SweepSpec, Task, TargetSelection,
};
use advl::io::model_file;
use advl::metrics::{ExperimentReport, TransferMatrix};
use advl::optim::AdamParams;
use advl::train::{self, OptimizerConfig, Targets, TrainConfig};
use advl::whitebox::EpsAttackConfig;
use advl::{Error, Network, Profile, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "advl", version, about = "Train, distill and attack small image classifiers")]
struct Cli {
    /// Seed for initialization, shuffling, target choice and attack noise.
    #[arg(long, env = "ADVL_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// Attack worker threads.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
    /// Single worker, no wall-clock columns: outputs are byte-for-byte repeatable.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on hard labels.
    Train(TrainArgs),
    /// Two-phase defensive distillation at temperature T.
    Distill {
        #[arg(long = "T", value_name = "T")]
        temperature: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Targeted ε-neighborhood attack.
    AttackEps {
        #[command(flatten)]
        target: AttackTarget,
        #[command(flatten)]
        eps: EpsArgs,
    },
    /// Targeted region-based attack through output probabilities only.
    AttackRegion {
        #[command(flatten)]
        target: AttackTarget,
        #[command(flatten)]
        eps: EpsArgs,
        #[command(flatten)]
        region: RegionArgs,
    },
    /// Craft on the source-temperature model, evaluate on each target model.
    Bypass {
        #[command(flatten)]
        data: DataArgs,
        /// Model as `T=PATH`; repeat for every temperature involved.
        #[arg(long = "model", required = true, value_parser = parse_model_ref)]
        models: Vec<ModelRef>,
        #[arg(long = "source-T", value_delimiter = ',', required = true)]
        source: Vec<f64>,
        #[arg(long = "target-Ts", value_delimiter = ',', required = true)]
        target_ts: Vec<f64>,
        #[command(flatten)]
        cells: CellArgs,
        #[command(flatten)]
        eps: EpsArgs,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// One report row per grid point.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "model", required = true, value_parser = parse_model_ref)]
        models: Vec<ModelRef>,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Model attacked on the epsilon and sigma axes.
        #[arg(long = "model-T", default_value_t = 1.0)]
        model_temperature: f64,
        #[arg(long, value_enum, default_value_t = AttackKind::Eps)]
        attack: AttackKind,
        #[command(flatten)]
        cells: CellArgs,
        #[command(flatten)]
        eps: EpsArgs,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved CSV report as a text table.
    Report { csv: PathBuf },
    /// Repeat the experiment recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Write the CSV here instead of the recorded path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DataArgs {
    /// Directory holding MNIST IDX files (optionally gzipped).
    #[arg(long, group = "dataset")]
    mnist: Option<PathBuf>,
    /// CIFAR-10 binary batch files.
    #[arg(long, num_args = 1.., group = "dataset")]
    cifar: Vec<PathBuf>,
    /// Synthetic blobs `CLASSES,PER_CLASS,SIDE,SEPARATION` of shape 1×SIDE×SIDE.
    #[arg(long, group = "dataset")]
    synth: Option<String>,
    /// MNIST split: `train` or `t10k`.
    #[arg(long)]
    split: Option<String>,
    /// Keep only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = ProfileArg::Mnist)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate factor applied after each epoch.
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Output model file (`train`) or directory (`distill`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct AttackTarget {
    #[command(flatten)]
    data: DataArgs,
    /// Model file, optionally labelled with its distillation temperature as `T=PATH`.
    #[arg(long, value_parser = parse_model_ref)]
    model: ModelRef,
    #[command(flatten)]
    cells: CellArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CellArgs {
    /// Attack the first N images of the dataset.
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, value_enum, default_value_t = TargetsArg::All)]
    targets: TargetsArg,
}

#[derive(Args, Clone)]
struct EpsArgs {
    #[arg(long, default_value_t = 52.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Adam step size.
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    /// Keep optimizing to the iteration cap instead of stopping at first success.
    #[arg(long)]
    no_abort_early: bool,
}

#[derive(Args, Clone)]
struct RegionArgs {
    #[arg(long, default_value_t = 0.4)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-12)]
    delta_f: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Analytic)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    #[arg(long, default_value_t = 128)]
    fd_coords: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
enum ProfileArg {
    Mnist,
    Cifar,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
enum OptimizerArg {
    Adam,
    Momentum,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetsArg {
    All,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Analytic,
    Fd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Epsilon,
    Temperature,
    Sigma,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AttackKind {
    Eps,
    Region,
}

fn parse_model_ref(s: &str) -> std::result::Result<ModelRef, String> {
    match s.split_once('=') {
        Some((t, path)) => {
            let temperature: f64 = t.parse().map_err(|_| format!("bad temperature {t:?}"))?;
            Ok(ModelRef {
                temperature,
                path: path.into(),
            })
        }
        None => Ok(ModelRef {
            temperature: 1.0,
            path: s.into(),
        }),
    }
}

impl DataArgs {
    fn source(&self, seed: u64, default_split: &str) -> Result<DatasetSource> {
        if let Some(dir) = &self.mnist {
            return Ok(DatasetSource::Mnist {
                dir: dir.clone(),
                split: self.split.clone().unwrap_or_else(|| default_split.into()),
                limit: self.limit,
            });
        }
        if !self.cifar.is_empty() {
            return Ok(DatasetSource::Cifar {
                batches: self.cifar.clone(),
                limit: self.limit,
            });
        }
        let Some(spec) = &self.synth else {
            return Err(Error::Config("one of --mnist, --cifar or --synth is required".into()));
        };
        let parts: Vec<&str> = spec.split(',').collect();
        let bad = || Error::Config(format!("--synth expects CLASSES,PER_CLASS,SIDE,SEPARATION, got {spec:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let side = int(parts[2])?;
        Ok(DatasetSource::Synth {
            classes: int(parts[0])?,
            per_class: int(parts[1])?,
            dims: vec![1, side, side],
            separation: parts[3].trim().parse().map_err(|_| bad())?,
            seed,
        })
    }
}

impl CellArgs {
    fn selection(&self) -> TargetSelection {
        match self.targets {
            TargetsArg::All => TargetSelection::AllOthers,
            TargetsArg::Random => TargetSelection::RandomOne,
        }
    }
}

impl EpsArgs {
    fn config(&self) -> EpsAttackConfig {
        EpsAttackConfig {
            epsilon_8bit: self.epsilon,
            kappa: self.kappa,
            max_iters: self.max_iters,
            adam: AdamParams {
                step_size: self.step_size,
                ..AdamParams::default()
            },
            abort_early: !self.no_abort_early,
        }
    }
}

impl RegionArgs {
    fn config(&self, eps: &EpsArgs, seed: u64) -> RegionAttackConfig {
        RegionAttackConfig {
            sigma: self.sigma,
            delta_f: self.delta_f,
            max_iters: eps.max_iters,
            kappa: eps.kappa,
            epsilon_8bit: eps.epsilon,
            adam: AdamParams {
                step_size: eps.step_size,
                ..AdamParams::default()
            },
            gradient_mode: match self.mode {
                ModeArg::Analytic => GradientMode::AnalyticOutputOnly,
                ModeArg::Fd => GradientMode::FiniteDifference,
            },
            fd_step: self.fd_step,
            fd_coords: self.fd_coords,
            seed,
        }
    }
}

/// Recorded in train/distill manifests.
#[derive(Serialize)]
struct TrainJob<'a> {
    dataset: DatasetSource,
    profile: ProfileArg,
    config: &'a TrainConfig,
}

impl TrainArgs {
    fn config(&self, seed: u64, temperature: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            lr_decay: self.lr_decay,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerConfig::adam(),
                OptimizerArg::Momentum => OptimizerConfig::Momentum { momentum: 0.9 },
            },
            seed,
            temperature,
        }
    }

    fn profile(&self) -> Profile {
        match self.profile {
            ProfileArg::Mnist => Profile::Mnist,
            ProfileArg::Cifar => Profile::Cifar,
            ProfileArg::Tiny => Profile::Tiny,
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.into(),
            source,
        }),
        None => Ok(()),
    }
}

fn run_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let source = args.data.source(seed, "train")?;
    let data = source.load()?;
    let cfg = args.config(seed, 1.0);
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::Config("training set is empty".into()))?
        .to_vec();
    let mut net = Network::init(&shape, &args.profile().layers(data.classes()), 1.0, seed)?;
    let report = train::train(&mut net, &data, Targets::Hard, &cfg)?;
    create_parent(&args.out)?;
    model_file::save(&net, &args.out)?;
    let job = TrainJob {
        dataset: source,
        profile: args.profile,
        config: &cfg,
    };
    Manifest::new("train", seed, &job, vec![args.out.clone()])?.save(&Manifest::path_for(&args.out))?;
    println!(
        "trained {} epochs, final loss {:.4}, train accuracy {:.4} -> {}",
        cfg.epochs,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        train::accuracy(&net, &data)?,
        args.out.display()
    );
    Ok(())
}

fn run_distill(args: &TrainArgs, temperature: f64, seed: u64) -> Result<()> {
    let source = args.data.source(seed, "train")?;
    let data = source.load()?;
    let cfg = args.config(seed, temperature);
    let d = train::distill(&data, &args.profile().layers(data.classes()), &cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    let teacher = args.out.join(format!("teacher-T{temperature}.advl"));
    let student = args.out.join(format!("student-T{temperature}.advl"));
    model_file::save(&d.teacher, &teacher)?;
    model_file::save(&d.student, &student)?;
    let job = TrainJob {
        dataset: source,
        profile: args.profile,
        config: &cfg,
    };
    Manifest::new("distill", seed, &job, vec![teacher.clone(), student.clone()])?
        .save(&Manifest::path_for(&student))?;
    println!(
        "teacher train accuracy {:.4}, student {:.4}, soft-label entropy {:.4} -> {}",
        train::accuracy(&d.teacher, &data)?,
        train::accuracy(&d.student, &data)?,
        d.soft_labels.mean_entropy(),
        args.out.display()
    );
    Ok(())
}

fn run_experiment(command: &str, cfg: ExperimentConfig, seed: u64) -> Result<()> {
    create_parent(&cfg.output)?;
    let out = cfg.run()?;
    Manifest::new(command, seed, &cfg, vec![cfg.output.clone()])?.save(&Manifest::path_for(&cfg.output))?;
    print!("{}", out.render_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let experiment = |dataset, models, task, output| ExperimentConfig {
        dataset,
        models,
        task,
        workers: cli.workers,
        reproducible: cli.reproducible,
        output,
    };
    match cli.command {
        Command::Train(args) => run_train(&args, seed),
        Command::Distill { temperature, train } => run_distill(&train, temperature, seed),
        Command::AttackEps { target, eps } => {
            let task = Task::Sweep(SweepSpec {
                axis: SweepAxis::Epsilon,
                grid: vec![eps.epsilon],
                model_temperature: target.model.temperature,
                attack: AttackSpec::Epsilon(eps.config()),
                images: target.cells.images,
                targets: target.cells.selection(),
                seed,
            });
            let data = target.data.source(seed, "t10k")?;
            run_experiment("attack-eps", experiment(data, vec![target.model], task, target.out), seed)
        }
        Command::AttackRegion { target, eps, region } => {
            let task = Task::Sweep(SweepSpec {
                axis: SweepAxis::Sigma,
                grid: vec![region.sigma],
                model_temperature: target.model.temperature,
                attack: AttackSpec::Region(region.config(&eps, seed)),
                images: target.cells.images,
                targets: target.cells.selection(),
                seed,
            });
            let data = target.data.source(seed, "t10k")?;
            run_experiment("attack-region", experiment(data, vec![target.model], task, target.out), seed)
        }
        Command::Bypass {
            data,
            models,
            source,
            target_ts,
            cells,
            eps,
            region,
            out,
        } => {
            let task = Task::Bypass {
                plan: BypassPlan {
                    source_temperatures: source,
                    target_temperatures: target_ts,
                    attack: region.config(&eps, seed),
                },
                images: cells.images,
                targets: cells.selection(),
                seed,
            };
            let data = data.source(seed, "t10k")?;
            run_experiment("bypass", experiment(data, models, task, out), seed)
        }
        Command::Sweep {
            data,
            models,
            axis,
            grid,
            model_temperature,
            attack,
            cells,
            eps,
            region,
            out,
        } => {
            let attack = match attack {
                AttackKind::Eps => AttackSpec::Epsilon(eps.config()),
                AttackKind::Region => AttackSpec::Region(region.config(&eps, seed)),
            };
            let task = Task::Sweep(SweepSpec {
                axis: match axis {
                    AxisArg::Epsilon => SweepAxis::Epsilon,
                    AxisArg::Temperature => SweepAxis::Temperature,
                    AxisArg::Sigma => SweepAxis::Sigma,
                },
                grid,
                model_temperature,
                attack,
                images: cells.images,
                targets: cells.selection(),
                seed,
            });
            let data = data.source(seed, "t10k")?;
            run_experiment("sweep", experiment(data, models, task, out), seed)
        }
        Command::Report { csv } => {
            let text = std::fs::read_to_string(&csv).map_err(|source| Error::Io {
                path: csv.clone(),
                source,
            })?;
            let header = text.lines().next().unwrap_or_default();
            if header.starts_with("source_temperature") {
                print!("{}", TransferMatrix::from_csv(&text)?.render_table());
            } else {
                print!("{}", ExperimentReport::from_csv(&text)?.render_table());
            }
            Ok(())
        }
        Command::Rerun { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let mut cfg: ExperimentConfig = serde_json::from_value(m.config).map_err(|e| {
                Error::Config(format!("{}: not an attack experiment manifest ({e})", manifest.display()))
            })?;
            if let Some(out) = out {
                cfg.output = out;
            }
            run_experiment(&m.command, cfg, m.seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }
}

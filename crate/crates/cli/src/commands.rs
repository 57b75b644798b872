//! Argument definitions and command dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use pointconv::pointconv::ImageFormat;

use crate::config::{ExperimentConfig, Preset};
use crate::experiments::{self, format_metrics, AblationTable};
use crate::verify::{self, Dims, Precision, GRADCHECK_TOLERANCE};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "pointconv", version, about = "PointConv training, verification and benchmarks")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON experiment config replacing the task preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Pgm,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a checkpoint plus CSV log.
    Train {
        #[arg(long, default_value = "classify")]
        task: Preset,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory for model.pcnv and log.csv.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the task's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "classify")]
        task: Preset,
    },
    /// Finite-difference gradient checks of every differentiable component.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Check a single component only.
        #[arg(long)]
        component: Option<String>,
    },
    /// Compare the naive and reordered PointConv routes.
    Equivalence {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value = "2,64,8,4,4,8")]
        dims: Dims,
        /// Run in 64-bit with the tighter bound.
        #[arg(long)]
        f64: bool,
    },
    /// Filter-memory arithmetic and measured transient buffers.
    BenchMemory {
        #[arg(long, default_value = "32,512,32,64,32,64")]
        dims: Dims,
        #[arg(long, default_value = "2,64,32,64,32,64")]
        desk: Dims,
    },
    /// Train segmentation with MLP, disabled and raw density scaling.
    AblateDensity {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Classification accuracy across WeightNet widths.
    SweepCmid {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
        values: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render learned weight functions of one PointConv layer.
    VizFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "enc0")]
        layer: String,
        #[arg(long, default_value = "filters")]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0.5)]
        extent: f64,
        #[arg(long, value_enum, default_value = "pgm")]
        format: FormatArg,
    },
    /// Write a synthetic dataset as .pcb files with JSON manifests.
    GenData {
        #[arg(long, default_value = "classify")]
        task: Preset,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Convert a PGM/PPM image into a 2-D point cloud file.
    Img2cloud {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PointConv on a regular grid against a sliding-window convolution.
    GridEquiv {
        #[arg(long, default_value_t = 8)]
        side: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Grid origin `x,y`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.0])]
        origin: Vec<f64>,
    },
}

/// Reduced segmentation setup used by `ablate-density` unless a config is
/// given: three full trainings must fit a desk budget.
pub fn ablation_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Segment);
    cfg.data.n_train = 96;
    cfg.data.n_test = 24;
    cfg.data.n_points = 512;
    cfg.train.epochs = 10;
    cfg
}

/// Reduced classification setup used by `sweep-cmid` unless a config is
/// given.
pub fn sweep_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Classify);
    cfg.data.n_train = 200;
    cfg.train.epochs = 5;
    cfg
}

fn experiment(cli: &Cli, preset: ExperimentConfig, epochs: Option<usize>) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => preset,
    };
    let mut cfg = ExperimentConfig::resolve(base, &cli.sets, cli.seed)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    Ok(cfg)
}

fn verdict(ok: bool, what: String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Verification(what))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    match &cli.command {
        Command::Train { task, epochs, out } => {
            let cfg = experiment(&cli, ExperimentConfig::preset(*task), *epochs)?;
            let (_, report) = experiments::run_train(&cfg, Some(out))?;
            print!("{}", report.csv());
            if let Some(m) = &report.final_test {
                println!("final test: {}", format_metrics(m));
            }
            println!("checkpoint: {}", out.join("model.pcnv").display());
            Ok(())
        }
        Command::Eval { checkpoint, task } => {
            let cfg = experiment(&cli, ExperimentConfig::preset(*task), None)?;
            let m = experiments::run_eval(checkpoint, &cfg)?;
            println!("{}", format_metrics(&m));
            Ok(())
        }
        Command::Gradcheck { seeds, component } => {
            let entries = match component {
                Some(c) => seeds.iter().map(|&s| verify::gradcheck_component(c, s)).collect::<Result<Vec<_>, _>>()?,
                None => verify::gradcheck_suite(seeds)?,
            };
            let mut worst: f64 = 0.0;
            for e in &entries {
                let ok = e.max_rel_err < GRADCHECK_TOLERANCE;
                println!(
                    "{} {:<12} seed {} max_rel_err {:.3e} ({} entries, worst {})",
                    if ok { "PASS" } else { "FAIL" },
                    e.component,
                    e.seed,
                    e.max_rel_err,
                    e.checked,
                    e.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default()
                );
                worst = worst.max(e.max_rel_err);
            }
            verdict(worst < GRADCHECK_TOLERANCE, format!("gradient max_rel_err {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"))
        }
        Command::Equivalence { trials, dims, f64 } => {
            let precision = if *f64 { Precision::F64 } else { Precision::F32 };
            let r = verify::equivalence(*dims, *trials, precision, cli.seed)?;
            println!("{r}");
            verdict(r.passed(), format!("max_rel_err {:.3e}", r.max_rel_err()))
        }
        Command::BenchMemory { dims, desk } => {
            let r = verify::bench_memory(*dims, *desk, cli.seed)?;
            println!("{r}");
            verdict(r.passed(), format!("dominant ratio {} vs {}", r.measured_ratio, r.expected_ratio))
        }
        Command::AblateDensity { epochs } => {
            let cfg = experiment(&cli, ablation_preset(), *epochs)?;
            let rows = experiments::ablate_density(&cfg)?;
            println!("{}", AblationTable(&rows));
            Ok(())
        }
        Command::SweepCmid { values, trials, epochs } => {
            if values.is_empty() || *trials == 0 || values.contains(&0) {
                return Err(CliError::Usage("sweep-cmid needs positive values and trials".into()));
            }
            let cfg = experiment(&cli, sweep_preset(), *epochs)?;
            println!("c_mid  mean_acc  sd");
            for row in experiments::sweep_cmid(&cfg, values, *trials)? {
                println!("{:<6} {:.4}    {:.4}", row.c_mid, row.mean(), row.sd());
            }
            Ok(())
        }
        Command::VizFilters { checkpoint, layer, out, side, extent, format } => {
            let format = match format {
                FormatArg::Pgm => ImageFormat::Pgm,
                FormatArg::Csv => ImageFormat::Csv,
            };
            let paths = experiments::viz_filters(checkpoint, layer, out, *side, *extent, format)?;
            println!("wrote {} images ({side}x{side}) to {}", paths.len(), out.display());
            Ok(())
        }
        Command::GenData { task, out } => {
            let cfg = experiment(&cli, ExperimentConfig::preset(*task), None)?;
            let (train, test) = experiments::gen_data(&cfg, out)?;
            println!("{}\n{}", train.display(), test.display());
            Ok(())
        }
        Command::Img2cloud { input, output } => {
            let c = experiments::img2cloud(input, output)?;
            println!("{} points, {} channels -> {}", c.len(), c.channels, output.display());
            Ok(())
        }
        Command::GridEquiv { side, kernel, trials, origin } => {
            let origin = match origin[..] {
                [x, y] => [x, y],
                _ => return Err(CliError::Usage("--origin takes x,y".into())),
            };
            let mut ok = true;
            for t in 0..(*trials).max(1) {
                let r = verify::grid_equiv(*side, *kernel, cli.seed + t as u64, origin)?;
                println!("{r}");
                ok &= r.passed();
            }
            verdict(ok, "grid output deviates from the sliding-window oracle".into())
        }
    }
}

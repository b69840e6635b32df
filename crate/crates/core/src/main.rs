use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetnet::assembly::{Network, NetworkConfig, Variant};
use hetnet::datapipe::{self, Split, SyntheticConfig};
use hetnet::efficiency::{BenchConfig, EfficiencyReport};
use hetnet::metrics::{FBetaMode, MetricConfig, MetricReport, Threshold};
use hetnet::mic::RotationStrategy;
use hetnet::run::{self, AblationGrid, GridName, Preset, RunConfig};
use hetnet::{Error, Result};

#[derive(Parser)]
#[command(name = "hetnet", version, about = "Mirror detection: train, evaluate, predict, profile")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a run directory
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Write probability maps and binary masks for images
    Predict(PredictArgs),
    /// Report parameters, multiply-accumulates and throughput
    Bench(BenchArgs),
    /// Train and score every row of an ablation grid
    Ablate(AblateArgs),
    /// Generate a synthetic mirror dataset on disk
    SynthData(SynthArgs),
    /// Normalize a published dataset split into the standard layout
    Ingest(IngestArgs),
    /// Print the layer table of a network
    Describe(DescribeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration layered over the preset
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Override a config key, e.g. `--set optimizer.max_lr=0.02`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root in the standard layout
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        // flags may supply the dataset, so validation waits until they are applied
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load_unchecked(p, self.preset)?,
            None => RunConfig::preset(self.preset),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.max_lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data_root {
            cfg.data.root = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        for o in &self.overrides {
            cfg.set_unchecked(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint; its network must match the config
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct MetricArgs {
    /// Binarization threshold, or `adaptive`
    #[arg(long, default_value = "0.5")]
    threshold: String,
    /// Report the best F-beta over thresholds instead of the fixed one
    #[arg(long)]
    max_f_beta: bool,
}

impl MetricArgs {
    fn config(&self) -> Result<MetricConfig> {
        let threshold = if self.threshold == "adaptive" {
            Threshold::Adaptive
        } else {
            let t: f64 = self
                .threshold
                .parse()
                .map_err(|_| Error::config(format!("threshold {:?} is neither a number nor `adaptive`", self.threshold)))?;
            if !(0.0..1.0).contains(&t) || t == 0.0 {
                return Err(Error::config("threshold must lie in (0, 1)"));
            }
            Threshold::Fixed(t)
        };
        Ok(MetricConfig {
            threshold,
            f_beta_mode: if self.max_f_beta {
                FBetaMode::MaxOverThresholds
            } else {
                FBetaMode::Single
            },
            ..MetricConfig::default()
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Side images are resized to before the forward pass
    #[arg(long, default_value_t = 352)]
    size: usize,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Also write the report as CSV here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 352)]
    size: usize,
}

#[derive(Args)]
struct NetworkArgs {
    /// Read the network from a checkpoint instead of a preset
    #[arg(long, conflicts_with_all = ["preset", "variant"])]
    checkpoint: Option<PathBuf>,
    /// `full` or `tiny`
    #[arg(long, default_value = "full")]
    preset: String,
    /// hetnet, a_ba, a_a, a_b, i, ii, iii, iv, v, or rot-<single|dual_same|tri|quad|mic>
    #[arg(long)]
    variant: Option<String>,
}

impl NetworkArgs {
    fn config(&self) -> Result<NetworkConfig> {
        if let Some(p) = &self.checkpoint {
            return run::checkpoint_config(p);
        }
        let base = match self.preset.as_str() {
            "full" => NetworkConfig::full(),
            "tiny" => NetworkConfig::tiny(),
            other => return Err(Error::config(format!("unknown network preset {other:?}"))),
        };
        Ok(match &self.variant {
            Some(v) => base.variant(parse_variant(v)?),
            None => base,
        })
    }

    fn build(&self, weights: bool) -> Result<Network> {
        match (&self.checkpoint, weights) {
            (Some(p), true) => run::load_network(p),
            (_, true) => Network::new(&self.config()?, 0, candle_core::DType::F32),
            (_, false) => Network::shape_only(&self.config()?),
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    let lower = s.to_ascii_lowercase();
    Ok(match lower.as_str() {
        "hetnet" => Variant::HetNet,
        "a_ba" => Variant::ArchBa,
        "a_a" => Variant::ArchA,
        "a_b" => Variant::ArchB,
        "i" => Variant::AblationI,
        "ii" => Variant::AblationII,
        "iii" => Variant::AblationIII,
        "iv" => Variant::AblationIV,
        "v" => Variant::AblationV,
        other => match other.strip_prefix("rot-") {
            Some(r) => Variant::Rotation(match r {
                "single" => RotationStrategy::Single,
                "dual_same" => RotationStrategy::DualSame,
                "tri" => RotationStrategy::Tri,
                "quad" => RotationStrategy::Quad,
                "mic" => RotationStrategy::Mic,
                _ => return Err(Error::config(format!("unknown rotation strategy {r:?}"))),
            }),
            None => return Err(Error::config(format!("unknown variant {s:?}"))),
        },
    })
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long, default_value_t = 352)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Only count parameters and multiply-accumulates
    #[arg(long)]
    no_timing: bool,
    /// Print a CSV row instead of the table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    grid: GridName,
    #[command(flatten)]
    config: ConfigArgs,
    /// Timed forwards per row for the FPS column (0 skips timing)
    #[arg(long, default_value_t = 20)]
    bench_iters: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    decoys: usize,
}

#[derive(Args)]
struct IngestArgs {
    /// Split directory of the published archive (holding image and mask folders)
    #[arg(long)]
    src: PathBuf,
    /// Destination dataset root
    #[arg(long)]
    dst: PathBuf,
    #[arg(long, value_enum)]
    split: Split,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long, default_value_t = 352)]
    size: usize,
    /// Include the auxiliary and edge heads used only in training
    #[arg(long)]
    training_heads: bool,
}

fn print_report(r: &MetricReport) {
    println!("{r}");
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            let s = run::train(&cfg, a.resume.as_deref())?;
            println!("run directory: {}", s.run_dir.display());
            println!("final checkpoint: {}", s.final_checkpoint.display());
            print_report(&s.final_report);
        }
        Command::Eval(a) => {
            let r = run::evaluate(&a.checkpoint, &a.data_root, a.split, a.size, &a.metrics.config()?)?;
            print_report(&r);
            if let Some(p) = a.report {
                std::fs::write(&p, format!("{}\n{}\n", MetricReport::CSV_HEADER, r.csv_row()))?;
            }
        }
        Command::Predict(a) => {
            let n = run::predict(&a.checkpoint, &a.input, &a.output, a.size)?;
            println!("wrote predictions for {n} image(s) to {}", a.output.display());
        }
        Command::Bench(a) => {
            let net = a.network.build(!a.no_timing)?;
            let bench = BenchConfig {
                warmup_iters: a.warmup,
                timed_iters: a.iters,
            };
            let r = EfficiencyReport::measure(&net, (a.size, a.size), (!a.no_timing).then_some(&bench))?;
            if a.csv {
                println!("{}\n{}", EfficiencyReport::CSV_HEADER, r.csv_row());
            } else {
                println!("{r}");
            }
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            let grid = AblationGrid::new(a.grid, &cfg.network);
            let bench = BenchConfig {
                warmup_iters: a.bench_iters.min(5),
                timed_iters: a.bench_iters,
            };
            let rows = run::ablate(&grid, &cfg, (a.bench_iters > 0).then_some(&bench))?;
            print!("{}", run::render_ablation(&rows));
        }
        Command::SynthData(a) => {
            for (split, n, seed) in [
                (Split::Train, a.n_train, a.seed),
                (Split::Test, a.n_test, run::held_out_seed(a.seed)),
            ] {
                if n == 0 {
                    continue;
                }
                let records = datapipe::generate_with(&SyntheticConfig {
                    decoys: a.decoys,
                    ..SyntheticConfig::new(n, a.size, seed)
                })?;
                datapipe::write_dataset(&records, &a.output, split)?;
            }
            println!("wrote {} + {} scenes under {}", a.n_train, a.n_test, a.output.display());
        }
        Command::Ingest(a) => {
            let n = datapipe::ingest(&a.src, &a.dst, a.split)?;
            println!("ingested {n} pairs into {}", a.dst.join(a.split.dir_name()).display());
        }
        Command::Describe(a) => {
            let net = a.network.build(false)?;
            let t = if a.training_heads {
                net.describe_training((a.size, a.size))?
            } else {
                net.describe((a.size, a.size))?
            };
            print!("{}", t.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

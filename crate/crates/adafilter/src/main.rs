use std::path::PathBuf;
use std::process::ExitCode;

use adafilter::config::{desk_shift, ExperimentConfig};
use adafilter::dataset::{generate_pair, PairDir};
use adafilter::run::{compare, ensure_pretrained, export_curves, export_policy_histogram, pretrained_dir, run_experiment, CURVES_FILE, HISTOGRAM_FILE};
use adafilter_core::gated::BnMode;
use adafilter_core::synth::SynthConfig;
use adafilter_core::train::StrategySpec;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Adaptive per-example filter fine-tuning on desk-scale transfer tasks.
#[derive(Parser)]
#[command(name = "adafilter", version)]
struct Cli {
    /// Worker threads for convolution kernels.
    #[arg(long, env = "ADAFILTER_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or verify a synthetic source/target task pair.
    #[command(subcommand)]
    Data(DataCommand),
    /// Write a desk-scale experiment config to start from.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Directory the task pair is (or will be) stored in.
        #[arg(long, default_value = "data/pair")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        overlap: f64,
        #[arg(long, default_value = "runs/run")]
        run_dir: PathBuf,
    },
    /// Train the source model of a config (cached next to the task pair).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `pretrain_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on the target task with one strategy.
    Finetune(RunArgs),
    /// Fine-tune with several strategies in turn and write their curves.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "standard_finetune,adafilter")]
        strategies: Vec<String>,
    },
    /// Reports computed from finished runs.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a task pair directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator settings; the flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overlap: Option<f64>,
        /// Hue rotation of target images in degrees.
        #[arg(long)]
        hue: Option<f64>,
        /// Warp amplitude of target images in pixels.
        #[arg(long)]
        warp: Option<f64>,
    },
    /// Check checksums and that regeneration reproduces the stored bytes.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Per-layer fine-tune fractions of a gated run, from its policy dump.
    Policies {
        #[arg(long)]
        run: PathBuf,
    },
    /// Per-epoch evaluation accuracy of several runs in one CSV.
    Curves {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BnModeArg {
    Gated,
    Standard,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Fine-tuning seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (compare: parent of one directory per strategy).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, value_enum)]
    bn_mode: Option<BnModeArg>,
    /// Write every evaluation policy bit of the final epoch.
    #[arg(long)]
    dump_policies: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = StrategySpec::from_name(s)?;
        }
        if let Some(m) = self.bn_mode {
            cfg.bn_mode = match m {
                BnModeArg::Gated => BnMode::Gated,
                BnModeArg::Standard => BnMode::Standard,
            };
        }
        cfg.dump_policies |= self.dump_policies;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Data(DataCommand::Gen {
            out,
            config,
            seed,
            overlap,
            hue,
            warp,
        }) => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SynthConfig::desk(0, desk_shift(0.6)),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = overlap {
                cfg.shift.overlap = o;
            }
            if let Some(h) = hue {
                cfg.shift.hue_degrees = h;
            }
            if let Some(w) = warp {
                cfg.shift.warp_pixels = w;
            }
            let pair = generate_pair(&cfg, &out)?;
            println!(
                "wrote {} ({} target classes, {} shared with the source)",
                out.display(),
                pair.target_generators.len(),
                cfg.shared_classes()
            );
        }
        Command::Data(DataCommand::Verify { dir }) => {
            PairDir::open(&dir)?.verify()?;
            println!("{}: ok", dir.display());
        }
        Command::InitConfig {
            out,
            data_dir,
            overlap,
            run_dir,
        } => {
            let cfg = ExperimentConfig::desk(data_dir, 0, desk_shift(overlap), StrategySpec::Adafilter, run_dir);
            cfg.validate()?;
            cfg.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Pretrain { config, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.pretrain_seed = s;
            }
            let pair = PairDir::open_or_generate(&cfg.data.dir, &cfg.data.synth)?;
            ensure_pretrained(&cfg, &pair)?;
            println!("{}", pretrained_dir(&cfg).display());
        }
        Command::Finetune(args) => {
            let cfg = args.resolve()?;
            let summary = run_experiment(&cfg)?;
            match summary.history.last() {
                Some(last) => println!(
                    "{}: {} epochs, final eval accuracy {:.4}",
                    summary.dir.display(),
                    last.epoch,
                    last.eval_accuracy
                ),
                None => println!("{}: 0 epochs", summary.dir.display()),
            }
        }
        Command::Compare { run, strategies } => {
            let cfg = run.resolve()?;
            let specs = strategies
                .iter()
                .map(|s| StrategySpec::from_name(s.trim()))
                .collect::<adafilter_core::Result<Vec<_>>>()?;
            let runs = compare(&cfg, &specs, &cfg.out)?;
            for r in &runs {
                let acc = r.history.last().map_or(f64::NAN, |h| h.eval_accuracy);
                println!("{:>18}  final eval accuracy {:.4}", r.strategy.name(), acc);
            }
            println!("wrote {}", cfg.out.join(CURVES_FILE).display());
        }
        Command::Report(ReportCommand::Policies { run }) => {
            let rows = export_policy_histogram(&run)?;
            for r in &rows {
                println!("layer {:>2}  {:.4}", r.layer_index, r.finetune_fraction);
            }
            println!("wrote {}", run.join(HISTOGRAM_FILE).display());
        }
        Command::Report(ReportCommand::Curves { runs, out }) => {
            if runs.is_empty() {
                bail!("no runs given");
            }
            let rows = export_curves(&runs, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxkernel::cli::{self, CliError, CliResult, EXIT_USAGE};
use ctxkernel::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "ctxkernel",
    version,
    about = "Context-aware deep kernel maps for image annotation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Per-key overrides of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long = "grid.rows")]
    grid_rows: Option<String>,
    #[arg(long = "grid.cols")]
    grid_cols: Option<String>,
    #[arg(long = "grid.radius")]
    grid_radius: Option<String>,
    #[arg(long = "grid.sectors")]
    grid_sectors: Option<String>,
    #[arg(long = "map.mode")]
    map_mode: Option<String>,
    #[arg(long = "map.hi_levels")]
    map_hi_levels: Option<String>,
    #[arg(long = "kernel.gamma")]
    kernel_gamma: Option<String>,
    #[arg(long = "kernel.depth")]
    kernel_depth: Option<String>,
    #[arg(long = "learn.svm_cost")]
    learn_svm_cost: Option<String>,
    /// Comma-separated per-concept costs.
    #[arg(long = "learn.svm_costs")]
    learn_svm_costs: Option<String>,
    #[arg(long = "learn.bias_feature")]
    learn_bias_feature: Option<String>,
    #[arg(long = "learn.eta")]
    learn_eta: Option<String>,
    #[arg(long = "learn.inner_steps")]
    learn_inner_steps: Option<String>,
    #[arg(long = "learn.max_outer")]
    learn_max_outer: Option<String>,
    #[arg(long = "learn.tol")]
    learn_tol: Option<String>,
    #[arg(long = "io.features")]
    io_features: Option<String>,
    #[arg(long = "io.labels")]
    io_labels: Option<String>,
    #[arg(long = "io.output_dir")]
    io_output_dir: Option<String>,
    #[arg(long = "io.seed")]
    io_seed: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("grid.rows", &self.grid_rows),
            ("grid.cols", &self.grid_cols),
            ("grid.radius", &self.grid_radius),
            ("grid.sectors", &self.grid_sectors),
            ("map.mode", &self.map_mode),
            ("map.hi_levels", &self.map_hi_levels),
            ("kernel.gamma", &self.kernel_gamma),
            ("kernel.depth", &self.kernel_depth),
            ("learn.svm_cost", &self.learn_svm_cost),
            ("learn.svm_costs", &self.learn_svm_costs),
            ("learn.bias_feature", &self.learn_bias_feature),
            ("learn.eta", &self.learn_eta),
            ("learn.inner_steps", &self.learn_inner_steps),
            ("learn.max_outer", &self.learn_max_outer),
            ("learn.tol", &self.learn_tol),
            ("io.features", &self.io_features),
            ("io.labels", &self.io_labels),
            ("io.output_dir", &self.io_output_dir),
            ("io.seed", &self.io_seed),
        ]
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of dotted `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn context and SVM weights; writes checkpoint, log and effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// MF-S, MF-C and MAP of a predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Dump the learned context weights as JSON.
    ExportContext {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "context.json")]
        out: PathBuf,
    },
    /// Run the gram recursion and check it against the explicit maps.
    Gram {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use this checkpoint's context instead of the handcrafted one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allow more than 2000 cells.
        #[arg(long)]
        force: bool,
    },
    /// Generate a dataset whose classes differ only in spatial arrangement.
    GenSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 40)]
        images: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { cfg, resume } => {
            let cfg = cfg.resolve()?;
            let s = cli::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "trained: {} outer iterations, E = {:.9e}, checkpoint {}",
                s.outer_iter,
                s.final_objective,
                s.checkpoint.display()
            );
        }
        Command::Predict {
            checkpoint,
            features,
            out,
        } => {
            let n = cli::cmd_predict(&checkpoint, &features, &out)?;
            println!("scored {n} images -> {}", out.display());
        }
        Command::Eval {
            predictions,
            labels,
            out_dir,
        } => {
            let r = cli::cmd_eval(&predictions, &labels, &out_dir)?;
            println!("MFS/MFC/MAP = {:.4}/{:.4}/{:.4}", r.mfs, r.mfc, r.map_);
        }
        Command::ExportContext { checkpoint, out } => {
            let ex = cli::cmd_export_context(&checkpoint, &out)?;
            println!("exported {} layers -> {}", ex.layers.len(), out.display());
        }
        Command::Gram { cfg, checkpoint, force } => {
            let cfg = cfg.resolve()?;
            let r = cli::cmd_gram(&cfg, checkpoint.as_deref(), force)?;
            println!(
                "gram over {} cells: max relative residual {:e}",
                r.n_total, r.max_relative_residual
            );
        }
        Command::GenSynthetic { cfg, images } => {
            let cfg = cfg.resolve()?;
            let (f, l) = cli::cmd_gen_synthetic(&cfg, images)?;
            println!("wrote {} and {}", f.display(), l.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}

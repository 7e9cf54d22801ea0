//! Command-line front end.
//!
//! Exit codes: `0` success, `1` runtime failure, `2` configuration error.

mod config;

pub use config::{parse_pairs, RunConfig, KEYS};

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use crate::encoder::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::trainkit::{
    evaluate, fit, model_config_for, run_ablation, write_ablation_csv, write_metrics_csv, AblationRow,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mvdistill", version, about = "Multi-view classification with hierarchical mutual distillation")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic MVDS dataset.
    Synth(SynthArgs),
    /// Train a model and write metrics and a checkpoint.
    Train,
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Run the switch and topology ablations.
    Ablate,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 6)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 3)]
    pub jitter: usize,
    /// Keep every view upright.
    #[arg(long)]
    pub no_rotate: bool,
    /// Render the held-out family of views of the same classes.
    #[arg(long)]
    pub validation: bool,
    /// Output file, relative to `--out-dir` unless absolute.
    #[arg(long, default_value = "data.mvds")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Views per tuple; defaults to `train.views`.
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn out_path(cli: &Cli, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        cli.out_dir.join(p)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Logs every effective setting and saves them next to the outputs.
fn echo_config(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    for (k, v) in cfg.effective() {
        info!("config {k} = {v}");
    }
    let path = cli.out_dir.join("effective_config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

/// Reads the dataset configured under `key`; a missing or unreadable file is
/// a configuration error naming the key.
fn load_dataset(key: &str, path: Option<&Path>) -> Result<Dataset> {
    let path = path.ok_or_else(|| Error::Config(format!("{key} is required")))?;
    if !path.is_file() {
        return Err(Error::Config(format!("{key}: dataset {} does not exist", path.display())));
    }
    Dataset::read(path)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn execute(cli: &Cli) -> Result<i32> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train => cmd_train(cli),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate => cmd_ablate(cli),
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<i32> {
    let spec = SyntheticSpec {
        channels: a.channels,
        noise_std: a.noise,
        rotate: !a.no_rotate,
        jitter: a.jitter,
        split: if a.validation { Split::Validation } else { Split::Train },
        ..SyntheticSpec::uniform(a.classes, a.per_class, a.size, cli.seed.unwrap_or(0))
    };
    let ds = generate_synthetic(&spec)?;
    let out = out_path(cli, &a.out);
    ds.write(&out)?;
    info!("wrote {} images of {} classes to {}", ds.len(), a.classes, out.display());
    Ok(EXIT_OK)
}

fn cmd_train(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let train = load_dataset("data.train", cfg.train_data.as_deref())?;
    let val = match &cfg.val_data {
        Some(p) => Some(load_dataset("data.val", Some(p))?),
        None => None,
    };
    echo_config(cli, &cfg)?;
    let tc = cfg.train_config();
    let run = fit(&tc, &cfg.model, &train, val.as_ref())?;
    let metrics = cli.out_dir.join("metrics.csv");
    write_metrics_csv(create(&metrics)?, &run.rows, tc.views)?;
    let ckpt = cli.out_dir.join("model.mvwm");
    write_checkpoint(&run.encoder, &ckpt)?;
    if let Some(last) = run.rows.last() {
        println!("final top1 {:.4} top5 {:.4}", last.top1_full, last.top5_full);
    }
    info!("wrote {} and {}", metrics.display(), ckpt.display());
    Ok(EXIT_OK)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let cfg = load_config(cli)?;
    let n = a.views.unwrap_or(cfg.train.views);
    if !a.checkpoint.is_file() {
        return Err(Error::Config(format!("--checkpoint: {} does not exist", a.checkpoint.display())));
    }
    let encoder = read_checkpoint(&a.checkpoint)?;
    let data = load_dataset("--data", Some(&a.data))?;
    let row = evaluate(&encoder, &data, n, cfg.train.eval_cap, &cfg.train.objective)?;
    let rows = [row];
    write_metrics_csv(io::stdout().lock(), &rows, n)?;
    write_metrics_csv(create(&cli.out_dir.join("eval.csv"))?, &rows, n)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let checks = gradsuite::run_suite(&seeds)?;
    let mut stdout = io::stdout().lock();
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        writeln!(stdout, "{verdict:>4}  {:<24} max rel err {:.3e} over {} seeds", c.name, c.max_error, c.seeds)
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    }
    writeln!(
        stdout,
        "{} of {} checks passed (tolerance {:e}) in {:.1}s",
        checks.len() - failed,
        checks.len(),
        gradsuite::GRAD_TOLERANCE,
        start.elapsed().as_secs_f64()
    )
    .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_ablate(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let train = load_dataset("data.train", cfg.train_data.as_deref())?;
    let val = match &cfg.val_data {
        Some(p) => Some(load_dataset("data.val", Some(p))?),
        None => None,
    };
    model_config_for(&train, &cfg.model)?;
    echo_config(cli, &cfg)?;
    let tc = cfg.train_config();
    let rows = run_ablation(&tc, &cfg.model, &train, val.as_ref())?;
    let n = tc.views;
    let write = |name: &str, rows: &[AblationRow]| -> Result<()> {
        write_ablation_csv(create(&cli.out_dir.join(name))?, rows, n)
    };
    write("ablation.csv", &rows)?;
    write("ablation_switches.csv", &rows[..5])?;
    write("ablation_topology.csv", &rows[5..])?;
    write_ablation_csv(io::stdout().lock(), &rows, n)?;
    Ok(EXIT_OK)
}

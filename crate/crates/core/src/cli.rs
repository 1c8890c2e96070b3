//! Command-line front end: dataset generation, training with checkpoints,
//! evaluation, the ablation ladder and the gradient audit.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::ablation::{run_ablation, Ladder, RunResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::metrics::MetricsRow;
use crate::synthdata::{load_split, make_split, Domain, GenSpec, Split, SplitCounts};
use crate::trainer::{evaluate, loss_csv_line, train, TrainData, TrainEvent, TrainState, LOSS_HEADER, SOURCE_TEST, TARGET_TEST};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const LADDER_FILE: &str = "ladder.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Parser)]
#[command(name = "ds2net", version, about = "Dual-encoder domain adaptation for lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain dataset.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the ablation ladder over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator spec (JSON); defaults to the built-in spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train_a: usize,
    #[arg(long, default_value_t = 50)]
    pub test_a: usize,
    #[arg(long, default_value_t = 200)]
    pub train_b: usize,
    #[arg(long, default_value_t = 50)]
    pub test_b: usize,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults to the full model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint (written by the same configuration).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed iterations and save a checkpoint.
    #[arg(long)]
    pub stop_at: Option<usize>,
    /// Also save a checkpoint every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Overwrite the outputs of a previous run in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Configuration the checkpoint was trained with; defaults to the
    /// `config.json` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Domain to score; defaults to both source and target.
    #[arg(long, value_parser = parse_domain)]
    pub domain: Option<Domain>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Directory for `metrics.csv` and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ladder file (JSON `{"base": {..}, "rows": [..]}`); defaults to the
    /// five-row ladder on the default configuration.
    #[arg(long)]
    pub ladder: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the ladder's iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random draws per op family.
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    Domain::parse(s).ok_or_else(|| format!("unknown domain {s:?} (expected A or B)"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (expected train or test)"))
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit status.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs one command. `Ok` carries the exit status of a command that ran to
/// completion but whose result is a failure (all ablation runs failed, a
/// gradient check out of tolerance).
pub fn execute(command: Command) -> Result<u8> {
    match command {
        Command::GenData(a) => gen_data(&a).map(|_| 0),
        Command::Train(a) => train_cmd(&a).map(|_| 0),
        Command::Eval(a) => eval_cmd(&a).map(|_| 0),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::GradCheck(a) => grad_check_cmd(&a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => GenSpec::load(p)?,
        None => GenSpec::default(),
    };
    let counts = SplitCounts {
        train_a: a.train_a,
        test_a: a.test_a,
        train_b: a.train_b,
        test_b: a.test_b,
    };
    create_dir(&a.out)?;
    let entries = make_split(&spec, counts, a.seed, &a.out, a.force)?;
    println!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

/// Data rows of a CSV file whose iteration column (`col`)
/// satisfies `keep`.
fn filter_rows(path: &Path, col: usize, keep: impl Fn(usize) -> bool) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()).is_some_and(&keep))
        .map(str::to_string)
        .collect())
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    create_dir(&a.out)?;
    let metrics_path = a.out.join(METRICS_FILE);
    let losses_path = a.out.join(LOSSES_FILE);
    let ckpt_path = a.out.join(CHECKPOINT_FILE);

    let (mut state, mut metrics, mut losses) = match &a.resume {
        Some(ckpt) => {
            let state = TrainState::load(config.clone(), ckpt)?;
            let k = state.iteration;
            // Rows written after the checkpoint belong to the abandoned tail.
            let metrics = if metrics_path.exists() { filter_rows(&metrics_path, 2, |i| i <= k)? } else { Vec::new() };
            let losses = if losses_path.exists() { filter_rows(&losses_path, 0, |i| i < k)? } else { Vec::new() };
            info!("resuming {} at iteration {k}", config.run_id);
            (state, metrics, losses)
        }
        None => {
            if metrics_path.exists() && !a.force {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --force to overwrite or --resume to continue",
                    a.out.display()
                )));
            }
            (TrainState::new(config.clone())?, Vec::new(), Vec::new())
        }
    };
    write(&a.out.join(CONFIG_FILE), &config.to_json())?;

    let data = TrainData::load(&a.data, &config)?;
    let until = a.stop_at.unwrap_or(config.iterations).min(config.iterations);
    let every = a.checkpoint_every;
    let mut result = Ok(());
    while state.iteration < until && result.is_ok() {
        let next = if every > 0 { (state.iteration / every + 1) * every } else { until };
        result = train(&mut state, &data, next.min(until), &mut |e| match e {
            TrainEvent::Loss { iteration, rates, report } => {
                info!("iter {iteration} total {:.5} seg {:.5}/{:.5}", report.total, report.seg_ss, report.seg_st);
                losses.push(loss_csv_line(iteration, &rates, report));
            }
            TrainEvent::Metrics(m) => {
                info!("iter {} {} lesion IoU {:.4} mIoU {:.4}", m.iteration, m.split, m.iou_lesion, m.miou);
                metrics.push(m.csv_line());
            }
        });
        if result.is_ok() && every > 0 && state.iteration % every == 0 {
            state.save(&ckpt_path)?;
        }
    }
    // Written even after a numeric abort, to help diagnose it.
    let csv = |header: &str, rows: &[String]| rows.iter().fold(format!("{header}\n"), |s, r| s + r + "\n");
    write(&metrics_path, &csv(MetricsRow::HEADER, &metrics))?;
    write(&losses_path, &csv(LOSS_HEADER, &losses))?;
    result?;
    state.save(&ckpt_path)?;

    if state.iteration < config.iterations {
        println!("stopped at iteration {} of {}; checkpoint {}", state.iteration, config.iterations, ckpt_path.display());
        return Ok(());
    }
    let mut summary = format!("final run={} iteration={}", config.run_id, state.iteration);
    for set in [SOURCE_TEST, TARGET_TEST] {
        // Columns: run_id, config_hash, iteration, split, iou_lesion, iou_background, miou, ...
        let last = metrics.iter().rev().map(|l| l.split(',').collect::<Vec<_>>()).find(|c| c.get(3) == Some(&set));
        if let Some(c) = last {
            summary += &format!(" {set}: iou_lesion={} miou={}", c[4], c[6]);
        }
    }
    println!("{summary}");
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let config = RunConfig::load(&config_path)?;
    let state = TrainState::load(config.clone(), &a.checkpoint)?;
    let domains = match a.domain {
        Some(d) => vec![d],
        None => vec![config.source_domain, config.target_domain],
    };
    let mut rows = Vec::new();
    for d in domains {
        let role = if d == config.source_domain { "source" } else { "target" };
        let samples = load_split(&a.data, d, a.split)?;
        if samples.is_empty() {
            return Err(Error::Config(format!("{} has no {d}/{} samples", a.data.display(), a.split)));
        }
        if let Some(s) = samples.first() {
            config.encoder().check_input(s.height, s.width)?;
        }
        let c = evaluate(&state.model, &samples)?;
        let row = MetricsRow::from_confusion(&config.run_id, &config.hash_hex(), state.iteration, &format!("{role}-{}", a.split), &c)?;
        println!("{}", row.csv_line());
        rows.push(row.csv_line());
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join(CONFIG_FILE), &config.to_json())?;
        let text = rows.iter().fold(format!("{}\n", MetricsRow::HEADER), |s, r| s + r + "\n");
        write(&out.join(METRICS_FILE), &text)?;
    }
    Ok(())
}

pub fn ablate_cmd(a: &AblateArgs) -> Result<u8> {
    let mut ladder = match &a.ladder {
        Some(p) => Ladder::load(p)?,
        None => Ladder::standard(RunConfig::default()),
    };
    if let Some(t) = a.iterations {
        ladder.base.iterations = t;
    }
    ladder.base.log_interval = 0;
    for i in 0..ladder.rows.len() {
        ladder.config(i, 0)?;
    }
    create_dir(&a.out)?;
    write(&a.out.join(LADDER_FILE), &ladder.to_json())?;
    let data = TrainData::load(&a.data, &ladder.base)?;
    let report = run_ablation(&ladder, &data, &a.seeds, &mut |row, seed, result| match result {
        RunResult::Done { target_iou, .. } => info!("{row} seed {seed}: target lesion IoU {target_iou:.4}"),
        RunResult::Failed(msg) => warn!("{row} seed {seed} failed: {msg}"),
    })?;
    write(&a.out.join(ABLATION_CSV), &report.to_csv())?;
    let table = report.to_table();
    write(&a.out.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    Ok(if report.all_failed() { 4 } else { 0 })
}

pub fn grad_check_cmd(a: &GradCheckArgs) -> Result<u8> {
    if a.draws == 0 || !(a.eps > 0.0) {
        return Err(Error::Config("draws and eps must be positive".into()));
    }
    let results = run_suite(a.draws, a.eps)?;
    let mut ok = true;
    for r in &results {
        let pass = r.passed(a.tol);
        ok &= pass;
        println!("{:<32} draws {:>3}  max rel err {:.3e}  {}", r.name, r.draws, r.max_rel_err, if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { 0 } else { 4 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let p = |args: &[&str]| Cli::try_parse_from(std::iter::once("ds2net").chain(args.iter().copied())).map(|c| c.command);
        assert!(matches!(p(&["gen-data", "--out", "d", "--seed", "3"]), Ok(Command::GenData(GenDataArgs { seed: 3, .. }))));
        assert!(matches!(p(&["train", "--data", "d", "--out", "o", "--resume", "c"]), Ok(Command::Train(TrainArgs { resume: Some(_), .. }))));
        match p(&["ablate", "--data", "d", "--out", "o", "--seeds", "4,5"]) {
            Ok(Command::Ablate(a)) => assert_eq!(a.seeds, vec![4, 5]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(p(&["eval", "--checkpoint", "c", "--data", "d", "--domain", "B"]), Ok(Command::Eval(EvalArgs { domain: Some(Domain::B), .. }))));
        assert!(p(&["eval", "--checkpoint", "c", "--data", "d", "--domain", "C"]).is_err());
        assert!(matches!(p(&["grad-check"]), Ok(Command::GradCheck(GradCheckArgs { draws: 20, .. }))));
        assert!(p(&["train"]).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::io("p", std::io::Error::other("x")).exit_code(), 3);
        let nan = Error::NonFinite {
            op: "log".into(),
            node: 1,
            context: "x".into(),
        };
        assert_eq!(nan.exit_code(), 4);
    }
}

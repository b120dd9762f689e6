//! `stan`: train, evaluate, calibrate, ablate and inspect the open-set
//! recognition network.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stan_core::ablation::{run_ablation, runs_csv, summary_csv, AblationGrid};
use stan_core::config::{ModelConfig, RunConfig};
use stan_core::evaluate::{calibrate, threads_from_env, Provenance};
use stan_core::gradcheck::{sweep, SweepOptions};
use stan_core::io::checkpoint::Checkpoint;
use stan_core::io::manifest::Dataset;
use stan_core::io::synthetic::{write_synthetic, SyntheticSpec};
use stan_core::io::{read_bytes, scores_csv, tensor_file, write_atomic};
use stan_core::probe::{attention_maps, write_maps};
use stan_core::run::{evaluate_run, load_dataset, restore, train_run, Threshold};
use stan_core::train::history_csv;
use stan_core::{ErrorKind, Result, StanError};

#[derive(Parser)]
#[command(name = "stan", version, about = "Open-set fine-grained recognition: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes a checkpoint and a loss-history CSV.
    Train(TrainArgs),
    /// Score the test split; writes report.json and scores.csv.
    Eval(EvalArgs),
    /// Compute the threshold that keeps a target share of known validation samples.
    Calibrate(CalibrateArgs),
    /// Write a synthetic dataset (tensor files plus manifest.json).
    GenData(GenDataArgs),
    /// Train and evaluate every row of a module/aggregation grid.
    Ablate(AblateArgs),
    /// Dump per-block activation maps of one image as PGM and tensor files.
    AttnDump(AttnDumpArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

/// Scalar overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `optimizer.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `optimizer.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override `loss.lambda`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override `optimizer.backbone.lr`.
    #[arg(long)]
    backbone_lr: Option<f64>,
    /// Override `optimizer.rest.lr`.
    #[arg(long)]
    rest_lr: Option<f64>,
    /// Override `eval.target_tpr`.
    #[arg(long)]
    target_tpr: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.optimizer.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.optimizer.batch_size = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.backbone_lr {
            cfg.optimizer.backbone.lr = v;
        }
        if let Some(v) = self.rest_lr {
            cfg.optimizer.rest.lr = v;
        }
        if let Some(v) = self.target_tpr {
            cfg.eval.target_tpr = v;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss-history CSV; defaults to the checkpoint path with extension `loss.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
#[group(id = "threshold", required = true, multiple = false, args = ["theta", "calibrate"])]
struct EvalArgs {
    /// Run config (JSON); its model sections must match the checkpoint.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Fixed threshold; `inf` and `-inf` are accepted.
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    /// Calibrate the threshold on the validation split at `eval.target_tpr`.
    #[arg(long)]
    calibrate: bool,
    /// Output directory for report.json and scores.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset manifest with a validation split.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    target_tpr: f64,
    /// Also write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic dataset spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid file (JSON) listing module toggles and aggregation modes.
    #[arg(long)]
    grid: PathBuf,
    /// Output directory for summary.csv and runs.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image tensor file of shape [3, H, W].
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config whose model sections are checked; defaults to the tiny config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 5e-3)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Check at most this many random elements per tensor.
    #[arg(long)]
    max_per_tensor: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the analytic gradients; the check must then fail.
    #[arg(long)]
    sabotage: bool,
}

/// Runs the command line `args` (including the program name) and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(ErrorKind::Config, first);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Io => 5,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
        ErrorKind::Io => "io",
    }
}

/// Prints a one-line JSON error to stderr.
fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let code = exit_code(kind);
    eprintln!("{}", json!({ "error": kind_name(kind), "exit_code": code, "message": message }));
    ExitCode::from(code)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let ds = load_dataset(&cfg.data)?;
    let trained = train_run(&cfg, &ds)?;
    trained.checkpoint(cfg.seed).save(&a.out)?;
    let history = a.history.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_atomic(&history, &history_csv(&trained.history)?)?;
    let last = trained.history.last().map(|r| r.loss);
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "history": history,
            "steps": trained.history.len(),
            "final_loss": last,
            "config_hash": cfg.model().hash(),
            "seed": cfg.seed,
        })
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, store) = restore(&cfg.model(), &ckpt)?;
    let ds = load_dataset(&cfg.data)?;
    let threshold = match a.theta {
        Some(t) => Threshold::Fixed(t),
        None => Threshold::Calibrate(cfg.eval.target_tpr),
    };
    let provenance = Provenance {
        config_hash: ckpt.meta.config_hash.clone(),
        seed: ckpt.meta.seed,
    };
    let ev = evaluate_run(&model, &store, &ds, threshold, &provenance, threads_from_env()?)?;
    let report_path = a.out.join("report.json");
    write_atomic(&report_path, &to_json(&ev.report))?;
    scores_csv::write_scores(&a.out.join("scores.csv"), &ev.rows)?;
    println!(
        "{}",
        json!({
            "acc": ev.report.acc,
            "auroc": ev.report.auroc,
            "oscr": ev.report.oscr,
            "macro_f1": ev.report.macro_f1,
            "report": report_path,
        })
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, store) = restore(&ckpt.meta.model, &ckpt)?;
    let ds = Dataset::from_manifest(&a.manifest)?;
    if ds.val.is_empty() {
        return Err(StanError::Data("calibration needs a non-empty validation split".into()));
    }
    stan_core::run::check_dataset(&ds, &model.cfg)?;
    let theta = calibrate(&model, &store, &ds.val, a.target_tpr, threads_from_env()?)?;
    let out = json!({ "theta": theta, "target_tpr": a.target_tpr, "num_val": ds.val.len() });
    if let Some(path) = &a.out {
        write_atomic(path, &to_json(&out))?;
    }
    println!("{out}");
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let spec: SyntheticSpec = serde_json::from_slice(&read_bytes(&a.spec)?)
        .map_err(|e| StanError::Config(format!("{}: {e}", a.spec.display())))?;
    let manifest = write_synthetic(&spec, &a.out)?;
    println!(
        "{}",
        json!({ "manifest": a.out.join("manifest.json"), "entries": manifest.entries.len() })
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let grid = AblationGrid::load(&a.grid)?;
    grid.configs(&cfg)?;
    let ds = load_dataset(&cfg.data)?;
    let threads = threads_from_env()?;
    let results = run_ablation(&cfg, &grid, &ds, threads, &mut |row, r| {
        eprintln!(
            "{}",
            json!({ "row": row.name, "seed": r.seed, "acc": r.acc, "auroc": r.auroc, "oscr": r.oscr })
        );
    })?;
    write_atomic(&a.out.join("summary.csv"), &summary_csv(&results)?)?;
    write_atomic(&a.out.join("runs.csv"), &runs_csv(&results)?)?;
    println!("{}", json!({ "rows": results.len(), "summary": a.out.join("summary.csv") }));
    Ok(())
}

fn cmd_attn_dump(a: AttnDumpArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, store) = restore(&ckpt.meta.model, &ckpt)?;
    let image = tensor_file::read_tensor(&a.image)?;
    let side = model.cfg.backbone.image_size;
    if image.shape() != [3, side, side] {
        return Err(StanError::Data(format!(
            "{} has shape {:?}, model expects [3, {side}, {side}]",
            a.image.display(),
            image.shape()
        )));
    }
    let maps = attention_maps(&model, &store, &image)?;
    write_maps(&a.out, &maps)?;
    println!("{}", json!({ "maps": maps.len(), "out": a.out }));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let model = match &a.config {
        Some(p) => RunConfig::load(p)?.model(),
        None => ModelConfig::tiny(),
    };
    if a.tol.is_nan() {
        return Err(StanError::Config("--tol is NaN".into()));
    }
    let opts = SweepOptions {
        eps: a.eps,
        seed: a.seed,
        sabotage: a.sabotage,
        max_per_tensor: a.max_per_tensor,
        ..SweepOptions::default()
    };
    let report = sweep(&model, &opts)?;
    for m in &report.modules {
        println!(
            "{}",
            json!({
                "module": m.module,
                "max_rel_error": m.max_rel_error,
                "worst": m.worst_param,
                "checked": m.checked,
            })
        );
    }
    let worst = report.max_rel_error();
    let pass = !(worst > a.tol);
    println!("{}", json!({ "max_rel_error": worst, "tol": a.tol, "checked": report.checked(), "pass": pass }));
    if pass {
        Ok(())
    } else {
        Err(StanError::Numerical(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {:.3e}",
            a.tol
        )))
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use pumkit::data::{generate_split, read_dataset, write_dataset, GroupSpec, SPLIT_FILES};
use pumkit::gradcheck::{run_suite, GradCheckConfig};
use pumkit::loss::default_gamma;
use pumkit::train::{
    evaluate, load_model, predict_runs, save_model, train_with_observer, EvalMode, EvalOptions, InferenceMode,
    ModelDims,
};
use pumkit::{DataConfig, DatasetSplit, Error, OpKind, SyntheticScene, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "pumkit", version, about = "Train and evaluate Gaussian relation embeddings on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and its history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Oracle recall against M for a PUM and a baseline checkpoint.
    OracleSweep(SweepArgs),
    /// Finite-difference check of every differentiable block.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; falls back to PUMKIT_SEED, then 0.
    #[arg(long, env = "PUMKIT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 20)]
    num_classes: usize,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    /// Ambiguity pairs as synonymy,hyponymy,multiview.
    #[arg(long, default_value = "3,2,2")]
    groups: String,
    /// Training scenes; validation and test get a tenth each.
    #[arg(long, conflicts_with = "split")]
    scenes: Option<usize>,
    /// Explicit train,val,test sizes.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Entropy margin; defaults to 1.2 times the entropy of N(0, I).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Samples averaged at validation time.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Monte-Carlo samples per relation in the loss.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Drop the deterministic loss (lambda = 1).
    #[arg(long)]
    wo_dl: bool,
    /// Drop the entropy regularizer (alpha = 0).
    #[arg(long)]
    wo_rt: bool,
    /// Deterministic baseline without the Gaussian head.
    #[arg(long)]
    wo_pum: bool,
    /// Print one line per epoch.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    /// det, avg or stoch.
    #[arg(long, default_value = "avg")]
    mode: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    oracle_k: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    pum: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 8)]
    max_m: usize,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, default_value_t = 1)]
    oracle_k: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Also write the report and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Negate the derivative rule of one op.
    #[arg(long, hide = true)]
    inject_sign_flip: Option<String>,
}

/// Failure of a command, carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
            Error::Numeric { .. } | Error::NonFinite { .. } | Error::NanLoss { .. } => EXIT_NUMERIC,
            Error::Shape { .. } | Error::Parse { .. } | Error::Version { .. } | Error::Io(_) | Error::Json(_) => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    }
}

type CmdResult = Result<(), Failure>;

/// Everything needed to rerun a command and check its outputs.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    seed: u64,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: &'static str,
    wall_clock_seconds: f64,
}

struct Recorder {
    command: &'static str,
    seed: u64,
    start: Instant,
}

impl Recorder {
    fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            seed,
            start: Instant::now(),
        }
    }

    fn finish(self, dir: &Path, config: Value, inputs: &[&Path], outputs: &[&Path]) -> CmdResult {
        let show = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect();
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            seed: self.seed,
            config,
            inputs: show(inputs),
            outputs: show(outputs),
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))
    }
}

fn require(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_DATA,
            message: format!("{what} not found: {}", path.display()),
        })
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| Failure::from(Error::from(e)))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let rec = Recorder::new("gen-data", a.seed.seed);
    let groups: GroupSpec = a.groups.parse()?;
    let mut cfg = DataConfig {
        num_classes: a.num_classes,
        zipf_exponent: a.zipf,
        groups,
        ..DataConfig::default()
    };
    cfg.scene.feature_dim = a.feature_dim;
    cfg.scene.n_objects = a.objects;
    cfg.scene.relations = a.relations;
    cfg.scene.noise_scale = a.noise;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(usage("--noise must be a non-negative number"));
    }
    if let Some(n) = a.scenes {
        (cfg.train_scenes, cfg.val_scenes, cfg.test_scenes) = (n, n / 10, n / 10);
    }
    if let Some(s) = &a.split {
        if s.len() != 3 {
            return Err(usage("--split takes three sizes: train,val,test"));
        }
        (cfg.train_scenes, cfg.val_scenes, cfg.test_scenes) = (s[0], s[1], s[2]);
    }
    let split = generate_split(&cfg, a.seed.seed)?;
    create_dir(&a.out)?;
    write_dataset(&split, &a.out)?;
    let outputs: Vec<PathBuf> = SPLIT_FILES.iter().map(|(_, f)| a.out.join(f)).collect();
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    rec.finish(&a.out, to_value(&cfg)?, &[], &outputs)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let rec = Recorder::new("train", a.seed.seed);
    require(&a.data, "dataset")?;
    let data = read_dataset(&a.data)?;
    let dims = ModelDims::for_features(data.config.scene.feature_dim, data.vocabulary.num_classes());
    let mut cfg = TrainConfig::new(dims, a.seed.seed);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.adam.lr = a.lr;
    cfg.inference_k = a.k;
    cfg.loss.lambda = a.lambda;
    cfg.loss.alpha = a.alpha;
    cfg.loss.gamma = a.gamma.unwrap_or_else(|| default_gamma(dims.latent));
    cfg.loss.n_train_samples = a.n;
    cfg.ablation.without_deterministic_loss = a.wo_dl;
    cfg.ablation.without_regularizer = a.wo_rt;
    cfg.ablation.without_pum = a.wo_pum;

    let verbose = a.verbose;
    let trained = train_with_observer(&cfg, &data, |r| {
        if verbose {
            eprintln!("epoch {} loss {:.6}", r.epoch, r.loss);
        }
    })?;

    create_dir(&a.out)?;
    let model_path = a.out.join("model.json");
    let history_path = a.out.join("history.csv");
    save_model(&trained, &model_path)?;
    write_file(&history_path, &trained.history_csv())?;
    // The manifest records the loss weights actually used, after ablations.
    let mut config = to_value(&cfg)?;
    config["effective_loss"] = to_value(&cfg.effective_loss())?;
    rec.finish(&a.out, config, &[&a.data], &[&model_path, &history_path])
}

fn split_scenes<'a>(data: &'a DatasetSplit, name: &str) -> &'a [SyntheticScene] {
    match name {
        "train" => &data.train,
        "val" => &data.validation,
        _ => &data.test,
    }
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let rec = Recorder::new("eval", a.seed.seed);
    let mode = EvalMode::from_parts(&a.mode, a.k, a.m)?;
    if a.ks.is_empty() || a.ks.contains(&0) || a.oracle_k == 0 {
        return Err(usage("--ks and --oracle-k must be positive"));
    }
    require(&a.model, "checkpoint")?;
    require(&a.data, "dataset")?;
    let trained = load_model(&a.model)?;
    let data = read_dataset(&a.data)?;
    let opts = EvalOptions {
        seed: a.seed.seed,
        ks: a.ks.clone(),
        oracle_k: a.oracle_k,
    };
    let report = evaluate(&trained.model, split_scenes(&data, &a.split), mode, &opts)?;

    create_dir(&a.out)?;
    let csv_path = a.out.join("metrics.csv");
    let json_path = a.out.join("metrics.json");
    write_file(&csv_path, &report.to_csv())?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&json_path, &(text + "\n"))?;
    let config = json!({ "mode": mode, "options": opts, "split": a.split });
    rec.finish(&a.out, config, &[&a.model, &a.data], &[&csv_path, &json_path])
}

fn oracle_sweep(a: SweepArgs) -> CmdResult {
    let rec = Recorder::new("oracle-sweep", a.seed.seed);
    if a.max_m == 0 || a.oracle_k == 0 {
        return Err(usage("--max-m and --oracle-k must be positive"));
    }
    require(&a.pum, "checkpoint")?;
    require(&a.baseline, "checkpoint")?;
    require(&a.data, "dataset")?;
    let data = read_dataset(&a.data)?;
    let scenes = split_scenes(&data, &a.split);
    let gts = pumkit::train::ground_truth(scenes);
    let mut csv = String::from("model,M,oR\n");
    for (label, path) in [("pum", &a.pum), ("baseline", &a.baseline)] {
        let trained = load_model(path)?;
        let runs = predict_runs(&trained.model, scenes, InferenceMode::SingleSample, a.max_m, a.seed.seed)?;
        for m in 1..=a.max_m {
            let o = pumkit::metrics::oracle_recall(&runs[..m], &gts, a.oracle_k)?
                .ok_or_else(|| Failure {
                    code: EXIT_DATA,
                    message: format!("split '{}' has no relations", a.split),
                })?;
            csv.push_str(&format!("{label},{m},{o}\n"));
        }
    }
    create_dir(&a.out)?;
    let csv_path = a.out.join("oracle.csv");
    write_file(&csv_path, &csv)?;
    let config = json!({ "max_m": a.max_m, "oracle_k": a.oracle_k, "split": a.split });
    rec.finish(&a.out, config, &[&a.pum, &a.baseline, &a.data], &[&csv_path])
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let rec = Recorder::new("grad-check", a.seed.seed);
    let sign_flip = match &a.inject_sign_flip {
        Some(name) => Some(name.parse::<OpKind>()?),
        None => None,
    };
    let cfg = GradCheckConfig {
        trials: a.trials,
        seed: a.seed.seed,
        sign_flip,
        ..GradCheckConfig::default()
    };
    let report = run_suite(&cfg)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.txt");
        write_file(&path, &text)?;
        rec.finish(dir, to_value(&cfg)?, &[], &[&path])?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed: max relative error {:e}", report.max_error()),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::OracleSweep(a) => oracle_sweep(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

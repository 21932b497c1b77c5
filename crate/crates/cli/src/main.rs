mod config;
mod fetch;
mod predict;
mod run;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use wastewise_core::dataset::SplitName;
use wastewise_core::SplitRatios;
use wastewise_service::ServiceConfig;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "wastewise", version, about = "Waste image classification: data, training, evaluation, export, prediction, serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack the TrashNet corpus into class directories.
    FetchData(FetchArgs),
    /// Split the corpus, train, checkpoint and export.
    Train(TrainArgs),
    /// Per-class report and confusion matrix for one split of a run.
    Evaluate(EvaluateArgs),
    /// Re-export a run's checkpoint as a portable artifact.
    Export(ExportArgs),
    /// Classify image files offline with a portable artifact.
    Predict(PredictArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the configured data root.
    #[arg(long)]
    dest: Option<PathBuf>,
    #[arg(long)]
    url: Option<String>,
    /// Use a local zip instead of downloading.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    sha256: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repeatable.
    #[arg(long = "backbone")]
    backbones: Vec<String>,
    #[arg(long, conflicts_with = "backbones")]
    all_backbones: bool,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    test_ratio: Option<f64>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    stratified: bool,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Train only the head.
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    augment_flip: bool,
    /// Directory of `<backbone>.safetensors` pretrained weights.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    /// Train from randomly initialized backbone weights.
    #[arg(long)]
    random_init: bool,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = &self.data_root {
            c.data_root = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.all_backbones {
            c.backbones = run::all_backbone_ids();
        } else if !self.backbones.is_empty() {
            c.backbones = self.backbones.clone();
        }
        let r = c.ratios;
        c.ratios = SplitRatios::new(
            self.train_ratio.unwrap_or(r.train),
            self.test_ratio.unwrap_or(r.test),
            self.val_ratio.unwrap_or(r.validation),
        );
        c.stratified |= self.stratified;
        let t = &mut c.train;
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.early_stop_patience = v;
        }
        if let Some(v) = self.micro_batch {
            t.micro_batch = v;
        }
        t.fine_tune_backbone &= !self.freeze_backbone;
        t.augment_flip |= self.augment_flip;
        if let Some(v) = self.dropout {
            c.head.dropout_rate = v;
        }
        if let Some(v) = &self.weights_dir {
            c.weights_dir = Some(v.clone());
        }
        c.random_init |= self.random_init;
        c.resolve()
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with_all = ["backbone", "all_backbones"])]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    output_dir: PathBuf,
    #[arg(long, default_value = "mobilenet_v2")]
    backbone: String,
    /// Evaluate every backbone's run and write comparison.csv.
    #[arg(long)]
    all_backbones: bool,
    /// train, test or validation.
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Defaults to the data root in the run's resolved config.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Defaults to `<run-dir>/model.onnx`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    factor_table: Option<PathBuf>,
    #[arg(long)]
    suggestions: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Service TOML; `WASTEWISE_*` variables and then flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    factor_table: Option<PathBuf>,
    #[arg(long)]
    suggestions: Option<PathBuf>,
    #[arg(long)]
    max_upload_bytes: Option<usize>,
}

impl ServeArgs {
    fn resolve(&self) -> anyhow::Result<ServiceConfig> {
        let mut c = ServiceConfig::load(self.config.as_deref())?;
        if let Some(v) = &self.artifact {
            c.artifact = v.clone();
        }
        if let Some(v) = &self.bind {
            c.bind = v.clone();
        }
        if let Some(v) = self.port {
            c.port = v;
        }
        if let Some(v) = &self.data_dir {
            c.data_dir = v.clone();
        }
        if let Some(v) = &self.factor_table {
            c.factor_table = Some(v.clone());
        }
        if let Some(v) = &self.suggestions {
            c.suggestions = Some(v.clone());
        }
        if let Some(v) = self.max_upload_bytes {
            c.max_upload_bytes = v;
        }
        Ok(c)
    }
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn fetch_data(args: FetchArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let dest = args.dest.unwrap_or(cfg.data_root);
    let expected = args.sha256.or(cfg.dataset_sha256);
    let bytes = match &args.archive {
        Some(p) => std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let url = args.url.unwrap_or(cfg.dataset_url);
            tracing::info!("downloading {url}");
            fetch::download(&url)?
        }
    };
    let sum = fetch::verify(&bytes, expected.as_deref())?;
    tracing::info!("archive sha256 {sum}");
    let n = fetch::extract(&bytes, &dest)?;
    tracing::info!("extracted {n} files into {}", dest.display());
    print_json(&fetch::summarize(&dest)?)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let mut evals = Vec::new();
    for id in &cfg.backbones {
        let out = run::train_one(&cfg, id)?;
        print_json(&run::train_summary(id, &out))?;
        if args.all_backbones {
            evals.push(run::evaluate_run(&out.run_dir, Some(&cfg.data_root), SplitName::Test)?);
        }
    }
    if args.all_backbones {
        let path = run::write_comparison(&cfg.output_dir, &evals)?;
        tracing::info!("wrote {}", path.display());
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let dirs: Vec<PathBuf> = match (&args.run_dir, args.all_backbones) {
        (Some(d), _) => vec![d.clone()],
        (None, true) => run::all_backbone_ids().iter().map(|id| args.output_dir.join(id)).collect(),
        (None, false) => vec![args.output_dir.join(&args.backbone)],
    };
    let mut evals = Vec::new();
    for dir in &dirs {
        let e = run::evaluate_run(dir, args.data_root.as_deref(), args.split)?;
        eprint!("{} ({} split)\n{}", e.backbone_id, run::split_name(e.split), e.report.to_table());
        print_json(&run::evaluation_json(&e))?;
        evals.push(e);
    }
    if args.all_backbones {
        let path = run::write_comparison(&args.output_dir, &evals)?;
        tracing::info!("wrote {}", path.display());
    }
    Ok(())
}

fn export(args: ExportArgs) -> anyhow::Result<()> {
    let a = run::export_run(&args.run_dir, args.out.as_deref())?;
    print_json(&serde_json::json!({"model_path": a.model_path, "sidecar_path": a.sidecar_path, "metadata": a.metadata}))
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let results = predict::predict(&args.artifact, &args.images, args.factor_table.as_deref(), args.suggestions.as_deref())?;
    let mut failed = 0;
    for (path, r) in args.images.iter().zip(results) {
        match r {
            Ok(r) => print_json(&r)?,
            Err(e) => {
                eprintln!("error: {}: {e:#}", path.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} of {} images failed", args.images.len());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(wastewise_service::serve(&cfg))?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FetchData(a) => fetch_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export(a) => export(a),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

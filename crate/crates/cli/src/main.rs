use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use logoformer::{
    cost_csv, evaluate_model, export_embeddings, generate, gradcheck, history_csv,
    parse_cost_grid, write_text, Metrics, Model, ModelConfig, RunSpec, SyntheticSpec, Trace,
    Trainer,
};

const GRADCHECK_THRESHOLD: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "logoformer", version, about = "Windowed local-global attention at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data and write a checkpoint plus history CSV
    Train(TrainArgs),
    /// Score a checkpoint on a synthetic dataset
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Closed-form attention-cost table as CSV
    Cost(CostArgs),
    /// Dump per-clip classification-token embeddings as CSV
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for model.ckpt and history.csv
    #[arg(long)]
    out: PathBuf,
    /// Override the model and shuffle seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the compactness-term weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score
    #[arg(long)]
    model: PathBuf,
    /// Seed for the synthetic evaluation set
    #[arg(long)]
    data_seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config file; defaults to a tiny built-in config
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true)))]
struct CostArgs {
    /// Grid file: one F,H,W,f,h,w config per line
    #[arg(long, group = "source")]
    grid: Option<PathBuf>,
    /// Single config as F,H,W,f,h,w
    #[arg(long, group = "source", value_name = "F,H,W,f,h,w")]
    config: Option<String>,
    /// Write the CSV here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint to run
    #[arg(long)]
    model: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Seed for the synthetic dataset
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

fn main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args)?,
        Command::Eval(args) => run_eval(args)?,
        Command::Gradcheck(args) => return run_gradcheck(args),
        Command::Cost(args) => run_cost(args)?,
        Command::ExportEmbeddings(args) => run_export(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut spec = RunSpec::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        spec.train.model.seed = seed;
        spec.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        spec.train.lambda = lambda;
    }
    if let Some(epochs) = args.epochs {
        spec.train.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        spec.train.lr = lr;
    }
    spec.validate()?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let dataset = generate(&spec.data)?;
    println!(
        "training on {} clips ({} classes), {} epochs, lr {}, lambda {}",
        dataset.len(),
        dataset.num_classes,
        spec.train.epochs,
        spec.train.lr,
        spec.train.lambda
    );

    let mut trainer = Trainer::new(spec.train.clone())?;
    let mut records = Vec::with_capacity(spec.train.epochs);
    for _ in 0..spec.train.epochs {
        let record = trainer.run_epoch(&dataset)?;
        println!(
            "epoch {:>4}  loss {:.6}  ce {:.6}  compact {:.6}  uar {:.4}  war {:.4}",
            record.epoch,
            record.loss_total,
            record.loss_ce,
            record.loss_compact,
            record.train_uar,
            record.train_war
        );
        records.push(record);
    }
    let metrics = evaluate_model(trainer.model(), &dataset)?;
    print_metrics(&metrics);

    let model_path = args.out.join("model.ckpt");
    let history_path = args.out.join("history.csv");
    trainer.into_model().save(&model_path)?;
    write_text(&history_path, &history_csv(&records))?;
    println!("wrote {}", model_path.display());
    println!("wrote {}", history_path.display());
    Ok(())
}

fn data_for_model(config: &ModelConfig, data_seed: u64) -> SyntheticSpec {
    let mut data = SyntheticSpec::desk_default();
    data.frames = config.frames;
    data.height = config.height;
    data.width = config.width;
    data.channels = config.channels;
    data.num_classes = config.num_classes;
    data.seed = data_seed;
    data
}

fn print_metrics(metrics: &Metrics) {
    println!("UAR {:.4}", metrics.uar);
    println!("WAR {:.4}", metrics.war);
    for (c, recall) in metrics.per_class_recall.iter().enumerate() {
        if metrics.zero_support_classes.contains(&c) {
            println!("class {c} recall n/a (no samples)");
        } else {
            println!("class {c} recall {recall:.4}");
        }
    }
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let model = Model::load(&args.model)?;
    let dataset = generate(&data_for_model(&model.config, args.data_seed))?;
    let metrics = evaluate_model(&model, &dataset)?;
    print_metrics(&metrics);
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let config = match &args.config {
        Some(path) => RunSpec::from_file(path)?.train.model,
        None => ModelConfig::tiny(),
    };
    let report = gradcheck(&config, Trace::All)?;
    for entry in &report.entries {
        println!("{:<24} {:.3e}", entry.name, entry.max_rel_error);
    }
    let max = report.max_rel_error();
    let worst = report.worst().map(|e| e.name.as_str()).unwrap_or("-");
    println!("max relative error {max:.3e} ({worst})");
    if max > GRADCHECK_THRESHOLD {
        println!("FAIL: above threshold {GRADCHECK_THRESHOLD:.0e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_cost(args: CostArgs) -> anyhow::Result<()> {
    let grid = match (&args.grid, &args.config) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading grid file {}", path.display()))?;
            parse_cost_grid(&text)?
        }
        (None, Some(line)) => parse_cost_grid(line)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let csv = cost_csv(&grid);
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> anyhow::Result<()> {
    let model = Model::load(&args.model)?;
    let dataset = generate(&data_for_model(&model.config, args.data_seed))?;
    export_embeddings(&model, &dataset, &args.out)?;
    println!("wrote {} embeddings to {}", dataset.len(), args.out.display());
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use herald_core::data::{self, GraphDataset, NodeDataset};
use herald_core::herald::{GraphContext, DEFAULT_SIGMA};
use herald_core::model::{
    graph_depth_for, HeraldMode, Model, ModelConfig, Readout, StrengthSchedule,
};
use herald_core::train::{self, OptimizerKind, TrainConfig};
use herald_core::Error;

#[derive(Parser)]
#[command(
    name = "herald",
    version,
    about = "Hypergraph convolution networks with a learned topology adaptor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Semi-supervised node classification on a hypergraph dataset.
    TrainNode(NodeArgs),
    /// Graph classification with k-fold cross-validation on a TU benchmark.
    TrainGraph(GraphArgs),
    /// Convert an upstream export into the canonical dataset document.
    ConvertDataset(ConvertArgs),
    /// Score a saved checkpoint on a dataset.
    EvalCheckpoint(EvalArgs),
    /// Aggregate run directories into mean and standard deviation per setting.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum HeraldFlag {
    Off,
    On,
    Fast,
}

impl From<HeraldFlag> for HeraldMode {
    fn from(f: HeraldFlag) -> Self {
        match f {
            HeraldFlag::Off => HeraldMode::Off,
            HeraldFlag::On => HeraldMode::PerLayer,
            HeraldFlag::Fast => HeraldMode::Fast,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerFlag {
    Adam,
    Sgd,
}

#[derive(Args)]
struct Common {
    /// Dataset name under $HERALD_DATA_DIR, or a path.
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum, default_value = "off")]
    herald: HeraldFlag,
    /// Number of convolution layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width (node task 64, graph task 32).
    #[arg(long)]
    hidden: Option<usize>,
    /// Adaptor projection width; defaults to the hidden width.
    #[arg(long)]
    herald_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerFlag,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    reg_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Use a fixed update strength instead of the cosine schedule.
    #[arg(long)]
    constant_a: Option<f64>,
    /// Drop the bias terms from convolution layers.
    #[arg(long)]
    no_bias: bool,
    /// Run directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct NodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 50)]
    patience: usize,
    /// Number of runs with consecutive seeds; each gets `<out>/seed-<s>`.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Seed for the planted split when the dataset has no masks.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Accepted for symmetry with train-graph; unused.
    #[arg(long, hide = true)]
    folds: Option<usize>,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Degree cap for one-hot degree features.
    #[arg(long, default_value_t = 64)]
    max_degree: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceFormat {
    Hypergcn,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    from: SourceFormat,
    /// Directory holding the JSON export.
    input: PathBuf,
    /// Dataset name stored in the document.
    #[arg(long)]
    name: String,
    /// Split file `splits/<k>.json` to embed as masks.
    #[arg(long)]
    split: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 64)]
    max_degree: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Root directory searched recursively for run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => 2,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::DegenerateNode { .. }
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Numerical(_) | Error::NonFinite { .. } | Error::Domain(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainNode(a) => train_node(a),
        Command::TrainGraph(a) => train_graph(a),
        Command::ConvertDataset(a) => convert(a),
        Command::EvalCheckpoint(a) => eval_checkpoint(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn missing(name: &str) -> Error {
    Error::Validation(format!(
        "dataset {name:?} not found (searched {})",
        data::data_root().display()
    ))
}

fn load_node(name: &str, split_seed: u64) -> Result<NodeDataset, Error> {
    let path = data::find_node_dataset(name).ok_or_else(|| missing(name))?;
    data::load_node_dataset(&path, split_seed)
}

fn load_graph(name: &str, max_degree: usize) -> Result<GraphDataset, Error> {
    let dir = data::find_tu_dataset(name).ok_or_else(|| missing(name))?;
    GraphDataset::from_tu(&data::load_tu_dataset(&dir)?, max_degree)
}

fn apply_common(cfg: &mut ModelConfig, c: &Common) {
    cfg.herald_hidden = c.herald_dim.unwrap_or(cfg.herald_hidden);
    cfg.sigma = c.sigma;
    cfg.dropout = c.dropout;
    cfg.bias = !c.no_bias;
    if let Some(a) = c.constant_a {
        cfg.schedule = StrengthSchedule::Constant { a };
    }
}

fn train_config(c: &Common, epochs: usize, patience: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        optimizer: match c.optimizer {
            OptimizerFlag::Adam => OptimizerKind::Adam,
            OptimizerFlag::Sgd => OptimizerKind::Sgd,
        },
        lr: c.lr,
        weight_decay: c.weight_decay,
        epochs: c.epochs.unwrap_or(epochs),
        patience,
        reg_weight: c.reg_weight,
        seed: c.seed,
        batch_size,
    }
}

fn train_node(a: NodeArgs) -> Result<(), Error> {
    let c = &a.common;
    let base = train_config(c, 300, a.patience, 1);
    base.validate()?;
    if a.runs == 0 {
        return Err(Error::Config("need at least one run".into()));
    }
    let ds = load_node(&c.dataset, a.split_seed)?;
    let mut cfg = ModelConfig::node(
        ds.num_features(),
        c.hidden.unwrap_or(64),
        ds.num_classes,
        c.layers.unwrap_or(3),
        c.herald.into(),
    );
    apply_common(&mut cfg, c);
    cfg.validate()?;
    for r in 0..a.runs {
        let tc = TrainConfig {
            seed: c.seed + r as u64,
            ..base.clone()
        };
        let dir = if a.runs == 1 {
            c.out.clone()
        } else {
            c.out.join(format!("seed-{}", tc.seed))
        };
        let (record, model) = train::train_node(&cfg, &tc, &ds)?;
        train::save_run(&dir, &record, Some(&model))?;
        println!(
            "{} herald={:?} seed={} best_epoch={} test_acc={:.4} params={} -> {}",
            record.dataset,
            record.herald,
            record.seed,
            record.best_epoch.unwrap_or(0),
            record.test_acc,
            record.parameter_count,
            dir.display()
        );
    }
    Ok(())
}

fn train_graph(a: GraphArgs) -> Result<(), Error> {
    let c = &a.common;
    let tc = train_config(c, 100, 0, a.batch_size);
    tc.validate()?;
    let ds = load_graph(&c.dataset, a.max_degree)?;
    let depth = c.layers.unwrap_or_else(|| graph_depth_for(&ds.name));
    let mut cfg = ModelConfig::graph(
        ds.num_features,
        c.hidden.unwrap_or(32),
        ds.num_classes,
        depth,
        c.herald.into(),
    );
    apply_common(&mut cfg, c);
    cfg.validate()?;
    let (record, model) = train::train_graph(&cfg, &tc, &ds, a.folds)?;
    train::save_run(&c.out, &record, Some(&model))?;
    println!(
        "{} herald={:?} folds={} mean={:.4} std={:.4} params={} -> {}",
        record.dataset,
        record.herald,
        a.folds,
        record.test_acc,
        record.test_std.unwrap_or(0.0),
        record.parameter_count,
        c.out.display()
    );
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<(), Error> {
    let ds = match a.from {
        SourceFormat::Hypergcn => data::convert_hypergcn(&a.input, &a.name, a.split, a.seed)?,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    data::save_node_dataset(&ds, &a.out)?;
    println!(
        "{}: {} nodes, {} hyperedges, {} features, {} classes -> {}",
        ds.name,
        ds.num_nodes(),
        ds.hypergraph.num_edges(),
        ds.num_features(),
        ds.num_classes,
        a.out.display()
    );
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(train::CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn eval_checkpoint(a: EvalArgs) -> Result<(), Error> {
    let model = Model::load_checkpoint(&checkpoint_path(&a.checkpoint))?;
    match model.config().readout {
        Readout::None => {
            let ds = load_node(&a.dataset, a.split_seed)?;
            let ctx = GraphContext::new(ds.hypergraph.clone())?;
            let logits = model.forward_node(&ds.features, &ctx)?;
            let test = train::evaluate(&logits, &ds.labels, &ds.test)?;
            let val = train::evaluate(&logits, &ds.labels, &ds.val)?;
            println!("{} val_acc={val:.4} test_acc={test:.4}", ds.name);
        }
        Readout::Sum => {
            let ds = load_graph(&a.dataset, a.max_degree)?;
            let contexts = train::graph_contexts(&ds)?;
            let all: Vec<usize> = (0..ds.samples.len()).collect();
            let acc = train::evaluate_graphs(&model, &ds, &contexts, &all)?;
            println!("{} acc={acc:.4} graphs={}", ds.name, all.len());
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Error> {
    let rows = train::report(&a.runs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!(
        "{:<6} {:<24} {:<9} {:>5}  accuracy",
        "task", "dataset", "herald", "runs"
    );
    for r in rows {
        println!(
            "{:<6} {:<24} {:<9} {:>5}  {:.2} ± {:.2}",
            format!("{:?}", r.task).to_lowercase(),
            r.dataset,
            format!("{:?}", r.herald).to_lowercase(),
            r.runs,
            100.0 * r.mean,
            100.0 * r.std
        );
    }
    Ok(())
}

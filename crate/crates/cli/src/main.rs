//! `csnn` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use csnn::datasets::{gen_neighborsmatch, load_graph_json, save_graph_json, NodeDataset};
use csnn::laplacian::DenseDump;
use csnn::model::{GraphContext, ModelConfig, ModelKind, Normalization};
use csnn::training::{
    neighborsmatch_setup, train, write_jsonl, Checkpoint, Schedule, NEIGHBORSMATCH_EXAMPLES,
};
use csnn::verify::{diffusion_operators, run_all};
use csnn::{DirectedSheaf, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Epochs used when neither the config file nor `--epochs` sets them.
const DEFAULT_EPOCHS: usize = 200;

const SCHEDULE_KEYS: [&str; 7] = [
    "epochs",
    "lr",
    "weight_decay",
    "seed",
    "eval_every",
    "stop_at_train_metric",
    "max_seconds",
];

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "csnn", version, about = "Cooperative sheaf diffusion on directed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a graph JSON file.
    Train(TrainArgs),
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Inspect assembled Laplacians.
    #[command(subcommand)]
    Laplacian(LaplacianCommand),
    /// Run the property harnesses.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Train CSNN and GCN on NeighborsMatch across tree depths.
    NeighborsmatchSweep(SweepArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON file with ModelConfig and schedule fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    split: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    stalk_dim: Option<usize>,
    #[arg(long)]
    hidden_channels: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// `mlp2` or `meanagg-k`.
    #[arg(long)]
    map_predictor: Option<String>,
    #[arg(long)]
    normalization: Option<String>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Batched NeighborsMatch trees as graph JSON.
    GenNeighborsmatch {
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = NEIGHBORSMATCH_EXAMPLES)]
        num_examples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Out,
    #[value(name = "in_t")]
    InT,
    Composed,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    Symmetric,
    Augmented,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::None => Normalization::None,
            NormArg::Symmetric => Normalization::Symmetric,
            NormArg::Augmented => Normalization::Augmented,
        }
    }
}

#[derive(Subcommand)]
enum LaplacianCommand {
    /// Dense JSON form of one operator.
    Dump {
        #[arg(long)]
        data: PathBuf,
        /// A checkpoint file, or `trivial` for unit maps.
        #[arg(long)]
        sheaf: String,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
        /// Layer whose predicted maps are used (checkpoints only).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Stalk dimension of the trivial sheaf.
        #[arg(long, default_value_t = 1)]
        stalk_dim: usize,
        /// Defaults to `none` for the trivial sheaf and to the model's setting
        /// for checkpoints.
        #[arg(long, value_enum)]
        normalization: Option<NormArg>,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Print a JSON pass/fail report; exits with 3 when a check fails.
    Props {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SweepArgs {
    /// `a..b` (inclusive), a comma list, or a single depth.
    #[arg(long, default_value = "2..6")]
    depths: String,
    #[arg(long, default_value = "csnn,gcn")]
    models: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = NEIGHBORSMATCH_EXAMPLES)]
    num_examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop a run once its train accuracy reaches this value.
    #[arg(long, default_value_t = 1.0)]
    stop_at: f64,
    /// Wall-clock cap per run, checked at evaluations.
    #[arg(long)]
    max_seconds: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Dataset(DatasetCommand::GenNeighborsmatch {
            depth,
            out,
            num_examples,
            seed,
        }) => cmd_gen_neighborsmatch(depth, num_examples, seed, &out),
        Command::Laplacian(LaplacianCommand::Dump {
            data,
            sheaf,
            which,
            out,
            layer,
            stalk_dim,
            normalization,
        }) => cmd_dump(&data, &sheaf, which, &out, layer, stalk_dim, normalization),
        Command::Verify(VerifyCommand::Props { seed, out }) => cmd_verify(seed, out.as_deref()),
        Command::NeighborsmatchSweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn load_dataset(path: &Path) -> CliResult<NodeDataset> {
    if !path.is_file() {
        return Err(Failure::Data(format!("{}: no such file", path.display())));
    }
    load_graph_json(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Splits a flat config object into model and schedule parts, filling
/// `input_dim` and `num_classes` from the data when absent.
fn resolve_config(file: Option<&Path>, args: &TrainArgs, ds: &NodeDataset) -> CliResult<(ModelConfig, Schedule)> {
    let mut model_map = match file {
        None => Map::new(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Failure::Usage(format!("{}: config must be a JSON object", p.display()))),
                Err(e) => return Err(Failure::Usage(format!("{}: {e}", p.display()))),
            }
        }
    };
    let mut sched_map = Map::new();
    for key in SCHEDULE_KEYS {
        if let Some(v) = model_map.remove(key) {
            sched_map.insert(key.into(), v);
        }
    }
    sched_map.entry("epochs").or_insert(DEFAULT_EPOCHS.into());
    model_map.entry("input_dim").or_insert(ds.num_features().into());
    model_map.entry("num_classes").or_insert(ds.num_classes().into());

    let set = |m: &mut Map<String, Value>, key: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(key.into(), v);
        }
    };
    set(&mut sched_map, "epochs", args.epochs.map(Into::into));
    set(&mut sched_map, "lr", args.lr.map(Into::into));
    set(&mut sched_map, "weight_decay", args.weight_decay.map(Into::into));
    set(&mut sched_map, "eval_every", args.eval_every.map(Into::into));
    set(&mut sched_map, "seed", args.seed.map(Into::into));
    set(&mut model_map, "model", args.model.clone().map(Into::into));
    set(&mut model_map, "stalk_dim", args.stalk_dim.map(Into::into));
    set(&mut model_map, "hidden_channels", args.hidden_channels.map(Into::into));
    set(&mut model_map, "num_layers", args.num_layers.map(Into::into));
    set(&mut model_map, "map_predictor", args.map_predictor.clone().map(Into::into));
    set(&mut model_map, "normalization", args.normalization.clone().map(Into::into));

    let config: ModelConfig =
        serde_json::from_value(Value::Object(model_map)).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    let schedule: Schedule =
        serde_json::from_value(Value::Object(sched_map)).map_err(|e| Failure::Usage(format!("schedule: {e}")))?;
    config.validate()?;
    schedule.validate()?;
    if config.input_dim != ds.num_features() || config.num_classes != ds.num_classes() {
        return Err(Failure::Data(format!(
            "config expects {} features and {} classes, data has {} and {}",
            config.input_dim,
            config.num_classes,
            ds.num_features(),
            ds.num_classes()
        )));
    }
    Ok((config, schedule))
}

/// One flat object that can be fed back as `--config`.
fn effective_config(config: &ModelConfig, schedule: &Schedule) -> Value {
    let mut m = match serde_json::to_value(config).expect("serializable") {
        Value::Object(m) => m,
        _ => unreachable!("ModelConfig serializes to an object"),
    };
    if let Value::Object(s) = serde_json::to_value(schedule).expect("serializable") {
        m.extend(s);
    }
    Value::Object(m)
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&args.data)?;
    if args.split >= ds.splits.len() {
        return Err(Failure::Usage(format!("split {} requested, data has {}", args.split, ds.splits.len())));
    }
    let (config, schedule) = resolve_config(args.config.as_deref(), &args, &ds)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("config.json"), &pretty(&effective_config(&config, &schedule)))?;

    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let outcome = train(&config, &ds, args.split, &schedule, |rec| {
        write_jsonl(&mut metrics, rec)?;
        metrics.flush()?;
        Ok(())
    })?;
    write_file(&args.out.join("checkpoint.json"), &(outcome.best.to_json()? + "\n"))?;
    let summary = serde_json::json!({
        "data": args.data.display().to_string(),
        "split": args.split,
        "num_parameters": outcome.best.to_model()?.num_parameters(),
        "best": outcome.best_record,
        "last": outcome.history.last(),
    });
    write_file(&args.out.join("summary.json"), &pretty(&summary))?;
    println!("{}", serde_json::to_string(&outcome.best_record).expect("serializable"));
    Ok(())
}

fn cmd_gen_neighborsmatch(depth: usize, num_examples: usize, seed: u64, out: &Path) -> CliResult<()> {
    let nm = gen_neighborsmatch(depth, num_examples, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_graph_json(&nm.dataset, out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))
}

fn cmd_dump(
    data: &Path,
    sheaf_arg: &str,
    which: Which,
    out: &Path,
    layer: usize,
    stalk_dim: usize,
    normalization: Option<NormArg>,
) -> CliResult<()> {
    let ds = load_dataset(data)?;
    let g = &ds.graph;
    let (sheaf, default_norm) = if sheaf_arg == "trivial" {
        if stalk_dim == 0 {
            return Err(Failure::Usage("stalk dimension must be positive".into()));
        }
        (DirectedSheaf::constant(g.num_nodes(), stalk_dim), Normalization::None)
    } else {
        let path = Path::new(sheaf_arg);
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let model = Checkpoint::from_json(&text)?.to_model()?;
        if model.config.model != ModelKind::Csnn {
            return Err(Failure::Data(format!("{sheaf_arg}: checkpoint holds a GCN, which has no sheaf")));
        }
        let mut sheaves = model.layer_sheaves(&GraphContext::new(g), &ds.features)?;
        if layer >= sheaves.len() {
            return Err(Failure::Usage(format!("layer {layer} requested, model has {}", sheaves.len())));
        }
        (sheaves.swap_remove(layer), model.config.normalization)
    };
    let norm = normalization.map_or(default_norm, Normalization::from);
    let (in_t, out_op) = diffusion_operators(&sheaf, g, norm)?;
    let normalized = norm != Normalization::None;
    let dump = match which {
        Which::Out => DenseDump::from_operator("out", &out_op),
        Which::InT => DenseDump::from_operator("in_t", &in_t),
        Which::Composed => {
            let m = in_t.to_dense().matmul(&out_op.to_dense())?;
            DenseDump::from_dense("composed", g.num_nodes(), sheaf.dimension(), normalized, &m)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, &pretty(&dump))
}

fn cmd_verify(seed: u64, out: Option<&Path>) -> CliResult<()> {
    let report = run_all(seed)?;
    let text = pretty(&report);
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_file(path, &text)?;
    }
    print!("{text}");
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<_> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
        Err(Failure::Verify(failed.join(", ")))
    }
}

fn parse_depths(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || Failure::Usage(format!("cannot parse depths {spec:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let depths = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<CliResult<Vec<_>>>()?
    };
    if depths.is_empty() {
        return Err(bad());
    }
    Ok(depths)
}

fn parse_models(spec: &str) -> CliResult<Vec<ModelKind>> {
    spec.split(',')
        .map(|m| {
            serde_json::from_value(Value::String(m.trim().to_string()))
                .map_err(|_| Failure::Usage(format!("unknown model {m:?}; expected csnn or gcn")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let depths = parse_depths(&args.depths)?;
    let models = parse_models(&args.models)?;
    create_dir(&args.out)?;
    let summary_path = args.out.join("summary.jsonl");
    let mut summary = fs::File::create(&summary_path).map_err(|e| io_err(&summary_path, e))?;
    for &depth in &depths {
        let nm = gen_neighborsmatch(depth, args.num_examples, args.seed)?;
        for &kind in &models {
            let (config, mut schedule) = neighborsmatch_setup(&nm, kind, args.seed, args.stop_at);
            if let Some(e) = args.epochs {
                schedule.epochs = e;
            }
            schedule.max_seconds = args.max_seconds;
            let name = format!("{}-r{depth}", serde_json::to_value(kind).expect("serializable").as_str().unwrap_or("model"));
            let dir = args.out.join(&name);
            create_dir(&dir)?;
            write_file(&dir.join("config.json"), &pretty(&effective_config(&config, &schedule)))?;
            let metrics_path = dir.join("metrics.jsonl");
            let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
            let start = Instant::now();
            let outcome = train(&config, &nm.dataset, 0, &schedule, |rec| {
                write_jsonl(&mut metrics, rec)?;
                metrics.flush()?;
                Ok(())
            })?;
            let best = &outcome.best_record;
            let line = serde_json::json!({
                "depth": depth,
                "model": kind,
                "num_examples": args.num_examples,
                "epochs_run": outcome.history.last().map_or(0, |r| r.epoch),
                "train_accuracy": best.train_metric,
                "test_accuracy": best.test_metric,
                "best_epoch": best.epoch,
                "seconds": start.elapsed().as_secs_f64(),
            });
            writeln!(summary, "{line}").map_err(|e| io_err(&summary_path, e))?;
            eprintln!("{name}: train {:.3} after {:.1}s", best.train_metric, start.elapsed().as_secs_f64());
            println!("{line}");
        }
    }
    Ok(())
}

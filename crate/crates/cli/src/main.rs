use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pvg_core::diagnostics::{graph_stats, trace_diversity};
use pvg_core::net::{count_params_flops, Model, ModelConfig, TopologyMode};
use pvg_core::train::{
    evaluate, image_at, load_checkpoint, load_dataset, load_images, train, DataSource, RunConfig,
};
use pvg_core::{Error, Result, Tape};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pvg", version, about = "Train and inspect progressive vision graph models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    First,
    Second,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image tensor, overriding the config's data source.
        #[arg(long, requires = "labels")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        labels: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Top-1 accuracy and mean loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Per-block diversity trace as CSV.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "diag")]
        run_id: String,
    },
    /// k-NN edges of one block for one image as CSV.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long)]
        block: usize,
        #[arg(long, value_enum, default_value = "first")]
        group: Group,
        #[arg(long)]
        out: PathBuf,
        /// Also write `metric,value` graph statistics here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Analytic parameter and multiply-add count.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            labels,
            output_dir,
        } => {
            let mut run = RunConfig::from_json_file(&config)?;
            if let (Some(images), Some(labels)) = (data, labels) {
                run.data = Some(DataSource::Files { images, labels });
            }
            if let Some(dir) = output_dir {
                run.output_dir = dir;
            }
            let source = run
                .data
                .clone()
                .ok_or_else(|| Error::Config("no data source in config and no --data/--labels".into()))?;
            let dataset = source.load(run.model.num_classes)?;
            let out = train(&run, &dataset)?;
            let last = out.history.last();
            println!(
                "{}",
                json!({
                    "epochs": out.history.len(),
                    "train_loss": last.map(|m| m.train_loss),
                    "train_acc": last.map(|m| m.train_acc),
                    "checkpoint": out.checkpoint_dir,
                    "metrics": out.metrics_path,
                })
            );
        }
        Command::Eval {
            checkpoint,
            data,
            labels,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data, &labels, model.config().num_classes)?;
            let r = evaluate(&model, &dataset)?;
            println!("{}", json!({"accuracy": r.accuracy, "loss": r.loss, "n": dataset.len()}));
        }
        Command::Diag {
            checkpoint,
            data,
            out,
            limit,
            run_id,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let images = load_images(&data)?;
            let n = limit.unwrap_or(usize::MAX).min(images.shape()[0]);
            let batch: Vec<_> = (0..n).map(|i| image_at(&images, i)).collect();
            let trace = trace_diversity(&model, &batch, &run_id)?;
            trace.write_csv(create(&out)?, true)?;
        }
        Command::ExportGraph {
            checkpoint,
            data,
            image,
            block,
            group,
            out,
            stats,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let images = load_images(&data)?;
            if image >= images.shape()[0] {
                return Err(Error::Range(format!("image {image} of {}", images.shape()[0])));
            }
            if block >= model.num_blocks() {
                return Err(Error::Range(format!("block {block} of {}", model.num_blocks())));
            }
            let topo = block_graph(&model, &image_at(&images, image), block, group)?;
            topo.write_edges(block, create(&out)?, true)?;
            if let Some(path) = stats {
                graph_stats(&topo, None)?.write_csv(create(&path)?)?;
            }
        }
        Command::Count { config } => {
            let text = read_text(&config)?;
            let model: ModelConfig = match serde_json::from_str::<RunConfig>(&text) {
                Ok(run) => run.model,
                Err(_) => serde_json::from_str(&text)?,
            };
            let cost = count_params_flops(&model)?;
            println!("{}", json!({"params": cost.params, "mult_adds": cost.mult_adds}));
        }
    }
    Ok(())
}

fn block_graph(
    model: &Model<f32>,
    image: &pvg_core::Tensor<f32>,
    block: usize,
    group: Group,
) -> Result<pvg_core::graph::GraphTopology> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let f = model.forward(&mut tape, &vars, x, TopologyMode::Build)?;
    let graphs = f.graphs.into_iter().nth(block).unwrap_or_default();
    match group {
        Group::First => graphs.first,
        Group::Second => graphs.second,
    }
    .ok_or_else(|| Error::Range(format!("block {block} has no {} group", group_name(group))))
}

fn group_name(g: Group) -> &'static str {
    match g {
        Group::First => "first-order",
        Group::Second => "second-order",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

//! Data, optimisation and run orchestration.

mod checkpoint;
mod data;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::diagnostics::trace_diversity;
use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::ops;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ManifestEntry, MANIFEST};
pub use data::{image_at, load_dataset, load_images, patch_dataset, red_blue_oracle, Dataset, PATCH_COLORS};
pub use optim::{learning_rate, AdamW, OptimizerConfig, ScheduleConfig};

/// Where a run reads its training images from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files { images: PathBuf, labels: PathBuf },
    /// Generated with [`patch_dataset`].
    Synthetic { n: usize, size: usize, patch: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self, num_classes: usize) -> Result<Dataset> {
        match self {
            DataSource::Files { images, labels } => load_dataset(images, labels, num_classes),
            DataSource::Synthetic { n, size, patch, seed } => {
                if num_classes != 2 {
                    return Err(Error::Config(format!(
                        "the synthetic patch set has 2 classes, model has {num_classes}"
                    )));
                }
                patch_dataset(*n, *size, *patch, *seed)
            }
        }
    }
}

fn default_run_id() -> String {
    "run".into()
}
fn default_diversity_every() -> usize {
    1
}
fn default_diversity_images() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Epochs between diversity traces; the last epoch is always traced.
    #[serde(default = "default_diversity_every")]
    pub diversity_every: usize,
    /// Leading training images used for each diversity trace.
    #[serde(default = "default_diversity_images")]
    pub diversity_images: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !o.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", o.lr)));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1), weight decay ≥ 0, eps > 0".into()));
        }
        if self.schedule.total_steps < self.schedule.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} is below warmup_steps {}",
                self.schedule.total_steps, self.schedule.warmup_steps
            )));
        }
        if self.batch_size == 0 || self.diversity_every == 0 {
            return Err(Error::Config("batch_size and diversity_every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let run: RunConfig = serde_json::from_str(&text)?;
        run.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimiser steps completed so far.
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub diversity_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

/// Top-1 accuracy and mean cross-entropy, one image at a time.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("evaluation over an empty dataset".into()));
    }
    let k = model.config().num_classes;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for i in 0..data.len() {
        let logits = model.logits(&data.image(i))?;
        let label = data.labels[i];
        if label >= k {
            return Err(Error::Range(format!("label {label} at row {i} for {k} classes")));
        }
        let row = logits.reshape(vec![1, k])?;
        let (l, _) = ops::softmax_cross_entropy(&row, &[label])?;
        loss += l as f64;
        let pred = row
            .data()
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row.data()[best] { j } else { best });
        correct += usize::from(pred == label);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

pub fn evaluate_checkpoint(dir: &Path, data: &Dataset) -> Result<EvalReport> {
    evaluate(&load_checkpoint(dir)?, data)
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "train_loss", "train_acc", "lr"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.train_acc),
            format!("{}", r.lr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs `run.schedule.total_steps` AdamW steps over shuffled minibatches.
///
/// After every epoch the whole training set is evaluated with
/// [`evaluate`]; those numbers are the logged `train_loss` and `train_acc`.
/// Writes `metrics.csv`, `diversity.csv` and `checkpoint/` under
/// `run.output_dir`.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.model;
    let [h, w, c] = data.image_shape();
    if [h, w] != cfg.image_size || c != cfg.in_channels {
        return Err(Error::Config(format!(
            "dataset images are {h}×{w}×{c}, model expects {}×{}×{}",
            cfg.image_size[0], cfg.image_size[1], cfg.in_channels
        )));
    }
    if let Some((row, &l)) = data.labels.iter().enumerate().find(|(_, &l)| l >= cfg.num_classes) {
        return Err(Error::Range(format!("label {l} at row {row} for {} classes", cfg.num_classes)));
    }
    fs::create_dir_all(&run.output_dir).map_err(|e| Error::io(&run.output_dir, e))?;
    let metrics_path = run.output_dir.join("metrics.csv");
    let diversity_path = run.output_dir.join("diversity.csv");
    let checkpoint_dir = run.output_dir.join("checkpoint");

    let mut model = Model::<f32>::new(cfg.clone(), run.seed)?;
    let mut opt = AdamW::new(run.optimizer.clone(), model.params().tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let probe: Vec<Tensor<f32>> = (0..data.len().min(run.diversity_images)).map(|i| data.image(i)).collect();

    let n = data.len();
    let total = run.schedule.total_steps;
    let steps_per_epoch = n.div_ceil(run.batch_size);
    let epochs = total.div_ceil(steps_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut diversity_csv = Vec::new();
    let mut step = 0;
    let mut lr = 0.0;
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(run.batch_size) {
            if step == total {
                break;
            }
            lr = learning_rate(run.optimizer.lr, &run.schedule, step);
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| data.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape, true);
            let (logits, _) = model.forward_batch(&mut tape, &vars, &images)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at step {step}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
                .collect();
            opt.step(model.params_mut().tensors_mut(), &grads, lr)?;
            step += 1;
        }
        let report = evaluate(&model, data)?;
        if !report.loss.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss {} after step {step}", report.loss)));
        }
        log::info!(
            "epoch {epoch} step {step} loss {:.4} acc {:.4} lr {lr:.3e}",
            report.loss,
            report.accuracy
        );
        history.push(EpochMetrics {
            epoch,
            step,
            train_loss: report.loss,
            train_acc: report.accuracy,
            lr,
        });
        write_metrics(&metrics_path, &history)?;
        if (epoch + 1) % run.diversity_every == 0 || epoch + 1 == epochs {
            let trace = trace_diversity(&model, &probe, &format!("{}-epoch{epoch}", run.run_id))?;
            let header = diversity_csv.is_empty();
            trace.write_csv(&mut diversity_csv, header)?;
            fs::write(&diversity_path, &diversity_csv).map_err(|e| Error::io(&diversity_path, e))?;
        }
    }
    if history.is_empty() {
        write_metrics(&metrics_path, &history)?;
    }
    save_checkpoint(&checkpoint_dir, &model)?;
    Ok(TrainOutcome {
        model,
        history,
        metrics_path,
        diversity_path,
        checkpoint_dir,
    })
}

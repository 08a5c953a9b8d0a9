//! Losses, metrics, the training loop and checkpoints.

mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig, Schedule};

use crate::autograd::cross_entropy_value;
use crate::data::tsr::{self, AnyTensor};
use crate::data::{augment, Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::nn::{ForwardCtx, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Mean softmax cross-entropy of (N,K) logits, as a scalar tensor.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    Ok(Tensor::scalar(cross_entropy_value(logits, labels)?))
}

/// Averages a (N,1,H,W) mask down to (N,1,h,w) by repeated 2x2 pooling, so
/// each cell holds the foreground fraction of the pixels it covers.
pub fn mask_at_resolution<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut m = mask.clone();
    loop {
        let d = m.nchw("mask_at_resolution")?;
        if d[2] == h && d[3] == w {
            return Ok(m);
        }
        if d[2] < h || d[3] < w || d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "mask_at_resolution",
                msg: format!("cannot pool a {}x{} mask to {h}x{w}", mask.dims()[2], mask.dims()[3]),
            });
        }
        m = tensor::avgpool2x2(&m)?;
    }
}

/// Per-sample selector mass on the foreground, averaged over selector sites:
/// the sum of S weighted by the mask pooled to the selector's resolution.
pub fn selector_fg_mass<T: Scalar>(maps: &[&Tensor<T>], masks: &Tensor<T>) -> Result<Vec<f64>> {
    let n = masks.nchw("selector_fg_mass")?[0];
    if maps.is_empty() {
        return Err(Error::InvalidArgument("selector_fg_mass: no selector maps".into()));
    }
    let mut out = vec![0.0; n];
    for map in maps {
        let d = map.nchw("selector_fg_mass")?;
        tensor::check_axis("selector_fg_mass", "batch", n, d[0])?;
        tensor::check_axis("selector_fg_mass", "channels", 1, d[1])?;
        let pooled = mask_at_resolution(masks, d[2], d[3])?;
        let plane = d[2] * d[3];
        for (i, (s, m)) in map
            .data()
            .chunks_exact(plane)
            .zip(pooled.data().chunks_exact(plane))
            .enumerate()
        {
            out[i] += s.iter().zip(m).map(|(&a, &b)| (a * b).to_f64_lossy()).sum::<f64>();
        }
    }
    for v in &mut out {
        *v /= maps.len() as f64;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` without masks or without selector sites.
    pub selector_fg_mass: Option<f64>,
    /// `None` without masks.
    pub fg_area_frac: Option<f64>,
}

/// Sums that merge in a fixed order, so totals do not depend on how
/// batches were distributed over threads.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    samples: usize,
    loss: f64,
    correct: usize,
    mass: Option<f64>,
    area: Option<f64>,
}

impl Tally {
    fn from_batch<T: Scalar>(logits: &Tensor<T>, loss: f64, batch: &Batch<T>, maps: &[&Tensor<T>]) -> Result<Self> {
        let n = batch.labels.len();
        let pred = tensor::argmax_channel(logits)?;
        let correct = pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        let (mass, area) = match &batch.masks {
            Some(m) => {
                let area = m.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / (m.numel() / n) as f64;
                let mass = if maps.is_empty() {
                    None
                } else {
                    Some(selector_fg_mass(maps, m)?.iter().sum())
                };
                (mass, Some(area))
            }
            None => (None, None),
        };
        Ok(Tally {
            samples: n,
            loss: loss * n as f64,
            correct,
            mass,
            area,
        })
    }

    fn merge(self, other: Tally) -> Tally {
        if self.samples == 0 {
            return other;
        }
        if other.samples == 0 {
            return self;
        }
        let both = |a: Option<f64>, b: Option<f64>| Some(a? + b?);
        Tally {
            samples: self.samples + other.samples,
            loss: self.loss + other.loss,
            correct: self.correct + other.correct,
            mass: both(self.mass, other.mass),
            area: both(self.area, other.area),
        }
    }

    fn metrics(&self) -> Metrics {
        let n = self.samples.max(1) as f64;
        Metrics {
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            selector_fg_mass: self.mass.map(|m| m / n),
            fg_area_frac: self.area.map(|a| a / n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: Split,
    pub metrics: Metrics,
}

pub const CSV_HEADER: &str = "epoch,split,loss,accuracy,selector_fg_mass";

/// One CSV row per record; a missing selector mass is an empty field.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        let mass = r.metrics.selector_fg_mass.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.split.as_str(),
            r.metrics.loss,
            r.metrics.accuracy,
            mass
        );
    }
    out
}

fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random mirror and shift of training samples.
    pub augment: bool,
    /// Fraction of the training set held out for validation; 0 disables it.
    pub val_frac: f64,
    /// Worker threads for data prefetch and evaluation. Results do not
    /// depend on it.
    #[serde(skip_serializing, default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    /// Batch 32, 20 epochs, no augmentation.
    pub fn desk_synthetic(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed,
            augment: false,
            val_frac: 0.1,
            threads: 1,
        }
    }

    /// Batch 32, 5 epochs, mirror and shift augmentation.
    pub fn desk_cifar(seed: u64) -> Self {
        TrainConfig {
            epochs: 5,
            augment: true,
            ..Self::desk_synthetic(seed)
        }
    }

    /// Batch 64 for 300 epochs.
    pub fn full_sgd(seed: u64) -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            ..Self::desk_cifar(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::InvalidArgument(format!("val_frac {} outside [0, 1)", self.val_frac)));
        }
        Ok(())
    }
}

/// Adam at lr 0.01, divided by 10 at 50% and 75% of the epoch budget.
pub fn desk_optimizer() -> OptimizerConfig {
    OptimizerConfig::Adam {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        schedule: Schedule::StepAtFractions {
            fractions: vec![0.5, 0.75],
            divisor: 10.0,
        },
    }
}

pub const PRESETS: &[&str] = &["desk-synthetic", "desk-cifar", "full-sgd"];

/// Named training presets together with their optimizer.
pub fn preset(name: &str, seed: u64) -> Option<(TrainConfig, OptimizerConfig)> {
    match name {
        "desk-synthetic" => Some((TrainConfig::desk_synthetic(seed), desk_optimizer())),
        "desk-cifar" => Some((TrainConfig::desk_cifar(seed), desk_optimizer())),
        "full-sgd" => Some((TrainConfig::full_sgd(seed), OptimizerConfig::full_sgd())),
        _ => None,
    }
}

fn build_batches<T: Scalar>(
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    aug: Option<&mut ChaCha8Rng>,
    tx: &mpsc::SyncSender<Result<Batch<T>>>,
) {
    let mut aug = aug;
    for chunk in order.chunks(batch_size) {
        let batch = match aug.as_deref_mut() {
            Some(rng) => {
                let samples: Vec<_> = chunk.iter().map(|&i| augment(&data.samples()[i], rng)).collect();
                crate::data::stack(&samples.iter().collect::<Vec<_>>())
            }
            None => data.batch(chunk),
        };
        if tx.send(batch).is_err() {
            return;
        }
    }
}

fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    batch: &Batch<T>,
    epoch: usize,
    index: usize,
) -> Result<Tally> {
    let snapshot: ParamSet<T> = model.params.clone();
    let mut ctx = ForwardCtx::new(&snapshot, true);
    let images = ctx.graph.input(batch.images.clone());
    let rec = model.record(&mut ctx, images)?;
    let loss = ctx.graph.cross_entropy(rec.logits, &batch.labels)?;
    let loss_value = ctx.graph.expect_value(loss)?.data()[0].to_f64_lossy();
    if !loss_value.is_finite() {
        return Err(Error::Diverged { epoch, batch: index });
    }
    let maps = rec
        .selectors
        .iter()
        .map(|&(_, s)| ctx.graph.expect_value(s))
        .collect::<Result<Vec<_>>>()?;
    let tally = Tally::from_batch(ctx.graph.expect_value(rec.logits)?, loss_value, batch, &maps)?;
    let grads = ctx.graph.backward(loss)?;
    let param_grads = ctx.param_grads(&grads);
    ctx.commit_stats(&mut model.params);
    optimizer.step(&mut model.params, &param_grads)?;
    Ok(tally)
}

/// Trains `model` in place. The dataset is split into train and validation
/// parts, each epoch reshuffles the train part, and both parts are scored
/// after every epoch. Everything random derives from `config.seed`.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    optimizer: &mut Optimizer<T>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_loop_with(model, dataset, optimizer, config, |_| {})
}

/// [`train_loop`] with a callback invoked for every record as it is produced.
pub fn train_loop_with<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    optimizer: &mut Optimizer<T>,
    config: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let held = (config.val_frac * dataset.len() as f64).round() as usize;
    let (train, val) = if held > 0 && held < dataset.len() {
        let (t, v) = dataset.split(config.val_frac, config.seed)?;
        (t, Some(v))
    } else {
        (dataset.clone(), None)
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..config.epochs {
        optimizer.set_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut tally = Tally::default();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(2);
            let aug = config.augment.then_some(&mut aug_rng);
            let (train, order) = (&train, &order);
            scope.spawn(move || build_batches::<T>(train, order, config.batch_size, aug, &tx));
            for (index, batch) in rx.iter().enumerate() {
                tally = tally.merge(train_batch(model, optimizer, &batch?, epoch + 1, index)?);
            }
            Ok(())
        })?;
        let record = EpochRecord {
            epoch: epoch + 1,
            split: Split::Train,
            metrics: tally.metrics(),
        };
        on_record(&record);
        history.push(record);
        if let Some(val) = &val {
            let record = EpochRecord {
                epoch: epoch + 1,
                split: Split::Val,
                metrics: evaluate(model, val, config.batch_size, config.threads)?,
            };
            on_record(&record);
            history.push(record);
        }
    }
    Ok(history)
}

/// Eval-mode metrics over `dataset`. Batches are spread over up to
/// `threads` threads; the result is independent of the thread count.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize, threads: usize) -> Result<Metrics> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size).collect();
    let score = |chunk: &[usize]| -> Result<Tally> {
        let batch = dataset.batch::<T>(chunk)?;
        let out = model.predict(&batch.images)?;
        let loss = cross_entropy_value(&out.logits, &batch.labels)?.to_f64_lossy();
        let maps: Vec<_> = out.selector_maps.iter().map(|m| &m.map).collect();
        Tally::from_batch(&out.logits, loss, &batch, &maps)
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    let tallies: Vec<Result<Tally>> = if threads == 1 {
        chunks.iter().map(|c| score(c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(|| group.iter().map(|c| score(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut total = Tally::default();
    for t in tallies {
        total = total.merge(t?);
    }
    Ok(total.metrics())
}

/// Name of the checkpoint entry that carries the model configuration as
/// JSON, one UTF-8 byte per f32 element.
pub const CONFIG_ENTRY: &str = "__config__";

pub fn checkpoint_entries<T: Scalar>(model: &Model<T>) -> Result<tsr::Entries> {
    let json = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let header = Tensor::from_vec(&[json.len()], json.iter().map(|&b| b as f32).collect())?;
    let mut entries = vec![(CONFIG_ENTRY.to_string(), AnyTensor::F32(header))];
    for (_, p) in model.params.iter() {
        entries.push((p.name.clone(), AnyTensor::from_tensor(&p.value)));
    }
    Ok(entries)
}

pub fn model_from_entries<T: Scalar>(entries: &[(String, AnyTensor)]) -> Result<Model<T>> {
    let header = tsr::entry(entries, CONFIG_ENTRY)?.to::<f32>();
    let bytes = header
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format("checkpoint config header is not a byte string".into()))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    let template = Model::<T>::new(config.clone(), 0)?;
    let mut params = template.params.clone();
    let values: Vec<(String, Tensor<T>)> = entries
        .iter()
        .filter(|(name, _)| name != CONFIG_ENTRY)
        .map(|(name, t)| (name.clone(), t.to::<T>()))
        .collect();
    if values.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model expects {}",
            values.len(),
            params.len()
        )));
    }
    params.load_from(&values)?;
    Model::from_params(config, params)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    tsr::write_file(path, &checkpoint_entries(model)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    model_from_entries(&tsr::read_file(path)?)
}

//! SGD training loop with momentum, deterministic epoch shuffling,
//! resumable optimizer state, and a finite-difference gradient checker.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{config_meta, model_from_container, read_container, write_container};
use crate::embedding::ClipFeatures;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, predictions};
use crate::loss::total_loss;
use crate::metrics::{evaluate, Metrics};
use crate::model::{Model, ModelConfig, Trace};
use crate::synth::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Seed for batch shuffling; independent of the model-init seed.
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            model: ModelConfig::desk_default(),
            lr: 0.001,
            momentum: 0.9,
            epochs: 50,
            batch_size: 4,
            lambda: 1.0,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-epoch training record; losses are means over all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_compact: f64,
    pub train_uar: f64,
    pub train_war: f64,
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub final_metrics: Metrics,
}

/// Mixes an epoch (or any stream index) into a seed; splitmix64 finalizer.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_dataset(config: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let (f, h, w, c) = dataset.geometry();
    if (f, h, w, c) != (config.frames, config.height, config.width, config.channels) {
        return Err(Error::contract(format!(
            "dataset geometry ({f}, {h}, {w}, {c}) does not match model ({}, {}, {}, {})",
            config.frames, config.height, config.width, config.channels
        )));
    }
    if dataset.num_classes != config.num_classes {
        return Err(Error::contract(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes, config.num_classes
        )));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::ClassIndex { index: bad, classes: config.num_classes });
    }
    Ok(())
}

/// Owns a model mid-training together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    velocity: Vec<Tensor>,
    next_epoch: usize,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone())?;
        let velocity = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            model,
            velocity,
            next_epoch: 1,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// 1-based number of the epoch the next [`run_epoch`](Self::run_epoch)
    /// call will execute.
    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// One pass over the dataset: shuffled mini-batches, one gradient step
    /// per batch on the mean batch loss, then an evaluation pass for the
    /// epoch record.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        check_dataset(&self.config.model, dataset)?;
        let epoch = self.next_epoch;

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_compact = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let traced = self.model.traced_copy(&mut tape, Trace::All)?;
            let mut batch_loss: Option<Tensor> = None;
            for &i in batch {
                let out = traced.forward(&mut tape, &dataset.clips[i])?;
                let loss = total_loss(&mut tape, &out.logits, dataset.labels[i], self.config.lambda)?;
                sum_total += loss.total.item();
                sum_ce += loss.cross_entropy;
                sum_compact += loss.compact_term;
                batch_loss = Some(match batch_loss {
                    None => loss.total,
                    Some(acc) => tape.add(&acc, &loss.total)?,
                });
            }
            let mean = tape.scale(&batch_loss.expect("chunks are never empty"), 1.0 / batch.len() as f64)?;
            if !mean.item().is_finite() {
                return Err(Error::NonFinite { op: "train" });
            }
            let grads = tape.backward(&mean)?;
            let (lr, momentum) = (self.config.lr, self.config.momentum);
            for (((_, leaf), vel), (_, param)) in traced
                .named_params()
                .iter()
                .zip(self.velocity.iter_mut())
                .zip(self.model.named_params_mut())
            {
                let g = grads.wrt(leaf).expect("every traced leaf has a gradient");
                for ((v, &g), p) in vel
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(param.data_mut().iter_mut())
                {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }

        let preds = predictions(&self.model, dataset)?;
        let metrics = evaluate(&preds, &dataset.labels, self.config.model.num_classes)?;
        self.next_epoch += 1;
        Ok(EpochRecord {
            epoch,
            loss_total: sum_total / dataset.len() as f64,
            loss_ce: sum_ce / dataset.len() as f64,
            loss_compact: sum_compact / dataset.len() as f64,
            train_uar: metrics.uar,
            train_war: metrics.war,
        })
    }

    /// Persists model, optimizer velocity, and epoch position in the
    /// checkpoint container; the file also loads as a plain model.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut meta = config_meta(&self.config.model);
        meta.push(("next_epoch".into(), self.next_epoch.to_string()));
        let mut tensors = self.model.named_params();
        let names: Vec<String> = (0..self.velocity.len())
            .map(|i| format!("opt.velocity.{i}"))
            .collect();
        for (name, v) in names.iter().zip(&self.velocity) {
            tensors.push((name.clone(), v));
        }
        write_container(path, &meta, &tensors)
    }

    /// Restores a trainer saved by [`save_state`](Self::save_state).
    /// `config` supplies the optimizer hyperparameters and must describe
    /// the same model the state was saved from.
    pub fn load_state(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let container = read_container(path)?;
        let model = model_from_container(&container)?;
        if model.config != config.model {
            return Err(Error::config(
                "training state was saved from a different model config",
            ));
        }
        let next_epoch: usize = container
            .meta_value("next_epoch")
            .ok_or_else(|| Error::config("not a training state: missing next_epoch"))?
            .parse()
            .map_err(|_| Error::config("next_epoch is not an integer"))?;
        let by_name: HashMap<&str, &Tensor> = container
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut velocity = Vec::new();
        for (i, (name, param)) in model.named_params().iter().enumerate() {
            let key = format!("opt.velocity.{i}");
            let v = *by_name
                .get(key.as_str())
                .ok_or_else(|| Error::config(format!("training state is missing {key} ({name})")))?;
            if v.shape() != param.shape() {
                return Err(Error::Dimension {
                    op: "load_state",
                    lhs: v.shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            velocity.push(v.clone());
        }
        Ok(Trainer {
            model,
            velocity,
            next_epoch,
            config,
        })
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Model, RunHistory)> {
    let mut trainer = Trainer::new(config.clone())?;
    check_dataset(&config.model, dataset)?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        records.push(trainer.run_epoch(dataset)?);
    }
    let final_metrics = evaluate_model(trainer.model(), dataset)?;
    Ok((trainer.into_model(), RunHistory { records, final_metrics }))
}

/// One parameter tensor's worst finite-difference disagreement.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

const FD_STEP: f64 = 1e-5;

fn loss_value(model: &Model, clip: &ClipFeatures, target: usize, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, clip)?;
    Ok(total_loss(&mut tape, &out.logits, target, lambda)?.total.item())
}

/// Compares the reverse-mode gradient of the training loss against central
/// finite differences, parameter by parameter, on one deterministic clip.
/// `trace` narrows the check (`Trace::HeadOnly` checks just the
/// classification head).
pub fn gradcheck(config: &ModelConfig, trace: Trace) -> Result<GradCheckReport> {
    config.validate()?;
    let model = Model::init(config.clone())?;
    let target = 0;
    let lambda = 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6D1C));
    let shape = vec![config.frames, config.height, config.width, config.channels];
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let clip = ClipFeatures::new(Tensor::new(shape, data)?)?;

    let mut tape = Tape::new();
    let traced = model.traced_copy(&mut tape, trace)?;
    let out = traced.forward(&mut tape, &clip)?;
    let loss = total_loss(&mut tape, &out.logits, target, lambda)?;
    let grads = tape.backward(&loss.total)?;

    let mut work = model.clone();
    let mut entries = Vec::new();
    for (idx, (name, leaf)) in traced.named_params().iter().enumerate() {
        if leaf.grad_id().is_none() {
            continue;
        }
        let analytic = grads.wrt(leaf).expect("traced leaf has a gradient");
        let mut worst = 0.0;
        for e in 0..analytic.numel() {
            let base = work.named_params()[idx].1.data()[e];
            work.named_params_mut()[idx].1.data_mut()[e] = base + FD_STEP;
            let plus = loss_value(&work, &clip, target, lambda)?;
            work.named_params_mut()[idx].1.data_mut()[e] = base - FD_STEP;
            let minus = loss_value(&work, &clip, target, lambda)?;
            work.named_params_mut()[idx].1.data_mut()[e] = base;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ga = analytic.data()[e];
            let rel = (ga - fd).abs() / f64::max(1e-6, f64::max(ga.abs(), fd.abs()));
            worst = f64::max(worst, rel);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { entries })
}

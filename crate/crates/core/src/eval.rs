//! Inference over a dataset: predictions, metrics, and classification-token
//! embeddings. Independent clips can be spread across worker threads; the
//! results are merged in input order, so output never depends on the worker
//! count.

use crate::error::Result;
use crate::metrics::{evaluate, Metrics};
use crate::model::{ForwardOutput, Model};
use crate::synth::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Name of the environment variable selecting the worker count.
pub const WORKERS_ENV: &str = "LOGOFORMER_WORKERS";

/// Worker count from the environment, default 1.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Applies `f` to every item, fanning out across `workers` threads, and
/// returns the results in input order.
pub(crate) fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut indexed: Vec<(usize, U)> = Vec::with_capacity(items.len());
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < items.len() {
                        out.push((i, f(i, &items[i])));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        for handle in handles {
            indexed.extend(handle.join().expect("evaluation worker panicked"));
        }
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, u)| u).collect()
}

/// Forward pass over every clip, no gradients.
pub fn clip_outputs(model: &Model, dataset: &Dataset, workers: usize) -> Result<Vec<ForwardOutput>> {
    parallel_map(&dataset.clips, workers, |_, clip| {
        model.forward(&mut Tape::new(), clip)
    })
    .into_iter()
    .collect()
}

/// Argmax class of every clip.
pub fn predictions(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    predictions_with(model, dataset, worker_count())
}

pub fn predictions_with(model: &Model, dataset: &Dataset, workers: usize) -> Result<Vec<usize>> {
    Ok(clip_outputs(model, dataset, workers)?
        .iter()
        .map(|out| out.logits.argmax())
        .collect())
}

/// Runs the model over the dataset and scores the predictions.
pub fn evaluate_model(model: &Model, dataset: &Dataset) -> Result<Metrics> {
    let preds = predictions(model, dataset)?;
    evaluate(&preds, &dataset.labels, model.config.num_classes)
}

/// Final classification-token embedding of every clip.
pub fn cls_embeddings(model: &Model, dataset: &Dataset, workers: usize) -> Result<Vec<Tensor>> {
    Ok(clip_outputs(model, dataset, workers)?
        .into_iter()
        .map(|out| out.cls)
        .collect())
}

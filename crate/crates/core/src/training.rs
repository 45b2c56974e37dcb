//! Minibatch training with the hard-negative hinge loss, and accuracy evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedScene;
use crate::error::{DgaError, Result};
use crate::geometry::iou;
use crate::matching;
use crate::model::DgaModel;
use crate::tensor::{AdamConfig, Gradients, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Halve the learning rate after every this many epochs.
    #[serde(default)]
    pub lr_halve_every: Option<usize>,
    /// Stop once the end-of-epoch training accuracy reaches this value.
    #[serde(default)]
    pub target_train_accuracy: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.0005,
            margin: 0.1,
            steps: 3,
            epochs: 30,
            seed: 0,
            lr_halve_every: None,
            target_train_accuracy: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DgaError::Flag(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be non-negative", self.margin));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.lr_halve_every == Some(0) {
            return bad("lr_halve_every must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_halve_every {
            Some(n) => self.learning_rate * 0.5f64.powi(((epoch - 1) / n) as i32),
            None => self.learning_rate,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy on the training set with the parameters at the end of the epoch.
    pub train_accuracy: f64,
    pub wall_time: f64,
}

/// Loss, prediction and gradients for one scene.
pub fn scene_gradients(model: &DgaModel, scene: &PreparedScene, margin: f64) -> Result<(f64, usize, Gradients)> {
    let mut tape = Tape::new(&model.store);
    let pass = model.forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)?;
    let loss = matching::triplet_loss(&mut tape, pass.matching.scores, scene.gt, margin)?;
    let grads = tape.backward(loss)?;
    Ok((tape.data(loss)[0], pass.matching.predicted, grads))
}

/// Matching scores of every proposal.
pub fn predict_scores(model: &DgaModel, scene: &PreparedScene) -> Result<Vec<f64>> {
    let mut tape = Tape::new(&model.store);
    let pass = model.forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)?;
    Ok(tape.data(pass.matching.scores).to_vec())
}

pub fn predict(model: &DgaModel, scene: &PreparedScene) -> Result<usize> {
    let scores = predict_scores(model, scene)?;
    Ok(matching::argmax(&scores).expect("K ≥ 2"))
}

/// Whether `predicted` counts as a hit: index equality, or IoU > 0.5 with
/// the ground-truth box when the scene has one.
pub fn is_correct(scene: &PreparedScene, predicted: usize) -> bool {
    match &scene.gt_box {
        Some(gt) => iou(&scene.graph.proposals[predicted].bbox, gt) > 0.5,
        None => predicted == scene.gt,
    }
}

fn map_scenes<T: Send>(scenes: &[&PreparedScene], f: impl Fn(&PreparedScene) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        scenes.par_iter().map(|s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        scenes.iter().map(|s| f(s)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Keyed by expression depth; scenes without a depth are under "unknown".
    pub per_depth: BTreeMap<String, Tally>,
}

pub fn evaluate(model: &DgaModel, scenes: &[PreparedScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(DgaError::Data("cannot evaluate on an empty dataset".into()));
    }
    let refs: Vec<&PreparedScene> = scenes.iter().collect();
    let hits = map_scenes(&refs, |s| Ok(is_correct(s, predict(model, s)?)))?;
    let mut per_depth: BTreeMap<String, Tally> = BTreeMap::new();
    let mut all = Tally::default();
    for (s, &hit) in scenes.iter().zip(&hits) {
        let key = s.depth.map_or_else(|| "unknown".to_string(), |d| d.to_string());
        let t = per_depth.entry(key).or_default();
        t.total += 1;
        all.total += 1;
        if hit {
            t.correct += 1;
            all.correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: all.accuracy(),
        correct: all.correct,
        total: all.total,
        per_depth,
    })
}

fn elapsed_since(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64())
}

fn clock() -> Option<std::time::Instant> {
    // no monotonic clock on bare wasm
    if cfg!(target_arch = "wasm32") {
        None
    } else {
        Some(std::time::Instant::now())
    }
}

/// Trains in place. Each batch averages per-scene losses, sums gradients in
/// scene order and takes one Adam step. `on_epoch` sees each log line as it
/// is produced.
pub fn train(
    model: &mut DgaModel,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(DgaError::Data("cannot train on an empty dataset".into()));
    }
    if cfg.steps != model.config.steps {
        return Err(DgaError::Compatibility {
            field: "steps".into(),
            message: format!("config asks for {}, model has {}", cfg.steps, model.config.steps),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let start = clock();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let results = map_scenes(&batch, |s| scene_gradients(model, s, cfg.margin))?;
            let mut total = Gradients::zeros_for(&model.store);
            for (loss, _, g) in &results {
                loss_sum += loss;
                total.add_assign(g);
            }
            model.store.zero_grads();
            model.store.accumulate(&total, 1.0 / batch.len() as f64)?;
            model.store.adam_step(lr, &cfg.adam)?;
        }
        if !model.store.all_finite() {
            return Err(DgaError::Data(format!("weights diverged in epoch {epoch}")));
        }
        let report = evaluate(model, scenes)?;
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / scenes.len() as f64,
            train_accuracy: report.accuracy,
            wall_time: elapsed_since(start),
        };
        on_epoch(&log);
        logs.push(log);
        if cfg.target_train_accuracy.is_some_and(|t| report.accuracy >= t) {
            break;
        }
    }
    model.store.zero_grads();
    Ok(logs)
}

//! Optimisation loop, evaluation, and single-image prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model};
use crate::data::{Dataset, LabeledImage, Partition};
use crate::error::{Error, Result};
use crate::spinal::SpinalConfig;
use crate::tensor::{AdamState, Tape, Tensor};

/// Items per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub width: usize,
    pub segments: usize,
    pub layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            width: 32,
            segments: 2,
            layers: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Fresh model for `classes` classes on `image_size` inputs, seeded from
    /// `self.seed`.
    pub fn build_model(&self, image_size: usize, classes: usize) -> Result<Model> {
        let head = SpinalConfig {
            input_dim: 0,
            segments: self.segments,
            layers: self.layers,
            width: self.width,
            classes,
        };
        Model::build(BackboneConfig::with_image_size(image_size), head, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    // strict comparison keeps the lowest index among ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks `[1, s, s]` images into `[n, 1, s, s]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for image in images {
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s[..] != *image.shape() => {
                return Err(Error::Dimension(format!(
                    "cannot stack images of shapes {s:?} and {:?}",
                    image.shape()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(image.data());
        n += 1;
    }
    let mut shape = shape.ok_or_else(|| Error::Contract("no images to stack".into()))?;
    shape.insert(0, n);
    Tensor::new(&shape, data)
}

fn check_classes(model_classes: usize, data_classes: usize) -> Result<()> {
    if model_classes != data_classes {
        return Err(Error::Config(format!(
            "model predicts {model_classes} classes but the data has {data_classes}"
        )));
    }
    Ok(())
}

/// Trains on the train partition of `data`.
pub fn fit(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<Vec<EpochStats>> {
    check_classes(model.classes(), data.class_names().len())?;
    fit_items(model, &data.subset(Partition::Train)?, config)
}

/// Minibatch Adam on `items`. The shuffle stream is derived from
/// `config.seed` but separate from the one used for initialisation.
pub fn fit_items(
    model: &mut Model,
    items: &[&LabeledImage],
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if let Some(bad) = items.iter().find(|it| it.label >= model.classes()) {
        return Err(Error::Config(format!(
            "label {} is outside the model's {} classes",
            bad.label,
            model.classes()
        )));
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if items.is_empty() {
        return Err(Error::Config("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(model.parameter_count(), config.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let images = stack_images(batch.iter().map(|&i| &items[i].pixels))?;
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].label).collect();

            let mut tape = Tape::new();
            let params = model.register(&mut tape, true);
            let x = tape.constant(images);
            let logits = model.forward_on(&mut tape, &params, x)?;
            let loss = tape.softmax_cross_entropy_mean(logits, &labels)?;
            tape.backward(loss)?;

            loss_sum += tape.value(loss).data()[0] as f64 * batch.len() as f64;
            let classes = model.classes();
            correct += tape
                .value(logits)
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &label)| argmax(row) == label)
                .count();

            model.absorb_gradients(&mut tape, &params)?;
            adam.step(&mut model.parameters_mut())?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / items.len() as f64,
            accuracy: correct as f64 / items.len() as f64,
        };
        log::info!(
            "epoch {}/{}: loss {:.6} train accuracy {:.4}",
            stats.epoch,
            config.epochs,
            stats.mean_loss,
            stats.accuracy
        );
        history.push(stats);
    }
    Ok(history)
}

/// Anything that maps `[n, 1, s, s]` images to `[n, C]` logits.
pub trait Classifier: Sync {
    fn classes(&self) -> usize;
    fn image_size(&self) -> usize;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn image_size(&self) -> usize {
        Model::image_size(self)
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Zero for classes without test items.
    pub per_class_accuracy: Vec<f64>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub n_test: usize,
}

impl EvalReport {
    /// Builds the report from `(true, predicted)` label pairs.
    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut confusion = vec![vec![0u64; classes]; classes];
        let mut n_test = 0;
        for (truth, predicted) in pairs {
            if truth >= classes || predicted >= classes {
                return Err(Error::Index(format!(
                    "label pair ({truth}, {predicted}) outside {classes} classes"
                )));
            }
            confusion[truth][predicted] += 1;
            n_test += 1;
        }
        if n_test == 0 {
            return Err(Error::Evaluation(
                "nothing to evaluate: the test split is empty".into(),
            ));
        }
        let trace: u64 = (0..classes).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        Ok(EvalReport {
            accuracy: trace as f64 / n_test as f64,
            per_class_accuracy,
            confusion,
            n_test,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }
}

/// Predicted labels for `items`, in order.
pub fn predict_labels<M: Classifier>(model: &M, items: &[&LabeledImage]) -> Result<Vec<usize>> {
    let chunks: Vec<Result<Vec<usize>>> = items
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let images = stack_images(chunk.iter().map(|it| &it.pixels))?;
            let logits = model.logits(&images)?;
            Ok(logits.data().chunks(model.classes()).map(argmax).collect())
        })
        .collect();
    let mut labels = Vec::with_capacity(items.len());
    for chunk in chunks {
        labels.extend(chunk?);
    }
    Ok(labels)
}

/// Scores the test partition of `data`.
pub fn evaluate<M: Classifier>(model: &M, data: &Dataset) -> Result<EvalReport> {
    check_classes(model.classes(), data.class_names().len())?;
    evaluate_items(model, &data.subset(Partition::Test)?)
}

pub fn evaluate_items<M: Classifier>(model: &M, items: &[&LabeledImage]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Evaluation(
            "nothing to evaluate: the test split is empty".into(),
        ));
    }
    let predicted = predict_labels(model, items)?;
    EvalReport::from_pairs(
        model.classes(),
        items.iter().map(|it| it.label).zip(predicted),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_image<M: Classifier>(model: &M, image: &Tensor) -> Result<()> {
    let s = model.image_size();
    if image.shape() != [1, s, s] {
        return Err(Error::Dimension(format!(
            "model expects a [1, {s}, {s}] image, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Class probabilities for one `[1, s, s]` image.
pub fn predict<M: Classifier>(model: &M, image: &Tensor) -> Result<Prediction> {
    check_image(model, image)?;
    let logits = model.logits(&stack_images([image])?)?;
    let probabilities = softmax(logits.data());
    Ok(Prediction {
        label: argmax_f64(&probabilities),
        probabilities,
    })
}

/// Quarter turn counter-clockwise of a `[c, s, s]` image.
pub fn rotate90(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = square_dims(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..w {
            for col in 0..h {
                out.push(plane[col * w + (w - 1 - r)]);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Mirror of a `[c, h, w]` image across its vertical axis.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::Dimension(format!(
            "expected [c, h, w], got {:?}",
            image.shape()
        )));
    }
    let w = image.shape()[2];
    let out = image
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(image.shape(), out)
}

fn square_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if h == w => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "expected a square [c, s, s] image, got {:?}",
            image.shape()
        ))),
    }
}

/// The eight rotations and reflections of a square image.
pub fn dihedral_images(image: &Tensor) -> Result<Vec<Tensor>> {
    square_dims(image)?;
    let mut out = Vec::with_capacity(8);
    let mut current = image.clone();
    for _ in 0..4 {
        out.push(flip_horizontal(&current)?);
        let next = rotate90(&current)?;
        out.push(current);
        current = next;
    }
    Ok(out)
}

/// Probabilities averaged over the eight dihedral variants of `image`.
///
/// The per-variant vectors are summed in a canonical sorted order, so the
/// result does not depend on which member of the orbit was passed in.
pub fn predict_tta<M: Classifier>(model: &M, image: &Tensor) -> Result<Prediction> {
    square_dims(image)?;
    check_image(model, image)?;
    let variants = dihedral_images(image)?;
    let logits = model.logits(&stack_images(&variants)?)?;
    let mut probs: Vec<Vec<f64>> = logits.data().chunks(model.classes()).map(softmax).collect();
    probs.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0f64; model.classes()];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= probs.len() as f64;
    }
    Ok(Prediction {
        label: argmax_f64(&mean),
        probabilities: mean,
    })
}

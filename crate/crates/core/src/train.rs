//! Loss, optimizer, schedule and the training loop.

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{images_to_tensor, Dihedral, PatchDataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, roc_auc};
use crate::model::{CelnetModel, ForwardOutput};
use crate::nn::{BackwardMode, Mode, Module, ParamKind};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub weight_decay: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub aux_loss_weight: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            lr_halving_epochs: vec![50, 75],
            weight_decay: 1e-5,
            momentum: 0.9,
            aux_loss_weight: 0.3,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.aux_loss_weight) {
            return Err(Error::Config(format!("aux_loss_weight {} outside [0, 1]", self.aux_loss_weight)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective { aux_loss_weight: self.aux_loss_weight, weight_decay: self.weight_decay }
    }

    /// Step-decayed learning rate: halved once for every listed epoch already reached.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Input(format!("epoch {epoch} outside 0..{}", self.epochs)));
        }
        let halvings = self.lr_halving_epochs.iter().filter(|&&e| epoch >= e).count();
        Ok(self.lr * 0.5f64.powi(halvings as i32))
    }
}

/// `max(z, 0) - z*y + ln(1 + e^{-|z|})`.
pub fn bce_with_logits(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub aux_loss_weight: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub main: f64,
    pub aux2: f64,
    pub aux3: f64,
    pub l2: f64,
    pub total: f64,
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {l} is not binary")));
    }
    Ok(())
}

/// Mean over each image's logit grid.
fn image_logits(t: &Tensor) -> Vec<f64> {
    let per = t.item_len();
    t.data().chunks_exact(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
}

fn mean_bce(t: &Tensor, labels: &[u8]) -> f64 {
    let z = image_logits(t);
    z.iter().zip(labels).map(|(&z, &y)| bce_with_logits(z, y as f64)).sum::<f64>() / z.len() as f64
}

fn mean_bce_grad(t: &Tensor, labels: &[u8]) -> Tensor {
    let n = t.batch();
    let per = t.item_len();
    let z = image_logits(t);
    let mut g = Tensor::zeros(t.shape());
    for (i, cells) in g.data_mut().chunks_exact_mut(per).enumerate() {
        let d = (sigmoid(z[i]) - labels[i] as f64) / (n * per) as f64;
        cells.iter_mut().for_each(|c| *c = d);
    }
    g
}

impl Objective {
    /// Batch-mean BCE terms plus `weight_decay * weight_norm_sq`.
    pub fn evaluate(&self, out: &ForwardOutput, labels: &[u8], weight_norm_sq: f64) -> Result<LossTerms> {
        check_labels(labels, out.logits.batch())?;
        let main = mean_bce(&out.logits, labels);
        let aux2 = mean_bce(&out.aux2, labels);
        let aux3 = mean_bce(&out.aux3, labels);
        let l2 = self.weight_decay * weight_norm_sq;
        let total = main + self.aux_loss_weight * (aux2 + aux3) / 2.0 + l2;
        Ok(LossTerms { main, aux2, aux3, l2, total })
    }

    /// Gradients of the data terms with respect to the main and auxiliary logits.
    pub fn output_gradients(&self, out: &ForwardOutput, labels: &[u8]) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
        check_labels(labels, out.logits.batch())?;
        let main = mean_bce_grad(&out.logits, labels);
        if self.aux_loss_weight == 0.0 {
            return Ok((main, None, None));
        }
        let half = self.aux_loss_weight / 2.0;
        let aux2 = mean_bce_grad(&out.aux2, labels).map(|v| v * half);
        let aux3 = mean_bce_grad(&out.aux3, labels).map(|v| v * half);
        Ok((main, Some(aux2), Some(aux3)))
    }
}

/// SGD with Nesterov momentum. The L2 term's gradient is added to kernel weights here.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut CelnetModel, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut slot = 0;
        model.visit_params("", &mut |_, p| {
            if !p.trainable() {
                return;
            }
            if velocity.len() <= slot {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[slot];
            let decay = if p.kind == ParamKind::Weight { 2.0 * wd } else { 0.0 };
            for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let g = g + decay * *w;
                *v = mu * *v + g;
                *w -= lr * (g + mu * *v);
            }
            slot += 1;
        });
    }
}

/// One optimizer step on a batch in train mode.
pub fn train_step(
    model: &mut CelnetModel,
    opt: &mut Sgd,
    objective: &Objective,
    images: &Tensor,
    labels: &[u8],
    lr: f64,
) -> Result<LossTerms> {
    model.set_mode(Mode::Train);
    model.zero_grad();
    let out = model.forward(images)?;
    let terms = objective.evaluate(&out, labels, model.weight_norm_sq())?;
    let (dl, da2, da3) = objective.output_gradients(&out, labels)?;
    model.backward(&dl, da2.as_ref(), da3.as_ref(), BackwardMode::Standard);
    model.clear_cache();
    opt.step(model, lr);
    Ok(terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub probabilities: Vec<f64>,
}

/// Eval-mode loss (aux and L2 included), accuracy and AUC over a dataset.
pub fn evaluate(model: &mut CelnetModel, data: &PatchDataset, objective: &Objective, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let labels = data.labels_vec();
    let mut weighted = LossTerms::default();
    let mut probabilities = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let out = model.forward(&data.tensor(chunk))?;
        model.clear_cache();
        let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
        let t = objective.evaluate(&out, &batch_labels, 0.0)?;
        let k = chunk.len() as f64;
        weighted.main += t.main * k;
        weighted.aux2 += t.aux2 * k;
        weighted.aux3 += t.aux3 * k;
        probabilities.extend(out.scores().iter().map(|s| s.probability));
    }
    let n = data.len() as f64;
    let loss = weighted.main / n
        + objective.aux_loss_weight * (weighted.aux2 + weighted.aux3) / (2.0 * n)
        + objective.weight_decay * model.weight_norm_sq();
    model.set_mode(previous);
    Ok(Evaluation {
        loss,
        accuracy: accuracy(&probabilities, &labels)?,
        auc: roc_auc(&probabilities, &labels)?,
        probabilities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub state: TrainState,
}

fn batch_tensor(images: &Array4<u8>, indices: &[usize], augment: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !augment {
        return Ok(images_to_tensor(images.select(Axis(0), indices).view()));
    }
    let (_, h, w, c) = images.dim();
    let mut out = Array4::<u8>::zeros((indices.len(), h, w, c));
    for (slot, &i) in indices.iter().enumerate() {
        let img = Dihedral::sample(rng).apply(images.index_axis(Axis(0), i))?;
        out.index_axis_mut(Axis(0), slot).assign(&img);
    }
    Ok(images_to_tensor(out.view()))
}

pub fn fit(model: &mut CelnetModel, train: &PatchDataset, val: &PatchDataset, config: &TrainConfig) -> Result<FitOutcome> {
    fit_with(model, train, val, config, |_| Ok(()))
}

/// Runs the schedule, evaluating after each epoch and keeping the weights with
/// the lowest validation loss, which are restored into `model` at the end.
/// Batch order and augmentation draw from one RNG seeded by `config.seed`.
pub fn fit_with(
    model: &mut CelnetModel,
    train: &PatchDataset,
    val: &PatchDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    let objective = config.objective();
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels = train.labels_vec();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = batch_tensor(&train.images, chunk, config.augment, &mut rng)?;
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let terms = train_step(model, &mut opt, &objective, &x, &y, lr)?;
            if !terms.total.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(Error::Diverged { epoch, loss: terms.total });
            }
            loss_sum += terms.total * chunk.len() as f64;
        }
        let eval = evaluate(model, val, &objective, config.batch_size)?;
        if !eval.loss.is_finite() {
            model.set_mode(Mode::Eval);
            return Err(Error::Diverged { epoch, loss: eval.loss });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            val_auc: eval.auc,
        };
        on_epoch(&record)?;
        history.push(record);
        if best.as_ref().map_or(true, |(l, _, _)| eval.loss < *l) {
            best = Some((eval.loss, epoch, Checkpoint::capture(model)));
        }
    }
    let (best_validation_loss, best_epoch, best) = best.expect("at least one epoch");
    best.restore(model)?;
    model.set_mode(Mode::Eval);
    Ok(FitOutcome {
        best,
        state: TrainState { epoch: config.epochs, best_epoch, best_validation_loss, history },
    })
}

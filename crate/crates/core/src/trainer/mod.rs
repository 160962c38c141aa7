//! Optimization loop, plateau schedule, evaluation and experiment drivers.

mod eval;
mod sweep;

use std::fmt::Write as _;

use ndtensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{RoutingConfig, RoutingMode, DEFAULT_ROUTING_ITERATIONS};
use crate::data::{SampleRecord, DEFAULT_VAL_FRACTION, PATCH};
use crate::error::{Error, Result};
use crate::losses::{
    attribute_loss, malignancy_kl_loss, mean_regression_loss, reconstruction_loss, total_loss_with_terms,
    LossBreakdown, LossWeights,
};
use crate::model::{ForwardOutput, MalignancyMode, XCapsConfig, XCapsModel};
use crate::ratings::{fit_label_distribution, ATTRIBUTE_NAMES};

pub use eval::{
    ablation_suite, accuracy_within_one, cross_validate, evaluate, fold_seed, AblationRow, AblationTable, Ablation,
    CvAggregate, CvResult, EvalReport, FoldResult, SamplePrediction,
};
pub use sweep::{emit_sweep_images, encode_pgm, write_pgm, SWEEP_COLUMNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub routing_mode: RoutingMode,
    pub use_reconstruction: bool,
    pub malignancy_mode: MalignancyMode,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.02,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 15,
            max_epochs: 100,
            seed: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            routing_mode: RoutingMode::Sigmoid,
            use_reconstruction: true,
            malignancy_mode: MalignancyMode::Distribution,
            weights: LossWeights::new(ATTRIBUTE_NAMES.len()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!(
                "invalid lr {} or plateau factor {}",
                self.lr, self.plateau_factor
            )));
        }
        if self.weights.alpha.len() != ATTRIBUTE_NAMES.len() {
            return Err(Error::Config(format!(
                "need {} attribute weights, got {}",
                ATTRIBUTE_NAMES.len(),
                self.weights.alpha.len()
            )));
        }
        Ok(())
    }

    /// `base` with this run's routing and malignancy-head choices applied.
    pub fn model_config(&self, base: &XCapsConfig) -> XCapsConfig {
        let iterations = if base.routing.iterations == 0 {
            DEFAULT_ROUTING_ITERATIONS
        } else {
            base.routing.iterations
        };
        XCapsConfig {
            routing: RoutingConfig::new(self.routing_mode, iterations),
            malignancy_mode: self.malignancy_mode,
            ..base.clone()
        }
    }
}

// ----- optimizer ---------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = shapes.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter is touched.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&state.m)) {
        if p.shape() != g.shape() || m.len() != p.numel() {
            return Err(Error::invalid(
                "adam_step",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, p)) in params.into_iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Multiplies the rate by `factor` once `patience` epochs pass without a
/// strictly lower validation loss; the wait restarts after each reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records an epoch's validation loss; returns true if the rate dropped.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.lr *= self.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}

// ----- per-sample losses -------------------------------------------------

/// Training targets derived once from a record.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    /// Mean attribute ratings mapped to `[0, 1]`.
    pub attr_targets: Vec<f64>,
    pub attr_means: [f64; 6],
    pub malignancy_target: Vec<f64>,
    pub malignancy_mean: f64,
}

impl PreparedSample {
    pub fn new(record: &SampleRecord) -> Result<Self> {
        let attr_means = record.ratings.attribute_means();
        Ok(Self {
            id: record.id.clone(),
            image: Tensor::new(&[PATCH, PATCH], record.image_f64())?,
            mask: Tensor::new(&[PATCH, PATCH], record.mask_f64())?,
            attr_targets: attr_means.iter().map(|m| (m - 1.0) / 4.0).collect(),
            attr_means,
            malignancy_target: fit_label_distribution(record.ratings.malignancy())?.probs,
            malignancy_mean: record.ratings.malignancy_mean(),
        })
    }
}

pub fn prepare(records: &[&SampleRecord]) -> Result<Vec<PreparedSample>> {
    records.iter().map(|r| PreparedSample::new(r)).collect()
}

pub(crate) struct SampleGraph {
    pub total: Var,
    pub l_m: f64,
    pub l_a: f64,
    pub l_a_per_attribute: Vec<f64>,
    pub l_r: f64,
    pub output: crate::model::GraphOutput,
}

pub(crate) fn sample_graph(
    model: &XCapsModel,
    tape: &mut Tape,
    params: &[Var],
    sample: &PreparedSample,
    cfg: &TrainConfig,
) -> Result<SampleGraph> {
    let output = model.forward_graph(tape, params, &sample.image, cfg.use_reconstruction)?;
    let (l_a, per) = attribute_loss(tape, output.attr_scores, &sample.attr_targets, &cfg.weights.alpha)?;
    let l_m = match model.config().malignancy_mode {
        MalignancyMode::Distribution => {
            malignancy_kl_loss(tape, output.malignancy_logits, &sample.malignancy_target, cfg.weights.beta)?
        }
        MalignancyMode::Mean => {
            let y = tape.sigmoid(output.malignancy_logits)?;
            mean_regression_loss(tape, y, (sample.malignancy_mean - 1.0) / 4.0, cfg.weights.beta)?
        }
    };
    let mut total = tape.add(l_m, l_a)?;
    let mut l_r_value = 0.0;
    if let Some(recon) = output.reconstruction {
        let l_r = reconstruction_loss(tape, recon, &sample.image, &sample.mask, cfg.weights.gamma)?;
        l_r_value = tape.value(l_r).data()[0];
        total = tape.add(total, l_r)?;
    }
    Ok(SampleGraph {
        total,
        l_m: tape.value(l_m).data()[0],
        l_a: tape.value(l_a).data()[0],
        l_a_per_attribute: per,
        l_r: l_r_value,
        output,
    })
}

fn check_compatible(model: &XCapsModel, cfg: &TrainConfig) -> Result<()> {
    let mc = model.config();
    if mc.attr_count != ATTRIBUTE_NAMES.len() || mc.image_size != PATCH {
        return Err(Error::Config(format!(
            "training needs {} attributes on {PATCH}x{PATCH} input, model has {} on {}",
            ATTRIBUTE_NAMES.len(),
            mc.attr_count,
            mc.image_size
        )));
    }
    cfg.validate()
}

#[derive(Debug, Clone, Default)]
struct Accum {
    n: usize,
    l_m: f64,
    l_a: f64,
    per: Vec<f64>,
    l_r: f64,
}

impl Accum {
    fn add(&mut self, g: &SampleGraph) {
        self.n += 1;
        self.l_m += g.l_m;
        self.l_a += g.l_a;
        self.l_r += g.l_r;
        if self.per.is_empty() {
            self.per = vec![0.0; g.l_a_per_attribute.len()];
        }
        for (a, b) in self.per.iter_mut().zip(&g.l_a_per_attribute) {
            *a += b;
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.n += other.n;
        self.l_m += other.l_m;
        self.l_a += other.l_a;
        self.l_r += other.l_r;
        if self.per.is_empty() {
            self.per = vec![0.0; other.per.len()];
        }
        for (a, b) in self.per.iter_mut().zip(&other.per) {
            *a += b;
        }
    }

    fn mean(&self) -> Result<LossBreakdown> {
        let n = self.n.max(1) as f64;
        total_loss_with_terms(
            self.l_m / n,
            self.l_a / n,
            self.per.iter().map(|p| p / n).collect(),
            self.l_r / n,
        )
    }
}

/// Gradients of the batch-mean loss, one tensor per model parameter, plus
/// the batch-mean loss components.
pub fn batch_gradients(
    model: &XCapsModel,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let (grads, acc) = batch_gradients_acc(model, batch, cfg)?;
    Ok((grads, acc.mean()?))
}

fn batch_gradients_acc(model: &XCapsModel, batch: &[&PreparedSample], cfg: &TrainConfig) -> Result<(Vec<Tensor>, Accum)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_gradients", "empty batch"));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let mut acc = Accum::default();
    let mut sum: Option<Var> = None;
    for sample in batch {
        let g = sample_graph(model, &mut tape, &params, sample, cfg)?;
        acc.add(&g);
        sum = Some(match sum {
            Some(s) => tape.add(s, g.total)?,
            None => g.total,
        });
    }
    let loss = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(&v, (name, t))| match tape.take_grad(v) {
            Some(g) if !g.is_finite() => Err(Error::NonFiniteGradient(name.clone())),
            Some(g) => Ok(g),
            None => Ok(Tensor::zeros(t.shape())?),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, acc))
}

/// Forward-only pass over `samples`: mean loss components and per-sample outputs.
pub fn evaluate_losses(
    model: &XCapsModel,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<ForwardOutput>)> {
    let mut acc = Accum::default();
    let mut outputs = Vec::with_capacity(samples.len());
    let constants: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    for sample in samples {
        let mut tape = Tape::new();
        let params = constants
            .iter()
            .map(|t| Ok(tape.constant(t.clone())?))
            .collect::<Result<Vec<_>>>()?;
        let g = sample_graph(model, &mut tape, &params, sample, cfg)?;
        acc.add(&g);
        let reconstruction = match g.output.reconstruction {
            Some(r) => tape.value(r).clone(),
            None => model.decode(tape.value(g.output.attr_vectors))?,
        };
        outputs.push(ForwardOutput {
            attr_vectors: tape.value(g.output.attr_vectors).clone(),
            attr_scores: tape.value(g.output.attr_scores).data().to_vec(),
            malignancy_logits: tape.value(g.output.malignancy_logits).data().to_vec(),
            reconstruction,
            mode: model.config().malignancy_mode,
        });
    }
    Ok((acc.mean()?, outputs))
}

// ----- training loop -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_total: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_total,train_lm,train_la,train_lr,val_total";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch, e.lr, e.train.total, e.train.l_m, e.train.l_a, e.train.l_r, e.val_total
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: XCapsModel,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
}

pub fn train_fold(model: XCapsModel, train: &[&SampleRecord], val: &[&SampleRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_fold_with(model, train, val, cfg, &mut |_| {})
}

/// As [`train_fold`], calling `on_epoch` after each epoch.
pub fn train_fold_with(
    mut model: XCapsModel,
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_compatible(&model, cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "need non-empty train and validation sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let train = prepare(train)?;
    let val = prepare(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().iter().map(|(_, t)| t));
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut best: Option<(usize, f64, XCapsModel)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut acc = Accum::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (grads, batch_acc) = batch_gradients_acc(&model, &batch, cfg)?;
            adam_step(model.params_mut(), &grads, &mut adam, lr)?;
            acc.merge(&batch_acc);
        }
        let (val_loss, _) = evaluate_losses(&model, &val, cfg)?;
        let entry = EpochLog {
            epoch,
            lr,
            train: acc.mean()?,
            val_total: val_loss.total,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(_, b, _)| val_loss.total < *b) {
            best = Some((epoch, val_loss.total, model.clone()));
        }
        schedule.observe(val_loss.total);
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_epoch, best_val, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val,
        log,
    })
}

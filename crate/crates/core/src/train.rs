//! Optimization: Adam on MSE, early stopping on validation loss, and the
//! standardization bookkeeping that ties standardized model outputs back to
//! physical units.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{SeriesSet, Split, Splits, WindowSample};
use crate::error::{Error, Result};
use crate::model::{AquaCast, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Caps optimizer steps per epoch; `None` sweeps every training window.
    pub max_steps_per_epoch: Option<usize>,
    /// Use every `val_stride`-th validation window when scoring an epoch.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            max_steps_per_epoch: None,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_stride < 1 {
            return bad("val_stride must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Per-channel mean and population standard deviation from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub ids: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Constant channels are rejected: they cannot be scaled to unit variance.
    pub fn fit(ids: &[&str], channels: &[&[f64]]) -> Result<Standardizer> {
        if ids.len() != channels.len() {
            return Err(Error::Dimension {
                op: "Standardizer::fit",
                lhs: vec![ids.len()],
                rhs: vec![channels.len()],
            });
        }
        let mut means = Vec::with_capacity(ids.len());
        let mut stds = Vec::with_capacity(ids.len());
        for (id, values) in ids.iter().zip(channels) {
            if values.is_empty() {
                return Err(Error::Config(format!("channel {id} has no training samples")));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if !(std > 0.0) {
                return Err(Error::Config(format!(
                    "channel {id} is constant over the training split"
                )));
            }
            means.push(mean);
            stds.push(std);
        }
        Ok(Standardizer {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            means,
            stds,
        })
    }

    /// Appends a channel that shares the statistics of the last one.
    pub fn duplicate_last(&mut self, id: &str) {
        let (m, s) = (*self.means.last().expect("fitted"), *self.stds.last().expect("fitted"));
        self.ids.push(id.to_string());
        self.means.push(m);
        self.stds.push(s);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn standardize(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        let (m, s) = (self.means[channel], self.stds[channel]);
        values.iter().map(|v| (v - m) / s).collect()
    }

    pub fn destandardize(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        let (m, s) = (self.means[channel], self.stds[channel]);
        values.iter().map(|v| v * s + m).collect()
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, sizes: &[usize]) -> Adam {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Gradients are checked before anything is modified, so a
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                op: "Adam::step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::Dimension {
                    op: "Adam::step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
                let name = names.get(i).map_or_else(|| format!("#{i}"), Clone::clone);
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at element {k}: {}",
                    g.data()[k]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses; only strict improvements count.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Decision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            Decision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }
}

/// Random access to training examples.
pub trait Windows {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<WindowSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Windows for [WindowSample] {
    fn len(&self) -> usize {
        <[WindowSample]>::len(self)
    }
    fn get(&self, index: usize) -> Result<WindowSample> {
        <[WindowSample]>::get(self, index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("window {index} out of range")))
    }
}

impl Windows for Vec<WindowSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<WindowSample> {
        Windows::get(self.as_slice(), index)
    }
}

/// Stride-`stride` windows of one split, built on demand.
#[derive(Clone, Copy)]
pub struct SplitWindows<'a> {
    pub set: &'a SeriesSet,
    pub split: Split,
    pub hist_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl<'a> SplitWindows<'a> {
    pub fn new(set: &'a SeriesSet, split: Split, hist_len: usize, horizon: usize) -> Self {
        Self {
            set,
            split,
            hist_len,
            horizon,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }
}

impl Windows for SplitWindows<'_> {
    fn len(&self) -> usize {
        self.set
            .window_count(self.split, self.hist_len, self.horizon)
            .div_ceil(self.stride)
    }
    fn get(&self, index: usize) -> Result<WindowSample> {
        self.set
            .window(self.split, index * self.stride, self.hist_len, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: AquaCast,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub steps: u64,
    pub wall_seconds: f64,
}

/// Mean per-sample MSE of one batch, with gradients accumulated in `g`'s
/// parameter leaves. Samples are visited in the given order.
fn batch_loss_and_grads(
    model: &AquaCast,
    batch: &[WindowSample],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let mut dropout = dropout;
    let mut total = None;
    for w in batch {
        let h = g.constant(w.history.clone());
        let f = w.forecast.as_ref().map(|f| g.constant(f.clone()));
        let out = model.forward(&mut g, &p, h, f, dropout.as_deref_mut())?;
        let target = g.constant(w.target.clone());
        let loss = g.mse_loss(out.prediction, target)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss)?;
    let grads = p
        .into_vec()
        .into_iter()
        .map(|v| g.grad(v).expect("bound parameters are tracked"))
        .collect();
    Ok((value, grads))
}

/// Mean MSE over `windows` in standardized units, without dropout.
pub fn mean_loss(model: &AquaCast, windows: &dyn Windows) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("cannot score an empty split".into()));
    }
    let mut total = 0.0;
    for i in 0..windows.len() {
        let w = windows.get(i)?;
        let pred = model.predict(&w.history, w.forecast.as_ref())?;
        let se: f64 = pred
            .data()
            .iter()
            .zip(w.target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / pred.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Seeded full-batch-size Adam steps on `windows` in a fixed order, returning
/// the loss before each step. Used for smoke and overfitting checks.
pub fn train_steps(
    model: &mut AquaCast,
    windows: &[WindowSample],
    config: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    let names = model.params().names();
    let sizes: Vec<usize> = model.params().tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(config, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let use_dropout = model.config().dropout > 0.0;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = batch_loss_and_grads(model, windows, use_dropout.then_some(&mut rng))?;
        losses.push(loss);
        adam.step(&mut model.params_mut().tensors_mut(), &grads, &names)?;
    }
    Ok(losses)
}

/// Epoch loop with seeded shuffling and early stopping. Returns the
/// best-validation checkpoint, never simply the last one.
pub fn fit(initial: &AquaCast, train: &dyn Windows, val: &dyn Windows, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let clock = Instant::now();
    let mut model = initial.clone();
    let names = model.params().names();
    let sizes: Vec<usize> = model.params().tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(config, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d50f);
    let use_dropout = model.config().dropout > 0.0;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_view = StridedWindows {
        inner: val,
        stride: config.val_stride,
    };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if let Some(cap) = config.max_steps_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch = idx.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_loss_and_grads(&model, &batch, use_dropout.then_some(&mut dropout_rng))?;
            loss_sum += loss;
            adam.step(&mut model.params_mut().tensors_mut(), &grads, &names)?;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val_loss = mean_loss(&model, &val_view)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let decision = stopper.observe(epoch, val_loss);
        let improved = decision == Decision::Improved;
        if improved {
            best = model.clone();
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6}{}",
            if improved { " *" } else { "" }
        );
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            improved,
        });
        if decision == Decision::Stop {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(FitOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        stop,
        steps: adam.step,
        wall_seconds: clock.elapsed().as_secs_f64(),
    })
}

struct StridedWindows<'a> {
    inner: &'a dyn Windows,
    stride: usize,
}

impl Windows for StridedWindows<'_> {
    fn len(&self) -> usize {
        self.inner.len().div_ceil(self.stride)
    }
    fn get(&self, index: usize) -> Result<WindowSample> {
        self.inner.get(index * self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Training-set standardized units.
    #[default]
    Standardized,
    /// Physical units of the sensor.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelForecasts {
    pub id: String,
    pub mean: f64,
    pub std: f64,
    /// One horizon-long forecast per window, in original units.
    pub predictions: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
}

impl ChannelForecasts {
    fn convert(&self, rows: &[Vec<f64>], units: Units) -> Vec<Vec<f64>> {
        match units {
            Units::Original => rows.to_vec(),
            Units::Standardized => rows
                .iter()
                .map(|r| r.iter().map(|v| (v - self.mean) / self.std).collect())
                .collect(),
        }
    }

    pub fn predictions_in(&self, units: Units) -> Vec<Vec<f64>> {
        self.convert(&self.predictions, units)
    }

    pub fn truths_in(&self, units: Units) -> Vec<Vec<f64>> {
        self.convert(&self.truths, units)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub starts: Vec<usize>,
    pub channels: Vec<ChannelForecasts>,
}

/// Forecasts every `stride`-th window of `split` and maps them back to
/// physical units with the training-set statistics.
pub fn evaluate(model: &AquaCast, set: &SeriesSet, split: Split, stride: usize) -> Result<Evaluation> {
    let c = model.config();
    if c.n_hist_vars != set.n_history_vars()
        || c.n_forecast_vars != set.n_forecast_vars()
        || c.n_targets != set.targets.len()
    {
        return Err(Error::Config(format!(
            "checkpoint expects {} history / {} forecast / {} target channels, data has {} / {} / {}",
            c.n_hist_vars,
            c.n_forecast_vars,
            c.n_targets,
            set.n_history_vars(),
            set.n_forecast_vars(),
            set.targets.len()
        )));
    }
    let windows = SplitWindows::new(set, split, c.hist_len, c.horizon).with_stride(stride);
    if windows.is_empty() {
        return Err(Error::Config(format!("{split:?} split has no complete window")));
    }
    let mut channels: Vec<ChannelForecasts> = set
        .targets
        .iter()
        .map(|&t| ChannelForecasts {
            id: set.channels[t].id.clone(),
            mean: set.standardizer.means[t],
            std: set.standardizer.stds[t],
            predictions: Vec::with_capacity(windows.len()),
            truths: Vec::with_capacity(windows.len()),
        })
        .collect();
    let mut starts = Vec::with_capacity(windows.len());
    for i in 0..windows.len() {
        let w = windows.get(i)?;
        let pred = model.predict(&w.history, w.forecast.as_ref())?;
        for (k, (&t, ch)) in set.targets.iter().zip(channels.iter_mut()).enumerate() {
            ch.predictions.push(set.standardizer.destandardize(t, pred.row(k)));
            ch.truths.push(set.standardizer.destandardize(t, w.target.row(k)));
        }
        starts.push(w.start);
    }
    Ok(Evaluation {
        split,
        starts,
        channels,
    })
}

/// Everything needed to reproduce and audit one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub splits: Splits,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub steps: u64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(outcome: &FitOutcome, train: &TrainConfig, splits: &Splits) -> Self {
        Self {
            model: outcome.model.config().clone(),
            train: train.clone(),
            seed: train.seed,
            splits: splits.clone(),
            history: outcome.history.clone(),
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            stop: outcome.stop,
            steps: outcome.steps,
            wall_seconds: outcome.wall_seconds,
        }
    }
}

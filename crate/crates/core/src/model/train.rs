//! Mini-batch training with decoupled weight decay, evaluation and metrics.
//!
//! Every step trains on a freshly generated mini-batch. All randomness is
//! keyed by `(seed, step)`: the batch comes from the batch stream and the
//! channel subset from the HCS stream of that step, so a run resumed from a
//! checkpoint draws exactly what the uninterrupted run did.

use std::f64::consts::PI;

use super::{Dataset, Model, ModelSpec, SyntheticTask};
use crate::error::{config, Error, Result};
use crate::params::{ParamGrads, ParamStore, Session};
use crate::rng::{substream, STREAM_BATCH, STREAM_HCS};
use crate::router::BalanceWeights;
use crate::tensor::Tensor;
use crate::tokenizer::{hcs_sample, MultiChannelImage};

pub const METRICS_HEADER: &str = "step,loss,ce_loss,balance_loss,train_acc,eval_acc";

const EVAL_BATCH: usize = 32;

/// Optimization and data hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub balance: BalanceWeights,
    pub eval_every: usize,
    pub eval_size: usize,
    pub signal_channels: Vec<usize>,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 400,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            balance: BalanceWeights::default(),
            eval_every: 100,
            eval_size: 256,
            signal_channels: vec![1, 2],
            amplitude: 0.3,
            noise: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if self.eval_size == 0 || self.eval_every == 0 {
            return config("eval_size and eval_every must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if let Some(&c) = self.signal_channels.iter().find(|&&c| c >= spec.channels) {
            return config(format!("signal channel {c} exceeds channel count {}", spec.channels));
        }
        Ok(())
    }

    /// The task the run trains on, derived from the run seed.
    pub fn task(&self, spec: &ModelSpec) -> Result<SyntheticTask> {
        let mut task = SyntheticTask::new(
            self.seed,
            spec.height,
            spec.width,
            spec.channels,
            spec.num_classes,
            self.signal_channels.clone(),
        )?;
        task.amplitude = self.amplitude;
        task.noise = self.noise;
        Ok(task)
    }

    /// Fixed training probe split (for logged loss and train accuracy) and
    /// held-out evaluation split, `eval_size` images each.
    pub fn datasets(&self, task: &SyntheticTask) -> (Dataset, Dataset) {
        (task.generate(self.eval_size, 0), task.generate(self.eval_size, 1))
    }

    /// Cosine decay from `lr` at step 0 to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (PI * frac.min(1.0)).cos())
    }
}

/// Adam moments with decoupled weight decay on matrix-shaped parameters.
///
/// Parameters without a gradient in a step (channel experts left out by
/// channel subsampling) are skipped entirely, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            let decay = if p.rank() == 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub ce_loss: f64,
    pub balance_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.4}",
            self.step, self.loss, self.ce_loss, self.balance_loss, self.train_acc, self.eval_acc
        )
    }
}

/// Everything needed to continue a run: parameters, moments and step count.
/// Batch and channel-subset draws are keyed by `(cfg.seed, step)`.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub history: Vec<MetricRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub ce_loss: f64,
    pub balance_loss: f64,
}

impl TrainState {
    pub fn new(spec: ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(&spec)?;
        let model = Model::new(spec, cfg.seed)?;
        let opt = AdamW::new(&model.store, cfg);
        Ok(Self {
            model,
            opt,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Channel subset used at the current step.
    pub fn active_channels(&self, cfg: &TrainConfig) -> Vec<usize> {
        let c = self.model.spec.channels;
        if self.model.spec.hcs {
            hcs_sample(c, &mut substream(cfg.seed, STREAM_HCS, self.step as u64))
        } else {
            (0..c).collect()
        }
    }

    /// The current step's mini-batch.
    pub fn batch(&self, cfg: &TrainConfig, task: &SyntheticTask) -> Dataset {
        task.sample(cfg.batch_size, &mut substream(cfg.seed, STREAM_BATCH, self.step as u64))
    }
}

fn losses(
    model: &Model,
    s: &mut Session,
    images: &[&MultiChannelImage],
    labels: &[usize],
    active: &[usize],
    w: BalanceWeights,
) -> Result<(crate::tensor::Var, StepLoss, Tensor)> {
    let f = model.forward_graph(s, images, active, w)?;
    let ce = s.g.cross_entropy(f.logits, labels)?;
    let total = s.g.add(ce, f.balance)?;
    let stats = StepLoss {
        loss: s.value(total).item(),
        ce_loss: s.value(ce).item(),
        balance_loss: s.value(f.balance).item(),
    };
    Ok((total, stats, s.value(f.logits).clone()))
}

/// One optimizer step on the current mini-batch.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, task: &SyntheticTask) -> Result<StepLoss> {
    let active = state.active_channels(cfg);
    let batch = state.batch(cfg, task);
    let ids: Vec<usize> = (0..batch.len()).collect();
    let (images, labels) = batch.batch(&ids);
    let (stats, grads) = {
        let mut s = Session::train(&state.model.store);
        let (total, stats, _) = losses(&state.model, &mut s, &images, &labels, &active, cfg.balance)?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                loss: stats.loss,
            });
        }
        (stats, s.backward(total)?)
    };
    let lr = cfg.lr_at(state.step);
    state.opt.step(&mut state.model.store, &grads, lr);
    state.step += 1;
    Ok(stats)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
    hits as f64 / labels.len().max(1) as f64
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Top-1 accuracy over a dataset, all channels active.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return config("cannot evaluate on an empty dataset");
    }
    let mut hits = 0.0;
    for ids in chunks(data.len()) {
        let (images, labels) = data.batch(&ids);
        hits += accuracy(&model.forward(&images)?, &labels) * ids.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

fn loss_and_accuracy(model: &Model, data: &Dataset, w: BalanceWeights) -> Result<(StepLoss, f64)> {
    let active: Vec<usize> = (0..model.spec.channels).collect();
    let mut sum = StepLoss {
        loss: 0.0,
        ce_loss: 0.0,
        balance_loss: 0.0,
    };
    let mut hits = 0.0;
    for ids in chunks(data.len()) {
        let (images, labels) = data.batch(&ids);
        let mut s = Session::eval(&model.store);
        let (_, st, logits) = losses(model, &mut s, &images, &labels, &active, w)?;
        let n = ids.len() as f64;
        sum.loss += st.loss * n;
        sum.ce_loss += st.ce_loss * n;
        sum.balance_loss += st.balance_loss * n;
        hits += accuracy(&logits, &labels) * n;
    }
    let n = data.len() as f64;
    Ok((
        StepLoss {
            loss: sum.loss / n,
            ce_loss: sum.ce_loss / n,
            balance_loss: sum.balance_loss / n,
        },
        hits / n,
    ))
}

/// Mean router probability mass on `channels`, over all layers and tokens.
pub fn router_mass(model: &Model, data: &Dataset, channels: &[usize]) -> Result<f64> {
    let (mut total, mut rows) = (0.0, 0usize);
    for ids in chunks(data.len()) {
        let (images, _) = data.batch(&ids);
        for probs in model.router_probs(&images)? {
            for r in 0..probs.rows() {
                total += channels.iter().map(|&c| probs.at(r, c)).sum::<f64>();
            }
            rows += probs.rows();
        }
    }
    Ok(total / rows.max(1) as f64)
}

/// Metrics at the current step: losses and accuracy on the fixed training
/// probe split plus held-out accuracy.
pub fn metrics(state: &TrainState, cfg: &TrainConfig, probe: &Dataset, eval: &Dataset) -> Result<MetricRow> {
    let (st, train_acc) = loss_and_accuracy(&state.model, probe, cfg.balance)?;
    if !st.loss.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            loss: st.loss,
        });
    }
    Ok(MetricRow {
        step: state.step,
        loss: st.loss,
        ce_loss: st.ce_loss,
        balance_loss: st.balance_loss,
        train_acc,
        eval_acc: evaluate(&state.model, eval)?,
    })
}

/// Runs `state` forward to `cfg.steps`, logging a metric row at step 0 (for a
/// fresh run), every `eval_every` steps and at the end. `on_row` sees each row
/// as it is produced.
pub fn run(
    state: &mut TrainState,
    cfg: &TrainConfig,
    task: &SyntheticTask,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<()> {
    let (probe, eval) = cfg.datasets(task);
    let mut log = |state: &mut TrainState| -> Result<()> {
        let row = metrics(state, cfg, &probe, &eval)?;
        on_row(&row);
        state.history.push(row);
        Ok(())
    };
    if state.step == 0 {
        log(state)?;
    }
    while state.step < cfg.steps {
        train_step(state, cfg, task)?;
        if state.step.is_multiple_of(cfg.eval_every) || state.step == cfg.steps {
            log(state)?;
        }
    }
    Ok(())
}

/// Trains a fresh model on the synthetic task described by `cfg`.
pub fn train(spec: ModelSpec, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(spec, cfg)?;
    let task = cfg.task(&state.model.spec)?;
    run(&mut state, cfg, &task, |_| {})?;
    Ok(state)
}

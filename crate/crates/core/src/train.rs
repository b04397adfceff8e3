//! Mini-batch training, evaluation and the per-epoch report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cell::CellState;
use crate::checkpoint;
use crate::data::{shuffled_indices, Example, SequenceDataset};
use crate::error::{Result, RkmError};
use crate::grad::{ParamGrads, ParamStore};
use crate::heads::{Classifier, LanguageModel};
use crate::parallel::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Global gradient-norm bound applied before every update.
    pub clip: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Stop as soon as the validation metric is at least this good.
    pub target: Option<f64>,
    /// Truncated backpropagation window for language models.
    pub bptt: usize,
    /// Where the best-validation model is written, if anywhere.
    pub checkpoint: Option<PathBuf>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::default(),
            lr: 1e-3,
            batch: 32,
            epochs: 10,
            clip: 5.0,
            seed: 0,
            patience: None,
            target: None,
            bptt: 35,
            checkpoint: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RkmError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip));
        }
        if self.batch == 0 || self.bptt == 0 || self.epochs == 0 {
            return bad("batch, bptt and epochs must be positive".into());
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => bad(format!("momentum {momentum} outside [0, 1)")),
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// First and second moment buffers, created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.param_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let (g, m, v) = (&grads.0[i], &mut self.m[i], &mut self.v[i]);
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for k in 0..w.len() {
                        m[k] = momentum * m[k] + g[k];
                        w[k] -= self.lr * m[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for k in 0..w.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        w[k] -= self.lr * update;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Perplexity,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Perplexity => "perplexity",
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Perplexity => a < b,
        }
    }

    fn reached(self, value: f64, target: f64) -> bool {
        match self {
            Metric::Accuracy => value >= target,
            Metric::Perplexity => value <= target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metric: Metric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_metric,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_metric, e.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Accuracy and mean cross-entropy of a classifier on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

pub fn evaluate(model: &Classifier, ds: &SequenceDataset, exec: Execution) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(RkmError::EmptyDataset);
    }
    let results = parallel::map(exec, &ds.items, |ex| -> Result<(f64, bool)> {
        let logits = model.logits(&ex.sequence)?;
        let (_, lse) = crate::grad::softmax_with_logsumexp(&logits);
        Ok((lse - logits[ex.label], crate::heads::argmax(&logits) == ex.label))
    });
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in results {
        let (l, c) = r?;
        loss += l;
        correct += c as usize;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        loss: loss / ds.len() as f64,
        count: ds.len(),
    })
}

/// Mean loss and gradient over a batch, summed in item order.
pub fn batch_loss_grad(model: &Classifier, batch: &[&Example], exec: Execution) -> Result<(f64, ParamGrads)> {
    let parts = parallel::map(exec, batch, |ex| model.loss_grad(ex));
    let mut total = model.store.zero_grads();
    let mut loss = 0.0;
    for p in parts {
        let (l, g, _) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

fn apply_update(opt: &mut Optimizer, store: &mut ParamStore, mut grads: ParamGrads, loss: f64, clip: f64, where_: &str) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(RkmError::NonFinite(format!("loss {loss} at {where_}")));
    }
    grads.clip_global_norm(clip);
    opt.step(store, &grads);
    Ok(())
}

struct Best {
    epoch: usize,
    value: f64,
    loss: f64,
    store: ParamStore,
}

struct Tracker {
    metric: Metric,
    best: Option<Best>,
    since_best: usize,
}

impl Tracker {
    /// Ties on the metric go to the lower validation loss.
    fn observe(&mut self, epoch: usize, value: f64, loss: f64, store: &ParamStore) -> bool {
        let improved = match &self.best {
            None => true,
            Some(b) => self.metric.better(value, b.value) || (value == b.value && loss < b.loss),
        };
        if improved {
            self.best = Some(Best {
                epoch,
                value,
                loss,
                store: store.clone(),
            });
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    fn should_stop(&self, cfg: &TrainConfig, value: f64) -> bool {
        cfg.patience.is_some_and(|p| self.since_best >= p) || cfg.target.is_some_and(|t| self.metric.reached(value, t))
    }
}

/// Train a classifier, keeping the parameters of the best validation epoch.
pub fn train_classifier(model: &mut Classifier, train: &SequenceDataset, val: &SequenceDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(RkmError::EmptyDataset);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut tracker = Tracker {
        metric: Metric::Accuracy,
        best: None,
        since_best: 0,
    };
    let mut epochs = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train.items[i]).collect();
            let (loss, grads) = batch_loss_grad(model, &batch, cfg.execution).map_err(|e| at_step(e, epoch, step))?;
            apply_update(&mut opt, &mut model.store, grads, loss, cfg.clip, &format!("epoch {epoch}, step {step}"))?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_eval = evaluate(model, val, cfg.execution)?;
        let val_acc = val_eval.accuracy;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_metric: val_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train_loss={:.5} val_accuracy={val_acc:.4}", rec.train_loss);
        epochs.push(rec);
        if tracker.observe(epoch, val_acc, val_eval.loss, &model.store) {
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save_classifier(path, model, train.vocab.as_deref())?;
            }
        }
        if tracker.should_stop(cfg, val_acc) {
            break;
        }
    }
    finish(tracker, epochs, &mut model.store, cfg)
}

fn finish(tracker: Tracker, epochs: Vec<EpochRecord>, store: &mut ParamStore, cfg: &TrainConfig) -> Result<TrainReport> {
    let metric = tracker.metric;
    match tracker.best {
        Some(best) => {
            *store = best.store;
            Ok(TrainReport {
                metric,
                epochs,
                best_epoch: best.epoch,
                best_metric: best.value,
                checkpoint: cfg.checkpoint.clone(),
            })
        }
        None => Ok(TrainReport {
            metric,
            epochs,
            best_epoch: 0,
            best_metric: f64::NAN,
            checkpoint: None,
        }),
    }
}

fn at_step(e: RkmError, epoch: usize, step: usize) -> RkmError {
    match e {
        RkmError::NonFinite(what) => RkmError::NonFinite(format!("{what} (epoch {epoch}, step {step})")),
        other => other,
    }
}

/// Train a language model with truncated backpropagation over `cfg.batch`
/// contiguous streams of `train`, each carrying its state across windows.
pub fn train_lm(model: &mut LanguageModel, train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.len() < 2 * cfg.batch || val.len() < 2 {
        return Err(RkmError::EmptyDataset);
    }
    let streams = cfg.batch;
    let per = (train.len() - 1) / streams;
    let d = model.cell.config.d;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut tracker = Tracker {
        metric: Metric::Perplexity,
        best: None,
        since_best: 0,
    };
    let mut epochs = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut states = vec![CellState::zeros(d); streams];
        let (mut nll, mut tokens) = (0.0, 0usize);
        let mut offset = 0;
        let mut step = 0;
        while offset < per {
            let len = cfg.bptt.min(per - offset);
            let jobs: Vec<(usize, &CellState)> = states.iter().enumerate().collect();
            let parts = parallel::map(cfg.execution, &jobs, |&(s, state)| {
                let (first, base) = (s * per, s * per + offset);
                model.chunk_loss_grad(&train[first..base], &train[base..base + len], &train[base + 1..base + len + 1], state)
            });
            let mut total = model.store.zero_grads();
            let mut chunk_nll = 0.0;
            let mut next = Vec::with_capacity(streams);
            for p in parts {
                let (loss, g, st) = p.map_err(|e| at_step(e, epoch, step))?;
                chunk_nll += loss.nll;
                tokens += loss.tokens;
                total.add_assign(&g);
                next.push(st);
            }
            total.scale(1.0 / streams as f64);
            nll += chunk_nll;
            let mean = chunk_nll / (len * streams) as f64;
            apply_update(&mut opt, &mut model.store, total, mean, cfg.clip, &format!("epoch {epoch}, step {step}"))?;
            states = next;
            offset += len;
            step += 1;
        }
        let ppl = model.perplexity(val, cfg.bptt.max(100))?;
        let rec = EpochRecord {
            epoch,
            train_loss: nll / tokens as f64,
            val_metric: ppl,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train_nll={:.5} val_perplexity={ppl:.4}", rec.train_loss);
        epochs.push(rec);
        if tracker.observe(epoch, ppl, ppl.ln(), &model.store) {
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save_lm(path, model, None)?;
            }
        }
        if tracker.should_stop(cfg, ppl) {
            break;
        }
    }
    finish(tracker, epochs, &mut model.store, cfg)
}

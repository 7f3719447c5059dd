//! Losses, metrics, Adam and the k-fold training protocol.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_data::{kfold_indices, Dataset, Task};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Bce,
}

impl Loss {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Loss::Mse,
            Task::Classification => Loss::Bce,
        }
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "bce" => Ok(Loss::Bce),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

fn check_batch(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::shape(
            "loss",
            format!("{} predictions for {} targets", pred.len(), target.len()),
        ));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_batch(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean of `log(1 + exp(−(2t − 1)·logit))`.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> Result<f64> {
    check_batch(logits, target)?;
    Ok(logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| softplus(-(2.0 * t - 1.0) * z))
        .sum::<f64>()
        / logits.len() as f64)
}

pub fn loss_value(loss: Loss, outputs: &[f64], target: &[f64]) -> Result<f64> {
    match loss {
        Loss::Mse => mse(outputs, target),
        Loss::Bce => bce_with_logits(outputs, target),
    }
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// Mann–Whitney estimate of the ROC AUC; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_batch(scores, labels)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 1.0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("ROC AUC needs both classes".into()));
    }
    let mut u = 0.0;
    for &p in &pos {
        for &q in &neg {
            u += match p.partial_cmp(&q) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(u / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    RocAuc,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Metric::Rmse,
            Task::Classification => Metric::RocAuc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::RocAuc => "roc_auc",
        }
    }

    pub fn compute(self, pred: &[f64], target: &[f64]) -> Result<f64> {
        match self {
            Metric::Rmse => rmse(pred, target),
            Metric::RocAuc => roc_auc(pred, target),
        }
    }
}

/// Batch loss recorded on the tape from per-graph `1 × 1` outputs.
pub fn loss_on_tape(tape: &mut Tape, loss: Loss, outputs: &[Var], target: &[f64]) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if outputs.len() != target.len() {
        return Err(Error::shape(
            "loss",
            format!("{} outputs for {} targets", outputs.len(), target.len()),
        ));
    }
    let mut row = outputs[0];
    for &o in &outputs[1..] {
        row = tape.concat(row, o)?;
    }
    let b = outputs.len();
    let per_example = match loss {
        Loss::Mse => {
            let t = tape.constant(Tensor::new([1, b], target.to_vec())?)?;
            let d = tape.sub(row, t)?;
            tape.mul(d, d)?
        }
        Loss::Bce => {
            let sign = tape.constant(Tensor::new(
                [1, b],
                target.iter().map(|t| 1.0 - 2.0 * t).collect(),
            )?)?;
            let z = tape.mul(row, sign)?;
            tape.softplus(z)?
        }
    };
    let total = tape.sum_all(per_example)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Bias-corrected Adam with `(β₁, β₂, ε) = (0.9, 0.999, 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes
            .into_iter()
            .map(|s| Tensor::zeros(s.to_vec()))
            .collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let named = model.params.named();
        Self::new(named.iter().map(|(_, t)| t.shape()))
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params and {} grads for {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[k].shape() || g.shape() != self.m[k].shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "parameter {k}: {:?} / grad {:?} vs moment {:?}",
                        p.shape(),
                        g.shape(),
                        self.m[k].shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to MSE for regression and BCE for classification.
    pub loss: Option<Loss>,
    pub seed: u64,
    pub folds: usize,
    pub test_fraction: f64,
    pub parallel_folds: usize,
    /// Ends a fold early once the train loss reaches this fraction of its initial value.
    pub stop_at_train_ratio: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 80,
            epochs: 100,
            loss: None,
            seed: 0,
            folds: 5,
            test_fraction: 0.1,
            parallel_folds: 1,
            stop_at_train_ratio: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be a non-negative number",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.folds == 0 {
            return Err(Error::InvalidArgument("need at least one fold".into()));
        }
        if self.parallel_folds == 0 {
            return Err(Error::InvalidArgument(
                "parallel_folds must be at least 1".into(),
            ));
        }
        self.model.validate()
    }

    pub fn loss_for(&self, task: Task) -> Loss {
        self.loss.unwrap_or(Loss::for_task(task))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub fold: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub metric: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from("epoch,fold,train_loss,valid_loss,metric\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.fold,
            r.train_loss,
            opt(r.valid_loss),
            opt(r.metric)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    /// `None` when the metric is undefined, e.g. ROC AUC on a single class.
    pub metric: Option<f64>,
}

/// Evaluation-mode loss and metric over a dataset.
pub fn evaluate(model: &Model, ds: &Dataset, loss: Loss) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    let raw = ds
        .graphs
        .iter()
        .map(|g| model.predict_raw(g))
        .collect::<Result<Vec<_>>>()?;
    let target = ds.labels();
    let l = loss_value(loss, &raw, &target)?;
    let metric = match model.task {
        Task::Regression => Metric::Rmse.compute(&raw, &target).ok(),
        Task::Classification => Metric::RocAuc.compute(&raw, &target).ok(),
    };
    Ok(Evaluation { loss: l, metric })
}

/// Outcome of training one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Parameters from the epoch with the lowest selection loss.
    pub model: Model,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub trace: Vec<TraceRow>,
    pub test: Option<Evaluation>,
}

fn as_divergence(e: Error, fold: usize, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            fold,
            epoch,
            batch,
            reason: format!("non-finite value in {op}"),
        },
        Error::NoConvergence { .. } => Error::Divergence {
            fold,
            epoch,
            batch,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&crate::graph_data::Graph],
    loss: Loss,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, true)?;
    let mut outputs = Vec::with_capacity(batch.len());
    let mut target = Vec::with_capacity(batch.len());
    for g in batch {
        outputs.push(model.forward(&mut tape, &vars, g, true, rng)?.output);
        target
            .push(g.label.ok_or_else(|| {
                Error::InvalidArgument("unlabeled graph in training data".into())
            })?);
    }
    let l = loss_on_tape(&mut tape, loss, &outputs, &target)?;
    tape.backward(l)?;
    let grads: Vec<&Tensor> = vars
        .all()
        .into_iter()
        .map(|v| tape.grad(v).expect("parameters require gradients"))
        .collect();
    adam.update(&mut model.params.tensors_mut(), &grads, lr)?;
    Ok(tape.value(l).data()[0])
}

/// Trains `model` in place on `train`, selecting the best epoch by
/// validation loss (train loss when `valid` is `None`).
pub fn fit<R: Rng + ?Sized>(
    model: &mut Model,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    fold: usize,
    rng: &mut R,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let loss = cfg.loss_for(train.task);
    let mut adam = Adam::for_model(model);
    let initial = evaluate(model, train, loss)?.loss;
    let mut best = (
        valid
            .map(|v| evaluate(model, v, loss))
            .transpose()?
            .map_or(initial, |e| e.loss),
        0,
        model.clone(),
    );
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut last_train = initial;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| &train.graphs[i]).collect();
            let l = train_step(model, &mut adam, &batch, loss, cfg.lr, rng)
                .map_err(|e| as_divergence(e, fold, epoch, b))?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    fold,
                    epoch,
                    batch: b,
                    reason: format!("loss {l}"),
                });
            }
        }
        let on_train =
            evaluate(model, train, loss).map_err(|e| as_divergence(e, fold, epoch, 0))?;
        let on_valid = valid.map(|v| evaluate(model, v, loss)).transpose()?;
        last_train = on_train.loss;
        let selection = on_valid.as_ref().map_or(on_train.loss, |e| e.loss);
        trace.push(TraceRow {
            epoch,
            fold,
            train_loss: on_train.loss,
            valid_loss: on_valid.as_ref().map(|e| e.loss),
            metric: on_valid.as_ref().map_or(on_train.metric, |e| e.metric),
        });
        if selection < best.0 {
            best = (selection, epoch, model.clone());
        }
        if cfg
            .stop_at_train_ratio
            .is_some_and(|r| on_train.loss <= r * initial)
        {
            break;
        }
    }
    Ok(FoldResult {
        fold,
        model: best.2,
        best_epoch: best.1,
        initial_train_loss: initial,
        final_train_loss: last_train,
        trace,
        test: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub folds: Vec<FoldResult>,
    pub test_indices: Vec<usize>,
    pub metric: Metric,
}

impl TrainOutcome {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.folds
            .iter()
            .flat_map(|f| f.trace.iter().cloned())
            .collect()
    }

    /// Mean test metric across folds, if every fold has one.
    pub fn mean_test_metric(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self
            .folds
            .iter()
            .map(|f| f.test.as_ref().and_then(|t| t.metric))
            .collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// K-fold protocol: a held-out test split, then one model per fold trained
/// on the other folds and selected on its own validation fold.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let (Task::Regression, Some(Loss::Bce)) = (ds.task, cfg.loss) {
        return Err(Error::InvalidArgument(
            "BCE loss needs a classification dataset".into(),
        ));
    }
    let split = kfold_indices(ds.len(), cfg.folds, cfg.test_fraction, cfg.seed)?;
    let test = ds.subset(&split.test);
    let run = |k: usize| -> Result<FoldResult> {
        let fold = &split.folds[k];
        let mut rng = fold_rng(cfg.seed, k);
        let mut model = Model::new(ds.d_n, ds.d_e, ds.task, cfg.model, rng.random())?;
        let valid = ds.subset(&fold.valid);
        let mut result = fit(
            &mut model,
            &ds.subset(&fold.train),
            Some(&valid),
            cfg,
            k,
            &mut rng,
        )?;
        if !test.is_empty() {
            result.test = Some(evaluate(&result.model, &test, cfg.loss_for(ds.task))?);
        }
        Ok(result)
    };
    let mut folds = Vec::with_capacity(cfg.folds);
    let ids: Vec<usize> = (0..cfg.folds).collect();
    for group in ids.chunks(cfg.parallel_folds) {
        if group.len() == 1 {
            folds.push(run(group[0])?);
            continue;
        }
        let results: Vec<Result<FoldResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&k| s.spawn(move || run(k))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect()
        });
        for r in results {
            folds.push(r?);
        }
    }
    Ok(TrainOutcome {
        folds,
        test_indices: split.test,
        metric: Metric::for_task(ds.task),
    })
}

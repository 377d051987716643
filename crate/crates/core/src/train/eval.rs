use super::fit::argmax;
use crate::data::{load_batch, Normalization, SampleSource, TaskMode};
use crate::error::{Error, Result};
use crate::metrics::{auc_roc_ovr, confusion, summarize, MetricsReport};
use crate::model::Model;

/// Eval-mode outputs over a whole split, in source order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub classes: usize,
    /// N×K softmax probabilities, row-major.
    pub probs: Vec<f64>,
    pub predictions: Vec<usize>,
    pub truth: Vec<usize>,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl EvalOutput {
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .predictions
            .iter()
            .zip(&self.truth)
            .filter(|(p, t)| p == t)
            .count();
        correct as f64 / self.truth.len() as f64
    }

    /// Folds fine-grained outputs onto a coarser task. Predictions are the
    /// projected fine argmax, so every correct fine prediction stays correct;
    /// scores sum the probabilities of the fine classes in each coarse class.
    pub fn project(&self, from: TaskMode, to: TaskMode) -> Result<EvalOutput> {
        if from == to {
            return Ok(self.clone());
        }
        if from != TaskMode::FineGrained18 || self.classes != 18 {
            return Err(Error::Config(format!(
                "a {from} model cannot be evaluated as {to}; only fine18 outputs can be projected"
            )));
        }
        let k = to.num_classes();
        let mut probs = vec![0.0; self.truth.len() * k];
        for (row, out) in self.probs.chunks(18).zip(probs.chunks_mut(k)) {
            for (fine, &p) in row.iter().enumerate() {
                out[to.project(fine)] += p;
            }
        }
        let truth: Vec<usize> = self.truth.iter().map(|&t| to.project(t)).collect();
        let loss = probs
            .chunks(k)
            .zip(&truth)
            .map(|(row, &t)| -row[t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / truth.len() as f64;
        Ok(EvalOutput {
            classes: k,
            probs,
            predictions: self.predictions.iter().map(|&p| to.project(p)).collect(),
            truth,
            loss,
        })
    }

    pub fn report(&self, labels: Vec<String>) -> Result<MetricsReport> {
        let matrix = confusion(&self.truth, &self.predictions, self.classes)?;
        let aucs = auc_roc_ovr(&self.probs, self.classes, &self.truth)?;
        summarize(&matrix, &aucs, &labels)
    }
}

/// Batched eval-mode forward pass over every sample of `source`.
pub fn eval_pass(
    model: &Model<f32>,
    source: &dyn SampleSource,
    normalization: &Normalization,
    task: TaskMode,
    batch_size: usize,
) -> Result<EvalOutput> {
    if source.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let k = model.config().num_classes;
    if k != task.num_classes() {
        return Err(Error::Config(format!(
            "model has {k} outputs but task {task} has {} classes",
            task.num_classes()
        )));
    }
    let indices: Vec<usize> = (0..source.len()).collect();
    let mut probs = Vec::with_capacity(source.len() * k);
    let mut truth = Vec::with_capacity(source.len());
    let mut loss = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = load_batch(source, chunk, normalization, task)?;
        let logits = model.predict(&batch.images)?;
        for (row, &label) in logits.data().chunks(k).zip(&batch.labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += total.ln() - (row[label] as f64 - max);
            probs.extend(exps.iter().map(|e| e / total));
        }
        truth.extend(batch.labels);
    }
    Ok(EvalOutput {
        classes: k,
        predictions: probs.chunks(k).map(argmax).collect(),
        probs,
        loss: loss / truth.len() as f64,
        truth,
    })
}

/// Metrics of a `model_task` model on `source`, reported under `report_task`
/// (projected when coarser).
pub fn evaluate(
    model: &Model<f32>,
    source: &dyn SampleSource,
    normalization: &Normalization,
    model_task: TaskMode,
    report_task: TaskMode,
    batch_size: usize,
) -> Result<MetricsReport> {
    eval_pass(model, source, normalization, model_task, batch_size)?
        .project(model_task, report_task)?
        .report(report_task.label_names())
}

//! Mini-batch training with adadelta, activation-normalizing
//! initialization and evaluation.

use std::ops::Range;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{argmax, AnswerVocabulary};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{EvalReport, Taxonomy};
use crate::model::{FeatureNorm, Forward, InputGains, Model, ModelConfig, Prediction, Sample};
use crate::shapeworld::{cell_features, Category, Cell, DatasetDir, Example, HsvBins, Split};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const INIT_MAX_PASSES: usize = 10;
pub const INIT_STD_RANGE: (f64, f64) = (0.9, 1.1);

/// Everything that influences a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub rho: f64,
    pub epsilon: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 50,
            seed: 0,
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.model.validate()
    }
}

/// Adadelta running averages for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rho: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    mean_sq_grad: Vec<Vec<f64>>,
    mean_sq_delta: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<'a, I>(shapes: I, rho: f64, epsilon: f64, lr_scale: f64) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let zeros: Vec<Vec<f64>> = shapes
            .into_iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Self {
            rho,
            epsilon,
            lr_scale,
            mean_sq_grad: zeros.clone(),
            mean_sq_delta: zeros,
        }
    }

    pub fn mean_sq_grad(&self, i: usize) -> &[f64] {
        &self.mean_sq_grad[i]
    }

    pub fn mean_sq_delta(&self, i: usize) -> &[f64] {
        &self.mean_sq_delta[i]
    }

    /// Updates parameter `i` in place from `grad`.
    pub fn update(&mut self, i: usize, values: &mut [f64], grad: &[f64]) -> Result<()> {
        let (eg, ed) = match (self.mean_sq_grad.get_mut(i), self.mean_sq_delta.get_mut(i)) {
            (Some(eg), Some(ed)) => (eg, ed),
            _ => return Err(Error::Contract(format!("optimizer has no slot {i}"))),
        };
        if values.len() != eg.len() || grad.len() != eg.len() {
            return Err(crate::error::dim_err(
                "adadelta",
                format!("slot {i} holds {} values, got {} params and {} grads", eg.len(), values.len(), grad.len()),
            ));
        }
        let (rho, eps) = (self.rho, self.epsilon);
        for j in 0..values.len() {
            let g = grad[j];
            eg[j] = rho * eg[j] + (1.0 - rho) * g * g;
            let dx = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g;
            ed[j] = rho * ed[j] + (1.0 - rho) * dx * dx;
            values[j] += self.lr_scale * dx;
        }
        Ok(())
    }

    /// One step over tensors carrying their own gradient buffers. Tensors
    /// without a buffer are skipped.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut count = 0;
        for (i, t) in params.into_iter().enumerate() {
            count += 1;
            if let (values, Some(grad)) = t.values_and_grad_mut() {
                let grad = grad.to_vec();
                self.update(i, values, &grad)?;
            }
        }
        if count != self.mean_sq_grad.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, step received {count}",
                self.mean_sq_grad.len()
            )));
        }
        Ok(())
    }
}

/// A question with its raw cell features, ready for any model.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub gt_cells: Vec<Cell>,
    /// Raw `[C, N, N]` features.
    pub features: Tensor,
}

pub fn items_from_examples(examples: &[Example], grid: usize) -> Result<Vec<Item>> {
    examples
        .iter()
        .map(|e| {
            Ok(Item {
                question: e.qa.question.clone(),
                answer: e.qa.answer.clone(),
                category: e.qa.category,
                gt_cells: e.qa.gt_cells.clone(),
                features: cell_features(&e.image, grid, HsvBins::default())?,
            })
        })
        .collect()
}

/// Loads a split, extracting features once per distinct image.
pub fn load_items(dir: &DatasetDir, split: Split) -> Result<Vec<Item>> {
    let grid = dir.grid();
    let mut cache: std::collections::HashMap<String, Tensor> = Default::default();
    let mut out = Vec::new();
    for rec in dir.records(split)? {
        let features = match cache.get(&rec.image_path) {
            Some(f) => f.clone(),
            None => {
                let f = cell_features(&dir.image(&rec)?, grid, HsvBins::default())?;
                cache.insert(rec.image_path.clone(), f.clone());
                f
            }
        };
        out.push(Item {
            question: rec.question,
            answer: rec.answer,
            category: rec.category,
            gt_cells: rec.gt_cells,
            features,
        });
    }
    Ok(out)
}

pub fn samples(model: &Model, items: &[Item]) -> Result<Vec<Sample>> {
    items
        .iter()
        .map(|it| model.sample(&it.question, &it.features, Some(&it.answer)))
        .collect()
}

/// What initialization rescales to normalize a layer.
#[derive(Debug, Clone)]
enum Knob {
    Weights(Vec<String>),
    /// One of [`InputGains::NAMES`].
    Gain(&'static str),
}

/// Layers that initialization normalizes, in forward order.
fn init_layers(model: &Model) -> Vec<(&'static str, Knob)> {
    let mut layers: Vec<(&'static str, Knob)> = ["i", "f", "o", "g"]
        .into_iter()
        .zip(["gate_i", "gate_f", "gate_o", "gate_g"])
        .map(|(k, label)| (label, Knob::Weights(vec![format!("lstm.w_v{k}"), format!("lstm.w_h{k}")])))
        .collect();
    layers.push(("question", Knob::Gain("question")));
    if model.kernel.is_some() {
        layers.push(("kernel", Knob::Weights(vec!["kernel.w_sk".into()])));
        // Attention logits have no weight of their own; the image gain sets
        // their scale.
        layers.push(("attention", Knob::Gain("image")));
    }
    layers.push(("attended", Knob::Gain("attended")));
    layers.push(("reduce", Knob::Weights(vec!["reduce.w_reduce".into()])));
    layers.push((
        "fusion",
        Knob::Weights(vec!["answer.w_ih".into(), "answer.w_rh".into(), "answer.w_sh".into()]),
    ));
    layers.push(("logits", Knob::Weights(vec!["answer.w_ha".into()])));
    layers
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Pre-activation standard deviation of every normalized layer over the
/// calibration batch, labelled as in [`init_layers`].
pub fn layer_stds(model: &Model, calibration: &[Sample]) -> Result<Vec<(&'static str, f64)>> {
    if calibration.is_empty() {
        return Err(Error::Init("calibration batch is empty".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut rest: Vec<Vec<f64>> = vec![Vec::new(); 7];
    for s in calibration {
        let f = model.forward(&mut g, &bound, s)?;
        for (i, &v) in f.trace.lstm_gates.iter().enumerate() {
            pooled[i % 4].extend_from_slice(g.value(v));
        }
        let t = &f.trace;
        let extra: [Option<Var>; 7] = [t.question, t.kernel, t.attention, t.attended, t.reduced, t.fusion, t.logits];
        for (slot, v) in rest.iter_mut().zip(extra) {
            if let Some(v) = v {
                slot.extend_from_slice(g.value(v));
            }
        }
    }
    let labels = ["question", "kernel", "attention", "attended", "reduce", "fusion", "logits"];
    let mut out: Vec<(&'static str, f64)> = ["gate_i", "gate_f", "gate_o", "gate_g"]
        .into_iter()
        .zip(pooled.iter().map(|p| population_std(p)))
        .collect();
    out.extend(
        labels
            .into_iter()
            .zip(rest)
            .filter(|(_, v)| !v.is_empty())
            .map(|(l, v)| (l, population_std(&v))),
    );
    Ok(out)
}

/// Redraws all parameters, then rescales each projection layer, in forward
/// order, until its pre-activation standard deviation over the calibration
/// batch lies in [0.9, 1.1]. Biases stay zero. The question embedding, the
/// attention logits and the attention-weighted features are normalized the
/// same way through the model's [`InputGains`].
pub fn init_params<R: Rng + ?Sized>(model: &mut Model, calibration: &[Sample], rng: &mut R) -> Result<()> {
    model.randomize(rng);
    model.gains = InputGains::default();
    let layers = init_layers(model);
    let (gates, rest) = layers.split_at(4);
    // Every gate reads h, which depends on all four gates, so the gates are
    // swept together until they all hold at once.
    let mut round = 0;
    loop {
        for (label, knob) in gates {
            normalize_layer(model, calibration, label, knob)?;
        }
        let stds = measure(model, calibration)?;
        let off = stds
            .iter()
            .take(gates.len())
            .find(|(_, s)| !(INIT_STD_RANGE.0..=INIT_STD_RANGE.1).contains(s));
        match off {
            None => break,
            Some((label, std)) if round + 1 == INIT_MAX_PASSES => {
                return Err(Error::Init(format!(
                    "layer {label} std {std:.4} drifts after {INIT_MAX_PASSES} sweeps over the gates"
                )));
            }
            Some(_) => round += 1,
        }
    }
    for (label, knob) in rest {
        normalize_layer(model, calibration, label, knob)?;
    }
    Ok(())
}

fn measure(model: &Model, calibration: &[Sample]) -> Result<Vec<(&'static str, f64)>> {
    layer_stds(model, calibration).map_err(|e| match e {
        Error::NonFinite(m) => Error::Init(format!("non-finite activations: {m}")),
        other => other,
    })
}

fn normalize_layer(model: &mut Model, calibration: &[Sample], label: &str, knob: &Knob) -> Result<()> {
    let (lo, hi) = INIT_STD_RANGE;
    let mut pass = 0;
    // Recurrent layers respond superlinearly to their own scale, so each
    // correction divides log(std) by the gain observed on the last pass.
    let mut gain = 1.0f64;
    let mut last: Option<(f64, f64)> = None;
    loop {
        let std = measure(model, calibration)?
            .into_iter()
            .find(|(l, _)| *l == label)
            .map(|(_, s)| s)
            .expect("every layer is measured");
        if !std.is_finite() || std == 0.0 {
            return Err(Error::Init(format!("layer {label} has degenerate pre-activation std {std}")));
        }
        if (lo..=hi).contains(&std) {
            return Ok(());
        }
        if pass == INIT_MAX_PASSES {
            return Err(Error::Init(format!(
                "layer {label} std {std:.4} outside [{lo}, {hi}] after {INIT_MAX_PASSES} passes"
            )));
        }
        if let Some((prev_log_std, step)) = last {
            let observed = (std.ln() - prev_log_std) / step;
            if observed.is_finite() {
                gain = observed.clamp(0.25, 4.0);
            }
        }
        let step = -std.ln() / gain;
        match knob {
            Knob::Gain(name) => *model.gains.get_mut(name).expect("known gain") *= step.exp(),
            Knob::Weights(names) => {
                for (name, t) in model.named_params_mut() {
                    if names.contains(&name) {
                        t.scale_values(step.exp());
                    }
                }
            }
        }
        last = Some((std.ln(), step));
        pass += 1;
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training split after the epoch.
    pub loss: f64,
    pub train_acc: f64,
    /// Absent when there is no held-out split.
    pub val_acc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,train_acc,val_acc\n");
    for r in history {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.train_acc, val));
    }
    s
}

/// Splits `0..n` into at most `jobs` contiguous chunks, maps each on its own
/// thread and concatenates in order, so results never depend on `jobs`.
fn par_chunks<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<Vec<T>> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return f(0..n);
    }
    let chunk = n.div_ceil(jobs);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| scope.spawn(move || f(j * chunk..((j + 1) * chunk).min(n))))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Runs the model on every sample, binding parameters once per worker.
fn map_forward<T, F>(model: &Model, samples: &[Sample], jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Graph, &Forward, &Sample) -> T + Sync,
{
    par_chunks(samples.len(), jobs, |range| {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mark = g.len();
        let mut out = Vec::with_capacity(range.len());
        for s in &samples[range] {
            let fwd = model.forward(&mut g, &bound, s)?;
            out.push(f(&g, &fwd, s));
            g.truncate(mark);
        }
        Ok(out)
    })
}

/// Mean loss over samples with a known target, and accuracy over all.
pub fn loss_and_accuracy(model: &Model, samples: &[Sample], jobs: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let rows = map_forward(model, samples, jobs, |g, f, s| {
        let hit = s.target == Some(argmax(g.value(f.probs)));
        (f.loss.map(|l| g.value(l)[0]), hit)
    })?;
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.0).collect();
    let loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let acc = rows.iter().filter(|r| r.1).count() as f64 / rows.len() as f64;
    Ok((loss, acc))
}

/// Answers every sample; order follows `samples` regardless of `jobs`.
pub fn predict_samples(model: &Model, samples: &[Sample], jobs: usize) -> Result<Vec<Prediction>> {
    map_forward(model, samples, jobs, |g, f, _| model.prediction(g, f))
}

/// Answers every item; order follows `items` regardless of `jobs`.
pub fn predict_items(model: &Model, items: &[Item], jobs: usize) -> Result<Vec<Prediction>> {
    let samples: Vec<Sample> = items
        .iter()
        .map(|it| model.sample(&it.question, &it.features, None))
        .collect::<Result<_>>()?;
    predict_samples(model, &samples, jobs)
}

/// Scores predictions against stored answers. Answers outside the model's
/// dictionary are scored, never skipped.
pub fn report(items: &[Item], predictions: &[Prediction], taxonomy: &Taxonomy) -> Result<EvalReport> {
    if items.len() != predictions.len() {
        return Err(Error::Contract("one prediction per item required".into()));
    }
    EvalReport::compute(
        items
            .iter()
            .zip(predictions)
            .map(|(it, p)| (it.category.name(), p.answer.as_str(), it.answer.as_str())),
        taxonomy,
    )
}

pub fn evaluate(model: &Model, items: &[Item], taxonomy: &Taxonomy, jobs: usize) -> Result<EvalReport> {
    report(items, &predict_items(model, items, jobs)?, taxonomy)
}

/// Inputs to [`train`].
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub question_vocab: Vocabulary,
    pub answer_vocab: AnswerVocabulary,
    pub train: &'a [Item],
    pub test: &'a [Item],
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Trains from scratch. `on_epoch` sees every history row with the model
/// as of that row, starting with the untrained model at epoch 0.
///
/// Each epoch runs `ceil(n / batch)` steps on batches sampled uniformly
/// with replacement from a stream fixed by the seed.
pub fn train<F>(cfg: &TrainConfig, data: TrainData<'_>, jobs: usize, mut on_epoch: F) -> Result<Trained>
where
    F: FnMut(&EpochRecord, &Model) -> Result<()>,
{
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let norm = FeatureNorm::fit(data.train.iter().map(|it| &it.features), cfg.model.channels)?;
    let mut model = Model::new(cfg.model, data.question_vocab, data.answer_vocab, norm, &mut rng)?;
    let train_set = samples(&model, data.train)?;
    if let Some(i) = train_set.iter().position(|s| s.target.is_none()) {
        return Err(Error::Input(format!(
            "training answer '{}' is missing from the answer vocabulary",
            data.train[i].answer
        )));
    }
    let test_set = samples(&model, data.test)?;

    let calibration: Vec<Sample> = (0..cfg.batch_size)
        .map(|_| train_set[rng.gen_range(0..train_set.len())].clone())
        .collect();
    init_params(&mut model, &calibration, &mut rng)?;

    let record = |model: &Model, epoch: usize| -> Result<EpochRecord> {
        let (loss, train_acc) = loss_and_accuracy(model, &train_set, jobs)?;
        let val_acc = if test_set.is_empty() {
            None
        } else {
            Some(loss_and_accuracy(model, &test_set, jobs)?.1)
        };
        Ok(EpochRecord {
            epoch,
            loss,
            train_acc,
            val_acc,
        })
    };

    let mut history = vec![record(&model, 0)?];
    on_epoch(&history[0], &model)?;

    let mut opt = OptimizerState::new(
        model.named_params().iter().map(|(_, t)| t.shape()),
        cfg.rho,
        cfg.epsilon,
        cfg.learning_rate,
    );
    let steps = train_set.len().div_ceil(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        for step in 0..steps {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..train_set.len()))
                .collect();
            train_step(&mut model, &mut opt, &train_set, &batch).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
        }
        let r = record(&model, epoch)?;
        if !r.loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: training loss is {}", r.loss)));
        }
        history.push(r);
        on_epoch(&r, &model)?;
    }
    Ok(Trained { model, history })
}

/// Accumulates the gradient of the mean batch loss into the model's
/// parameters (after clearing them) and returns that loss.
pub fn batch_gradient(model: &mut Model, samples: &[Sample], batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    model.zero_grad();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let f = model.forward(&mut g, &bound, &samples[i])?;
        losses.push(f.loss.ok_or_else(|| Error::Input("sample without a target in a training batch".into()))?);
    }
    let total = g.add_n(&losses)?;
    let mean = g.scale(total, 1.0 / batch.len() as f64)?;
    g.backward(mean)?;
    model.absorb_grads(&g, &bound)?;
    Ok(g.value(mean)[0])
}

/// One adadelta step on a batch; returns the batch loss before the update.
pub fn train_step(model: &mut Model, opt: &mut OptimizerState, samples: &[Sample], batch: &[usize]) -> Result<f64> {
    let loss = batch_gradient(model, samples, batch)?;
    opt.step(model.named_params_mut().into_iter().map(|(_, t)| t))?;
    Ok(loss)
}

//! Optimizers, training loops, evaluation and run persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, GraphDataset, NodeDataset};
use crate::error::{Error, Result};
use crate::herald::{topology_regularizer, GraphContext};
use crate::model::{BoundParams, ForwardOutput, GraphVars, HeraldMode, Model, ModelConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Seeds the dropout stream independently of weight initialization.
const DROPOUT_STREAM: u64 = 0x5eed_d20f;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub reg_weight: f64,
    pub seed: u64,
    /// Graphs per optimizer step in graph classification.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 300,
            patience: 50,
            reg_weight: 0.1,
            seed: 0,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "regularizer weight must be non-negative, got {}",
                self.reg_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi + self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * (gi + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.lr, cfg.weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
            }),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::Sgd(o) => o.step(params, grads),
        }
    }
}

/// Fraction of `idx` whose row argmax equals the label.
pub fn evaluate(logits: &Tensor, labels: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let pred = logits.argmax_rows();
    let hits = idx.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cross-entropy on `targets` plus `reg_weight` times the summed topology
/// regularizer of every adaptor call in `out`.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    graph: GraphVars,
    targets: &[(usize, usize)],
    reg_weight: f64,
) -> Result<Var> {
    let mut loss = tape.softmax_cross_entropy(out.logits, targets)?;
    if reg_weight > 0.0 {
        for (_, trace) in &out.traces {
            let r = topology_regularizer(tape, graph.propagation, trace.n_res)?;
            let r = tape.scale(r, reg_weight)?;
            loss = tape.add(loss, r)?;
        }
    }
    Ok(loss)
}

fn collect_grads(
    tape: &Tape,
    loss: Var,
    bound: &BoundParams,
    model: &Model,
) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(bound
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect())
}

fn numerical(epoch: usize, model: &Model, cause: &dyn std::fmt::Display) -> Error {
    let norms: Vec<String> = model
        .params()
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.frobenius_norm()))
        .collect();
    Error::Numerical(format!(
        "epoch {epoch}: {cause}; parameter norms: {}",
        norms.join(", ")
    ))
}

fn guard<T>(epoch: usize, model: &Model, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => numerical(epoch, model, &e),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Node,
    Graph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

/// Everything a run produced. Per-epoch logs are persisted separately from
/// the summary fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub dataset: String,
    pub seed: u64,
    pub herald: HeraldMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameter_count: usize,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Test accuracy, or the mean over folds for cross-validation.
    pub test_acc: f64,
    /// Population standard deviation over folds.
    pub test_std: Option<f64>,
    pub fold_accuracies: Vec<f64>,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub epochs: Vec<EpochRecord>,
}

/// Trains a node classifier. The returned model carries the weights of the
/// epoch with the best validation accuracy.
pub fn train_node(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ds: &NodeDataset,
) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.input_dim() != ds.num_features() || model_cfg.num_classes != ds.num_classes {
        return Err(Error::Config(format!(
            "model expects {} features and {} classes, dataset has {} and {}",
            model_cfg.input_dim(),
            model_cfg.num_classes,
            ds.num_features(),
            ds.num_classes
        )));
    }
    let start = Instant::now();
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let ctx = GraphContext::new(ds.hypergraph.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut opt = Optimizer::from_config(cfg);
    let targets: Vec<(usize, usize)> = ds.train.iter().map(|&v| (v, ds.labels[v])).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let step = (|| {
            let bound = model.bind(&mut tape)?;
            let x = tape.constant(ds.features.clone())?;
            let gv = GraphVars::new(&mut tape, &ctx)?;
            let out = model.forward(&mut tape, &bound, x, gv, Some(&mut rng))?;
            let loss = total_loss(&mut tape, &out, gv, &targets, cfg.reg_weight)?;
            let grads = collect_grads(&tape, loss, &bound, &model)?;
            Ok((tape.value(loss).item(), grads))
        })();
        let (train_loss, grads) = guard(epoch, &model, step)?;
        if !train_loss.is_finite() {
            return Err(numerical(epoch, &model, &format!("loss is {train_loss}")));
        }
        opt.step(model.params_mut().tensors_mut(), &grads);
        let logits = guard(epoch, &model, model.forward_node(&ds.features, &ctx))?;
        let val_acc = evaluate(&logits, &ds.labels, &ds.val)?;
        log::debug!("epoch {epoch}: loss {train_loss:.5} val {val_acc:.4}");
        epochs.push(EpochRecord {
            fold: None,
            epoch,
            train_loss,
            val_acc: Some(val_acc),
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_acc > *b) {
            best = Some((epoch, val_acc, model.params().tensors().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val, weights) = best.expect("at least one epoch ran");
    model.params_mut().tensors_mut().clone_from_slice(&weights);
    let logits = model.forward_node(&ds.features, &ctx)?;
    let test_acc = evaluate(&logits, &ds.labels, &ds.test)?;
    let record = RunRecord {
        task: Task::Node,
        dataset: ds.name.clone(),
        seed: cfg.seed,
        herald: model_cfg.herald_mode(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        parameter_count: model.parameter_count(),
        best_epoch: Some(best_epoch),
        best_val_acc: Some(best_val),
        test_acc,
        test_std: None,
        fold_accuracies: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        epochs,
    };
    Ok((record, model))
}

/// Mean and population standard deviation of per-fold scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CvSummary {
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs `run_fold(fold, train, test)` for each of `k` stratified folds.
pub fn cross_validate<F>(
    labels: &[usize],
    k: usize,
    seed: u64,
    mut run_fold: F,
) -> Result<CvSummary>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<f64>,
{
    let folds = make_folds(labels, k, seed)?;
    let mut scores = Vec::with_capacity(k);
    for (i, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        scores.push(run_fold(i, &train, test)?);
    }
    let (mean, std) = mean_std(&scores);
    Ok(CvSummary {
        fold_scores: scores,
        mean,
        std,
    })
}

/// Trains one graph classifier on `train` and returns it with its per-epoch
/// mean loss.
pub fn fit_graph(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ds: &GraphDataset,
    contexts: &[GraphContext],
    train: &[usize],
    shuffle_seed: u64,
) -> Result<(Model, Vec<f64>)> {
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Optimizer::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ DROPOUT_STREAM);
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for &g in batch {
                let sample = &ds.samples[g];
                let mut tape = Tape::new();
                let step = (|| {
                    let bound = model.bind(&mut tape)?;
                    let x = tape.constant(sample.features.clone())?;
                    let gv = GraphVars::new(&mut tape, &contexts[g])?;
                    let out = model.forward(&mut tape, &bound, x, gv, Some(&mut drop_rng))?;
                    let loss =
                        total_loss(&mut tape, &out, gv, &[(0, sample.label)], cfg.reg_weight)?;
                    let grads = collect_grads(&tape, loss, &bound, &model)?;
                    Ok((tape.value(loss).item(), grads))
                })();
                let (loss, grads) = guard(epoch, &model, step)?;
                if !loss.is_finite() {
                    return Err(numerical(
                        epoch,
                        &model,
                        &format!("loss is {loss} on graph {g}"),
                    ));
                }
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y / batch.len() as f64;
                    }
                }
            }
            opt.step(model.params_mut().tensors_mut(), &acc);
        }
        losses.push(epoch_loss / order.len() as f64);
    }
    Ok((model, losses))
}

/// Accuracy of `model` over the graphs in `idx`.
pub fn evaluate_graphs(
    model: &Model,
    ds: &GraphDataset,
    contexts: &[GraphContext],
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut hits = 0;
    for &g in idx {
        let logits = model.forward_graph(&ds.samples[g].features, &contexts[g])?;
        if logits.argmax_rows()[0] == ds.samples[g].label {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

pub fn graph_contexts(ds: &GraphDataset) -> Result<Vec<GraphContext>> {
    ds.samples
        .iter()
        .map(|s| GraphContext::new(s.hypergraph.clone()))
        .collect()
}

/// k-fold cross-validation: per fold, train on the other folds for the full
/// epoch budget and score the final model on the held-out fold. Returns the
/// record and the model of the last fold.
pub fn train_graph(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ds: &GraphDataset,
    folds: usize,
) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.input_dim() != ds.num_features || model_cfg.num_classes != ds.num_classes {
        return Err(Error::Config(format!(
            "model expects {} features and {} classes, dataset has {} and {}",
            model_cfg.input_dim(),
            model_cfg.num_classes,
            ds.num_features,
            ds.num_classes
        )));
    }
    let start = Instant::now();
    let contexts = graph_contexts(ds)?;
    let mut epochs = Vec::new();
    let mut last = None;
    let cv = cross_validate(&ds.labels(), folds, cfg.seed, |fold, train, test| {
        let (model, losses) = fit_graph(
            model_cfg,
            cfg,
            ds,
            &contexts,
            train,
            cfg.seed.wrapping_add(fold as u64),
        )?;
        let acc = evaluate_graphs(&model, ds, &contexts, test)?;
        log::info!("{} fold {}: test accuracy {acc:.4}", ds.name, fold + 1);
        epochs.extend(losses.into_iter().enumerate().map(|(e, l)| EpochRecord {
            fold: Some(fold),
            epoch: e + 1,
            train_loss: l,
            val_acc: None,
        }));
        last = Some(model);
        Ok(acc)
    })?;
    let model = last.expect("at least one fold");
    let record = RunRecord {
        task: Task::Graph,
        dataset: ds.name.clone(),
        seed: cfg.seed,
        herald: model_cfg.herald_mode(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        parameter_count: model.parameter_count(),
        best_epoch: None,
        best_val_acc: None,
        test_acc: cv.mean,
        test_std: Some(cv.std),
        fold_accuracies: cv.fold_scores,
        wall_time_secs: start.elapsed().as_secs_f64(),
        epochs,
    };
    Ok((record, model))
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    task: Task,
    dataset: &'a str,
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Writes `config.json`, `metrics.jsonl`, `summary.json` and, when given,
/// `checkpoint.json` into `dir`.
pub fn save_run(dir: &Path, record: &RunRecord, model: Option<&Model>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let snapshot = ConfigSnapshot {
        task: record.task,
        dataset: &record.dataset,
        seed: record.seed,
        model: &record.model,
        train: &record.train,
    };
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&snapshot)?,
    )?;
    let mut metrics = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    for e in &record.epochs {
        serde_json::to_writer(&mut metrics, e)?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(record)?,
    )?;
    if let Some(m) = model {
        m.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)?;
    let mut record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        for (i, line) in BufReader::new(fs::File::open(&metrics)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            record
                .epochs
                .push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                    context: format!("{}:{}", metrics.display(), i + 1),
                    message: e.to_string(),
                })?);
        }
    }
    Ok(record)
}

/// One aggregated row: all runs sharing task, dataset and adaptor mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub task: Task,
    pub dataset: String,
    pub herald: HeraldMode,
    pub runs: usize,
    /// Node runs contribute their test accuracy; cross-validation runs
    /// contribute every fold accuracy.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn find_summaries(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(SUMMARY_FILE).is_file() {
        out.push(root.to_path_buf());
    }
    if root.is_dir() {
        let mut children: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for c in children {
            find_summaries(&c, out)?;
        }
    }
    Ok(())
}

type Group = (Task, HeraldMode, String, usize, Vec<f64>);

/// Aggregates every run directory below `root`.
pub fn report(root: &Path) -> Result<Vec<ReportRow>> {
    let mut dirs = Vec::new();
    find_summaries(root, &mut dirs)?;
    let mut groups: BTreeMap<(String, String, String), Group> = BTreeMap::new();
    for d in dirs {
        let r = load_run(&d)?;
        let key = (
            format!("{:?}", r.task),
            r.dataset.clone(),
            format!("{:?}", r.herald),
        );
        let entry = groups
            .entry(key)
            .or_insert_with(|| (r.task, r.herald, r.dataset.clone(), 0, Vec::new()));
        entry.3 += 1;
        if r.fold_accuracies.is_empty() {
            entry.4.push(r.test_acc);
        } else {
            entry.4.extend(&r.fold_accuracies);
        }
    }
    Ok(groups
        .into_values()
        .map(|(task, herald, dataset, runs, scores)| {
            let (mean, std) = mean_std(&scores);
            ReportRow {
                task,
                dataset,
                herald,
                runs,
                scores,
                mean,
                std,
            }
        })
        .collect())
}

//! AdamW training, evaluation and cross-validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    compute_metrics, confusion_matrix, make_folds, write_fold_metrics, CrossValidationSummary,
    Dataset, DatasetManifest, MetricsReport,
};
use crate::error::{Error, Result};
use crate::losses::{cmdt_loss, LossConfig, PrototypeBank};
use crate::model::{batch_loss, Model, ModelConfig};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps_opt: f64,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 32,
            epochs: 50,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps_opt: 1e-8,
            seed: 0,
            lambda: 0.1,
            tau: 0.1,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so that a frozen run can still report losses.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be a nonnegative finite number");
        }
        if self.batch == 0 {
            return fail("batch must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be nonnegative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.eps_opt > 0.0) {
            return fail("eps_opt must be positive");
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
        }
    }
}

/// First and second moments in [`ParamStore`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Decoupled weight decay, then the bias-corrected Adam update.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = store.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "adamw: {n} parameters but {} gradients and {} moment pairs",
            grads.len(),
            state.m.len().min(state.v.len())
        )));
    }
    for (i, (p, g)) in store.values().iter().zip(grads).enumerate() {
        if p.value.shape() != g.shape() || state.m[i].shape() != g.shape() || state.v[i].shape() != g.shape() {
            return Err(Error::invalid(format!(
                "adamw: parameter {} has shape {:?}, gradient {:?}",
                store.names()[i],
                p.value.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, p) in store.values_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (theta, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta *= decay;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_opt);
        }
    }
    Ok(())
}

/// Sample-weighted means over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub ce: f64,
    pub cmdt: f64,
    pub total: f64,
}

/// Batch membership for `epoch`: a permutation of `0..n` seeded by
/// `seed + epoch`, cut into runs of `batch` with a short tail kept.
pub fn batch_order(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_finite(t: &Tensor, name: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { tensor: name() })
    }
}

/// One pass over `samples` with one optimizer step per batch.
///
/// With `λ = 0` the contrastive term is left out of the graph and evaluated
/// separately for the log only.
pub fn train_epoch(
    model: &mut Model,
    state: &mut AdamWState,
    samples: &[(&Tensor, usize)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::invalid("train_epoch needs at least one sample"));
    }
    let loss_cfg = cfg.loss();
    let mut sums = EpochStats {
        ce: 0.0,
        cmdt: 0.0,
        total: 0.0,
    };
    for members in batch_order(samples.len(), cfg.batch, cfg.seed, epoch) {
        let batch: Vec<(&Tensor, usize)> = members.iter().map(|&i| samples[i]).collect();
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, true);
        let out = batch_loss(&mut g, &bound, model, &batch, &loss_cfg)?;
        let total = g.value(out.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite {
                tensor: "loss.total".into(),
            });
        }
        let ce = g.value(out.ce).data()[0];
        let cmdt = match out.cmdt {
            Some(v) => g.value(v).data()[0],
            None => {
                let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
                let bank = PrototypeBank::new(model.store.get(model.params.prototypes).clone())?;
                cmdt_loss(g.value(out.pooled), &labels, &bank, &loss_cfg)?
            }
        };
        let grads = g.backward(out.total)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(model.store.iter())
            .map(|(&v, (name, p))| {
                let d = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
                check_finite(&d, || format!("grad.{name}")).map(|_| d)
            })
            .collect::<Result<_>>()?;
        adamw_step(&mut model.store, &grads, state, cfg)?;
        for (name, p) in model.store.iter() {
            check_finite(p, || name.to_string())?;
        }
        let n = batch.len() as f64;
        sums.ce += ce * n;
        sums.cmdt += cmdt * n;
        sums.total += total * n;
    }
    let n = samples.len() as f64;
    Ok(EpochStats {
        ce: sums.ce / n,
        cmdt: sums.cmdt / n,
        total: sums.total / n,
    })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(model: &Model, samples: &[(&Tensor, usize)]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|(x, _)| model.predict(x).map(|(logits, _)| argmax(&logits)))
        .collect()
}

pub fn evaluate(model: &Model, samples: &[(&Tensor, usize)]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate needs at least one sample"));
    }
    let preds = predictions(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
    compute_metrics(&confusion_matrix(&labels, &preds, model.config.classes)?)
}

/// One row of a fold's training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub ce: f64,
    pub cmdt: f64,
    pub total: f64,
    pub eval_wa: f64,
    pub eval_ua: f64,
    pub eval_wf1: f64,
}

pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Epoch with the highest held-out WA, earliest on ties.
    pub best_epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub folds: Vec<FoldResult>,
    pub summary: CrossValidationSummary,
}

/// Training artifacts of one fold.
#[derive(Clone, Debug)]
pub struct FoldRun {
    pub result: FoldResult,
    pub log: Vec<LogRow>,
    pub best: Model,
}

/// Trains a fresh model on `train` and keeps the epoch that scores best on
/// `test`. Initialization draws from stream `fold` of the seeded generator.
pub fn train_fold(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
    train: &[(&Tensor, usize)],
    test: &[(&Tensor, usize)],
) -> Result<FoldRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64);
    let mut model = Model::new(model_cfg.clone(), &mut rng)?;
    let mut state = AdamWState::new(&model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, MetricsReport, Model)> = None;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&mut model, &mut state, train, cfg, epoch)?;
        let report = evaluate(&model, test)?;
        log.push(LogRow {
            epoch,
            ce: stats.ce,
            cmdt: stats.cmdt,
            total: stats.total,
            eval_wa: report.wa,
            eval_ua: report.ua,
            eval_wf1: report.wf1,
        });
        if best.as_ref().is_none_or(|b| report.wa > b.1.wa) {
            best = Some((epoch, report, model.clone()));
        }
    }
    let (best_epoch, report, best) = match best {
        Some(b) => b,
        None => {
            let report = evaluate(&model, test)?;
            (0, report, model)
        }
    };
    Ok(FoldRun {
        result: FoldResult {
            fold,
            best_epoch,
            report,
        },
        log,
        best,
    })
}

/// Cross-validation over `manifest`. With `out` set, writes per fold
/// `fold{i}/log.csv` and `fold{i}/best.tfmb`, plus `metrics.csv` and
/// `aggregate.json`.
pub fn fit(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    n_folds: usize,
    out: Option<&Path>,
) -> Result<FitReport> {
    model_cfg.validate()?;
    cfg.validate()?;
    if model_cfg.classes != manifest.labels.len() {
        return Err(Error::LabelMismatch(format!(
            "model has {} classes, label map has {}",
            model_cfg.classes,
            manifest.labels.len()
        )));
    }
    let folds = make_folds(manifest, n_folds, cfg.seed)?;
    let data = Dataset::load(manifest)?;
    if data.dim() != model_cfg.d_in {
        return Err(Error::shape(format!(
            "features have D = {} but model.d_in = {}",
            data.dim(),
            model_cfg.d_in
        )));
    }
    let pick = |ids: &[usize]| -> Vec<(&Tensor, usize)> {
        ids.iter()
            .map(|&i| (data.samples[i].features(), data.samples[i].label as usize))
            .collect()
    };
    let mut results = Vec::with_capacity(folds.len());
    for split in &folds {
        let run = train_fold(model_cfg, cfg, split.fold, &pick(&split.train), &pick(&split.test))?;
        if let Some(dir) = out {
            let dir = dir.join(format!("fold{}", split.fold));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_log(dir.join("log.csv"), &run.log)?;
            let mut ckpt = Checkpoint::from_model(
                &run.best,
                manifest.labels.classes.clone(),
                ((run.result.best_epoch + 1) * split.train.len().div_ceil(cfg.batch)) as u64,
                cfg.seed,
            );
            ckpt.header.fold = Some(split.fold);
            ckpt.header.n_folds = Some(n_folds);
            ckpt.header.epoch = Some(run.result.best_epoch);
            ckpt.save(dir.join("best.tfmb"))?;
        }
        results.push(run.result);
    }
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    let report = FitReport {
        summary: CrossValidationSummary::from_reports(&reports),
        folds: results,
    };
    if let Some(dir) = out {
        write_fold_metrics(dir.join("metrics.csv"), &reports)?;
        let path = dir.join("aggregate.json");
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

//! Subcommand bodies. Each prints the resolved configuration to stderr
//! before doing any work; results go to stdout and to files under `out`.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tfmamba_core::checkpoint::Checkpoint;
use tfmamba_core::data::{
    load_feature_file, make_folds, nearest_carrier, synth_generate, write_confusion, Dataset,
    DatasetManifest, LabelMap, ManifestRow, MetricsReport, SyntheticSpec,
};
use tfmamba_core::model::attention_encoder;
use tfmamba_core::numerics::{Graph, Tensor};
use tfmamba_core::tf_block::tf_block_forward_traced;
use tfmamba_core::trainer::{evaluate, fit, FitReport};
use tfmamba_core::Error;

use crate::config::RunConfig;
use crate::exit::CliError;

pub fn print_resolved(command: &str, cfg: &RunConfig) {
    eprintln!("# resolved configuration ({command})\n{}", cfg.to_json());
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// Cross-validated training. Writes `resolved_config.json`, per-fold logs
/// and checkpoints, `metrics.csv` and `aggregate.json` under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<FitReport, CliError> {
    print_resolved("train", cfg);
    cfg.validate_training()?;
    let manifest_path = cfg.manifest_path()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("resolved_config.json"), cfg)?;
    let report = fit(&manifest, &cfg.model, &cfg.train, cfg.folds, Some(&cfg.out))?;
    for f in &report.folds {
        println!(
            "fold {}: best epoch {} wa {:.4} ua {:.4} wf1 {:.4}",
            f.fold, f.best_epoch, f.report.wa, f.report.ua, f.report.wf1
        );
    }
    let s = &report.summary;
    println!(
        "mean over {} folds: wa {:.4} ± {:.4} ua {:.4} ± {:.4} wf1 {:.4} ± {:.4}",
        s.folds, s.wa.mean, s.wa.std, s.ua.mean, s.ua.std, s.wf1.mean, s.wf1.std
    );
    Ok(report)
}

/// Scores a checkpoint on a manifest, or on the held-out part of one fold
/// when `fold` is given. Writes `confusion.csv` and `eval.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    fold: Option<usize>,
) -> Result<MetricsReport, CliError> {
    print_resolved("eval", cfg);
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest_path = match manifest {
        Some(p) if !p.is_file() => {
            return Err(CliError::io(format!("manifest not found: {}", p.display())));
        }
        Some(p) => p,
        None => cfg.manifest_path()?,
    };
    let manifest = DatasetManifest::load(manifest_path)?;
    if ckpt.header.classes != manifest.labels.classes {
        return Err(CliError::mismatch(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            ckpt.header.classes, manifest.labels.classes
        )));
    }
    let seed = ckpt.header.seed;
    let n_folds = ckpt.header.n_folds.unwrap_or(cfg.folds);
    let model = ckpt.into_model()?;
    let data = Dataset::load(&manifest)?;
    if data.dim() != model.config.d_in {
        return Err(CliError::mismatch(format!(
            "features have D = {} but the checkpoint expects {}",
            data.dim(),
            model.config.d_in
        )));
    }
    let ids: Vec<usize> = match fold {
        Some(f) => {
            let folds = make_folds(&manifest, n_folds, seed)?;
            folds
                .get(f)
                .ok_or_else(|| CliError::config(format!("fold {f} outside 0..{n_folds}")))?
                .test
                .clone()
        }
        None => (0..data.len()).collect(),
    };
    let samples: Vec<(&Tensor, usize)> = ids
        .iter()
        .map(|&i| (data.samples[i].features(), data.samples[i].label as usize))
        .collect();
    let report = evaluate(&model, &samples)?;
    create_dir(&cfg.out)?;
    write_confusion(cfg.out.join("confusion.csv"), &report, &manifest.labels.classes)?;
    write_json(&cfg.out.join("eval.json"), &report)?;
    println!("wa {} ua {} wf1 {} n {}", report.wa, report.ua, report.wf1, samples.len());
    Ok(report)
}

/// Summary of a generated corpus.
#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub files: usize,
    pub manifest: PathBuf,
    /// Share of utterances whose periodogram peak is nearest their own carrier.
    pub carrier_oracle_accuracy: f64,
}

/// Writes `{id}.tff` files, `manifest.csv`, `labels.json` and `synth.json`
/// into `cfg.out`. `spec` replaces `cfg.synth` when given.
pub fn cmd_synth(cfg: &RunConfig, spec: Option<&Path>) -> Result<SynthSummary, CliError> {
    let spec: SyntheticSpec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
                .map_err(|e| CliError::config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?
        }
        None => cfg.synth.clone(),
    };
    let mut shown = cfg.clone();
    shown.synth = spec.clone();
    print_resolved("synth", &shown);
    let files = synth_generate(&spec)?;
    let labels = LabelMap::new(spec.class_names())?;
    create_dir(&cfg.out)?;
    let mut rows = Vec::with_capacity(files.len());
    let mut hits = 0;
    for f in &files {
        let name = format!("{}.tff", f.id);
        f.write(cfg.out.join(&name))?;
        if nearest_carrier(f.features(), &spec.carriers)? == f.label as usize {
            hits += 1;
        }
        rows.push(ManifestRow {
            path: name,
            label: labels.classes[f.label as usize].clone(),
            fold_hint: None,
        });
    }
    let manifest = cfg.out.join("manifest.csv");
    DatasetManifest::write(&manifest, &labels, &rows)?;
    write_json(&cfg.out.join("synth.json"), &spec)?;
    let summary = SynthSummary {
        files: files.len(),
        manifest,
        carrier_oracle_accuracy: hits as f64 / files.len() as f64,
    };
    println!(
        "wrote {} files and {}; periodogram oracle accuracy {:.4}",
        summary.files,
        summary.manifest.display(),
        summary.carrier_oracle_accuracy
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntensityRow {
    pub token: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub bin: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    pub intensity: Vec<IntensityRow>,
    /// Absent when the first block has no frequency branch.
    pub spectrum: Option<Vec<SpectrumRow>>,
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Channel-mean power per bin of a `[2, L', C]` spectrum.
fn mean_power(spec: &Tensor) -> Vec<f64> {
    let (bins, ch) = (spec.shape()[1], spec.shape()[2]);
    let (re, im) = spec.data().split_at(bins * ch);
    (0..bins)
        .map(|k| (0..ch).map(|c| re[k * ch + c].powi(2) + im[k * ch + c].powi(2)).sum::<f64>() / ch as f64)
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(path, e).into())
}

/// Traces the first block on one utterance. Writes `inspect_intensity.csv`
/// (per-token L2 norm of the temporal branch input and output) and, for a
/// block with a frequency branch, `inspect_spectrum.csv` (channel-mean power
/// before and after the gate).
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, features: &Path) -> Result<InspectReport, CliError> {
    print_resolved("inspect", cfg);
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let file = load_feature_file(features)?;
    let block = model
        .params
        .blocks
        .first()
        .ok_or_else(|| CliError::config("checkpoint has no TF block to inspect"))?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, false);
    let x = g.constant(file.features().clone());
    let input = match &model.params.encoder {
        Some(p) => attention_encoder(&mut g, &bound, p, x, model.config.heads)?,
        None => x,
    };
    let trace = tf_block_forward_traced(&mut g, &bound, block, input, &model.config.block)?;
    let intensity: Vec<IntensityRow> = row_norms(g.value(trace.phi_t))
        .into_iter()
        .zip(row_norms(g.value(trace.y_t)))
        .enumerate()
        .map(|(token, (before, after))| IntensityRow { token, before, after })
        .collect();
    create_dir(&cfg.out)?;
    write_rows(&cfg.out.join("inspect_intensity.csv"), &intensity)?;
    let spectrum = match (trace.spectrum_before, trace.spectrum_after) {
        (Some(b), Some(a)) => {
            let rows: Vec<SpectrumRow> = mean_power(g.value(b))
                .into_iter()
                .zip(mean_power(g.value(a)))
                .enumerate()
                .map(|(bin, (before, after))| SpectrumRow { bin, before, after })
                .collect();
            write_rows(&cfg.out.join("inspect_spectrum.csv"), &rows)?;
            Some(rows)
        }
        _ => {
            eprintln!("first block has no frequency branch; skipping inspect_spectrum.csv");
            None
        }
    };
    println!("wrote inspection traces to {}", cfg.out.display());
    Ok(InspectReport { intensity, spectrum })
}

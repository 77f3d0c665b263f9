//! Batch pipeline stages behind the command-line surface: synthesis,
//! preprocessing, training, evaluation, ensembling, ROC export and the
//! gradient self-check.
//!
//! Every stage is a pure function of (config, input files, seed); output
//! trees contain only relocatable relative paths, so reruns are
//! byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    generate_synthetic, oversample_minority, stratified_split, DatasetError, Manifest,
    SampleRecord, Split,
};
use crate::ensemble::{
    compute_weights, decide, soft_vote, EnsembleError, EnsembleSpec, WeightMetric,
};
use crate::gray::{self, ImageError};
use crate::loss::{LossConfig, LossError};
use crate::metrics::{
    evaluate_scores, export_roc_set, roc_auc, MetricsError, MetricsReport, RocCurve,
};
use crate::mix_seed;
use crate::nn::checkpoint::load_checkpoint;
use crate::nn::gradcheck;
use crate::nn::{Model, NnError, Tensor};
use crate::preprocess::{clahe, normalize_intensity, resize_pad, PreprocessError};
use crate::train::{predict_scores, train_model, LoadedDataset, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("no model named {0:?} in the configuration")]
    NoSuchModel(String),
    #[error("manifest has no records in the {0} split")]
    EmptySplit(Split),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Express `target` relative to `base` (a directory), so emitted files
/// never embed machine-specific absolute paths.
fn relativize(base: &Path, target: &Path) -> PathBuf {
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    let target = target
        .canonicalize()
        .unwrap_or_else(|_| target.to_path_buf());
    let mut b = base.components().peekable();
    let mut t = target.components().peekable();
    while let (Some(x), Some(y)) = (b.peek(), t.peek()) {
        if x == y {
            b.next();
            t.next();
        } else {
            break;
        }
    }
    let mut rel = PathBuf::new();
    for _ in b {
        rel.push("..");
    }
    for c in t {
        rel.push(c.as_os_str());
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}

/// Generate the synthetic dataset, assign stratified train/val/test splits,
/// and write `manifest.csv` plus the images under `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let manifest = generate_synthetic(&cfg.dataset.synth, out_dir)?;
    let (trainval, test) = stratified_split(
        &manifest,
        1.0 - cfg.dataset.test_fraction,
        mix_seed(cfg.seed, 0x7e57),
    )?;
    let (train, val) = stratified_split(
        &trainval,
        cfg.dataset.train_fraction,
        mix_seed(cfg.seed, 0x5a17),
    )?;
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (subset, split) in [
        (&train, Split::Train),
        (&val, Split::Val),
        (&test, Split::Test),
    ] {
        for r in subset.records() {
            assignment.insert(r.image_id.clone(), split);
        }
    }
    let records: Vec<SampleRecord> = manifest
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.split = assignment.get(&r.image_id).copied();
            r
        })
        .collect();
    let manifest_path = out_dir.join("manifest.csv");
    Manifest::from_records(records).save_csv(&manifest_path)?;
    Ok(manifest_path)
}

/// Condition every image (normalize, CLAHE, resize/pad) and write a new
/// manifest + 16-bit PGM tree under `out_dir`.
pub fn cmd_preprocess(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let manifest = Manifest::load_csv(manifest_path)?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| io_err(&image_dir, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for r in manifest.records() {
        let img = gray::read_image(&r.path)?;
        let img = normalize_intensity(&img)?;
        let img = clahe(&img, &cfg.preprocess.clahe)?;
        let img = resize_pad(&img, &cfg.preprocess.resize)?;
        let rel = PathBuf::from("images").join(format!("{}.pgm", r.image_id));
        gray::write_pgm16(&img, &out_dir.join(&rel))?;
        let mut r = r.clone();
        r.path = rel;
        records.push(r);
    }
    let out_manifest = out_dir.join("manifest.csv");
    Manifest::from_records(records).save_csv(&out_manifest)?;
    Ok(out_manifest)
}

fn split_subset(manifest: &Manifest, split: Split) -> Result<Manifest, PipelineError> {
    let subset = manifest.subset(split);
    if subset.is_empty() {
        return Err(PipelineError::EmptySplit(split));
    }
    Ok(subset)
}

/// Result of training one configured model.
#[derive(Debug)]
pub struct TrainOutcome {
    pub name: String,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
}

/// Train every configured model (or just `only`) on the manifest's train
/// split, validating on its val split. Emits `<name>.ckpt` and
/// `<name>_train_log.csv` per model under `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    only: Option<&str>,
) -> Result<Vec<TrainOutcome>, PipelineError> {
    cfg.validate()?;
    let manifest = Manifest::load_csv(manifest_path)?;
    let train_manifest = split_subset(&manifest, Split::Train)?;
    let val_manifest = split_subset(&manifest, Split::Val)?;

    // class weights come from the raw (pre-oversampling) training counts
    let counts = train_manifest.class_counts();
    let loss_cfg = LossConfig::new(cfg.loss.gamma, cfg.loss.epsilon, cfg.loss.beta, &counts)?;
    let train_manifest = if cfg.dataset.oversample {
        oversample_minority(&train_manifest, mix_seed(cfg.seed, 0x05e7))?
    } else {
        train_manifest
    };
    let train_data = LoadedDataset::from_manifest(&train_manifest)?;
    let val_data = LoadedDataset::from_manifest(&val_manifest)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let selected: Vec<_> = match only {
        Some(name) => {
            let m = cfg
                .models
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| PipelineError::NoSuchModel(name.to_string()))?;
            vec![m.clone()]
        }
        None => cfg.models.clone(),
    };

    let mut outcomes = Vec::new();
    for named in selected {
        let checkpoint = out_dir.join(format!("{}.ckpt", named.name));
        let (_, log) = train_model(
            &named.spec,
            &train_data,
            &val_data,
            &loss_cfg,
            &cfg.train,
            Some(&cfg.preprocess.augment),
            &checkpoint,
        )?;
        let log_path = out_dir.join(format!("{}_train_log.csv", named.name));
        log.write_csv(&log_path)?;
        outcomes.push(TrainOutcome {
            name: named.name,
            checkpoint,
            log_path,
            log,
        });
    }
    Ok(outcomes)
}

/// Evaluate one checkpoint on a manifest split: metrics at threshold 0.5
/// plus AUC. Optionally writes a one-row CSV.
pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    csv_out: Option<&Path>,
) -> Result<MetricsReport, PipelineError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let manifest = Manifest::load_csv(manifest_path)?;
    let data = LoadedDataset::from_manifest(&split_subset(&manifest, split)?)?;
    let scores = predict_scores(&model, &data, 8)?;
    let report = evaluate_scores(&data.labels, &scores, 0.5)?;
    if let Some(path) = csv_out {
        let content = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
        fs::write(path, content).map_err(|e| io_err(path, e))?;
    }
    Ok(report)
}

/// A loaded voting member.
pub struct Member {
    pub name: String,
    pub model: Model,
    pub val_score: f64,
}

/// Load checkpoints and pull each member's validation score for `metric`.
pub fn load_members(
    checkpoints: &[PathBuf],
    metric: WeightMetric,
) -> Result<Vec<Member>, PipelineError> {
    let mut members = Vec::new();
    for path in checkpoints {
        let (model, meta) = load_checkpoint(path)?;
        let val_score = metric
            .from_meta(&meta)
            .ok_or_else(|| EnsembleError::MissingMetric(path.clone(), metric))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "member".into());
        members.push(Member {
            name,
            model,
            val_score,
        });
    }
    Ok(members)
}

pub struct EnsembleOutcome {
    pub weights: Vec<(String, f64)>,
    pub report: MetricsReport,
    pub spec_path: PathBuf,
    pub metrics_path: PathBuf,
    pub predictions_path: PathBuf,
}

/// Weighted soft voting of the member checkpoints over a manifest split.
/// Writes the ensemble definition, a metrics row and the prediction dump.
pub fn cmd_ensemble(
    checkpoints: &[PathBuf],
    metric: WeightMetric,
    manifest_path: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<EnsembleOutcome, PipelineError> {
    let members = load_members(checkpoints, metric)?;
    let manifest = Manifest::load_csv(manifest_path)?;
    let data = LoadedDataset::from_manifest(&split_subset(&manifest, split)?)?;

    let scores: Vec<f64> = members.iter().map(|m| m.val_score).collect();
    let weights = compute_weights(&scores)?;
    let mut member_probs = Vec::with_capacity(members.len());
    for m in &members {
        let p1 = predict_scores(&m.model, &data, 8)?;
        let mut data_vec = Vec::with_capacity(p1.len() * 2);
        for v in &p1 {
            data_vec.push(1.0 - v);
            data_vec.push(*v);
        }
        member_probs.push(Tensor::from_data(&[p1.len(), 2], data_vec)?);
    }
    let voted = soft_vote(&member_probs, &weights)?;
    let predictions = decide(&voted, 0.5);
    let p1: Vec<f64> = (0..data.len()).map(|i| voted.data()[i * 2 + 1]).collect();
    let report = evaluate_scores(&data.labels, &p1, 0.5)?;

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let spec_path = out_dir.join("ensemble.json");
    let spec = EnsembleSpec {
        members: checkpoints.iter().map(|p| relativize(out_dir, p)).collect(),
        metric,
    };
    fs::write(
        &spec_path,
        serde_json::to_string_pretty(&spec).expect("serializes"),
    )
    .map_err(|e| io_err(&spec_path, e))?;

    let metrics_path = out_dir.join("ensemble_metrics.csv");
    let content = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    fs::write(&metrics_path, content).map_err(|e| io_err(&metrics_path, e))?;

    let predictions_path = out_dir.join("ensemble_predictions.csv");
    let mut dump = String::from("image_id,p0,p1,label,pred\n");
    for i in 0..data.len() {
        dump.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            data.image_ids[i],
            voted.data()[i * 2],
            voted.data()[i * 2 + 1],
            data.labels[i],
            predictions[i]
        ));
    }
    fs::write(&predictions_path, dump).map_err(|e| io_err(&predictions_path, e))?;

    Ok(EnsembleOutcome {
        weights: members
            .iter()
            .zip(&weights)
            .map(|(m, &w)| (m.name.clone(), w))
            .collect(),
        report,
        spec_path,
        metrics_path,
        predictions_path,
    })
}

/// ROC curves for each checkpoint plus the weighted ensemble, exported as
/// per-model CSVs and one combined SVG under `basename`.
pub fn cmd_roc(
    checkpoints: &[PathBuf],
    metric: WeightMetric,
    manifest_path: &Path,
    split: Split,
    basename: &Path,
) -> Result<Vec<(String, f64)>, PipelineError> {
    let members = load_members(checkpoints, metric)?;
    let manifest = Manifest::load_csv(manifest_path)?;
    let data = LoadedDataset::from_manifest(&split_subset(&manifest, split)?)?;

    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    let mut member_scores: Vec<Vec<f64>> = Vec::new();
    for m in &members {
        let scores = predict_scores(&m.model, &data, 8)?;
        curves.push((m.name.clone(), roc_auc(&data.labels, &scores)?));
        member_scores.push(scores);
    }
    if members.len() > 1 {
        let weights = compute_weights(&members.iter().map(|m| m.val_score).collect::<Vec<_>>())?;
        let mut voted = vec![0.0f64; data.len()];
        for (scores, &w) in member_scores.iter().zip(&weights) {
            for (acc, &s) in voted.iter_mut().zip(scores) {
                *acc += w * s;
            }
        }
        curves.push(("ensemble".into(), roc_auc(&data.labels, &voted)?));
    }
    if let Some(parent) = basename.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    export_roc_set(&curves, basename)?;
    Ok(curves.into_iter().map(|(n, c)| (n, c.auc)).collect())
}

/// One row of the gradient self-check table.
pub struct GradcheckRow {
    pub target: String,
    pub max_rel_err: f64,
    pub checks: usize,
}

/// Finite-difference sweep over the primitives, the attention block, the
/// loss and every configured model spec (reduced input and width).
pub fn cmd_gradcheck(cfg: &RunConfig, seed: u64) -> Result<Vec<GradcheckRow>, PipelineError> {
    let mut rows = Vec::new();
    let p = gradcheck::check_primitives(3, mix_seed(seed, 1));
    rows.push(GradcheckRow {
        target: "primitives".into(),
        max_rel_err: p.max_rel_err,
        checks: p.checks,
    });
    let se = gradcheck::check_se_block(5, mix_seed(seed, 2));
    rows.push(GradcheckRow {
        target: "se_block".into(),
        max_rel_err: se.max_rel_err,
        checks: se.checks,
    });
    let loss = gradcheck::check_loss(10, mix_seed(seed, 3));
    rows.push(GradcheckRow {
        target: "combined_loss".into(),
        max_rel_err: loss.max_rel_err,
        checks: loss.checks,
    });
    for named in &cfg.models {
        // shrink to gradcheck geometry: same family, depth and attention
        let mut spec = named.spec.clone();
        spec.input_size = (32, 64);
        spec.base_channels = spec.base_channels.min(8);
        let r = gradcheck::check_model_spec(&spec, 2, 24, mix_seed(seed, 4))?;
        rows.push(GradcheckRow {
            target: named.name.clone(),
            max_rel_err: r.max_rel_err,
            checks: r.checks,
        });
    }
    Ok(rows)
}

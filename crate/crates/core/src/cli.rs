//! Command implementations behind the `ctxkernel` binary.
//!
//! Exit codes: 0 on success, 2 for usage, config or data errors, 3 for
//! numerical divergence or a failed gram self-check.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{export_context, write_training_log, Checkpoint, ContextExport};
use crate::config::RunConfig;
use crate::ctxlearn::{alternate_optimize, alternate_optimize_from};
use crate::error::Error;
use crate::evalmetrics::{evaluate, EvalReport};
use crate::featio::{check_geometry, gen_synthetic, read_feature_file, read_labels, save_features, write_labels};
use crate::kernelcore::{base_gram, forward_batch, gram_fixed_point, map_gram, pooled_batch, ContextStack};
use crate::svm::score;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.ctxc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const GRAM_FILE: &str = "gram.csv";
pub const RESIDUAL_FILE: &str = "gram_residual.csv";
pub const GRAM_GUARD: usize = 2000;
pub const GRAM_RESIDUAL_LIMIT: f64 = 1e-8;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("create {}: {e}", dir.display())))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a PathBuf> {
    let p = path.as_ref().ok_or_else(|| usage(format!("`{key}` is not set")))?;
    if !p.is_file() {
        return Err(usage(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub outer_iter: usize,
    pub final_objective: f64,
    pub checkpoint: PathBuf,
}

/// Train from `cfg`, optionally resuming a checkpoint. All inputs are read
/// and validated before anything is written.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let spec = cfg.grid_spec()?;
    let mode = cfg.feature_mode()?;
    let features_path = required(&cfg.io.features, "io.features")?;
    let labels_path = required(&cfg.io.labels, "io.labels")?;
    let file = read_feature_file(features_path)?;
    check_geometry(&file, &spec, mode)?;
    let features = file.mapped(mode)?;
    let labels = read_labels(labels_path, &file.image_ids())?;
    let learn = cfg.learn_config(labels.n_concepts())?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.grid() != &spec || ck.mode != mode || ck.d0 != file.d0 {
            return Err(usage("checkpoint does not match the configured grid or features"));
        }
    }

    let result = match resumed {
        Some(ck) => {
            let ctx = ck.state.ctx.clone();
            alternate_optimize_from(&features, &labels, ctx, Some(ck.state), &learn)
        }
        None => alternate_optimize(&features, &labels, &spec, &learn),
    };
    let out = &cfg.io.output_dir;
    let (state, diverged) = match result {
        Ok(state) => (state, None),
        Err(Error::Diverged { state }) => (*state, Some(EXIT_NUMERIC)),
        Err(e) => return Err(e.into()),
    };

    create_dir(out)?;
    let ck = Checkpoint {
        mode,
        d0: file.d0,
        state,
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    write_training_log(&out.join(TRAIN_LOG_FILE), &ck.state.log)?;
    std::fs::write(out.join(EFFECTIVE_CONFIG_FILE), cfg.to_flat_string())
        .map_err(|e| usage(format!("write effective config: {e}")))?;

    if let Some(code) = diverged {
        return Err(CliError {
            code,
            message: format!(
                "objective diverged; last finite state (outer iteration {}) saved to {}",
                ck.state.outer_iter,
                ck_path.display()
            ),
        });
    }
    Ok(TrainSummary {
        outer_iter: ck.state.outer_iter,
        final_objective: ck.state.objective_history.last().copied().unwrap_or(f64::NAN),
        checkpoint: ck_path,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    image_id: String,
    concept: String,
    score: f64,
    present: bool,
}

/// Score every image of `features` and write `image_id,concept,score,present`.
pub fn cmd_predict(checkpoint: &Path, features: &Path, out: &Path) -> CliResult<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let file = read_feature_file(features)?;
    check_geometry(&file, ck.grid(), ck.mode)?;
    if !file.images.is_empty() && file.d0 != ck.d0 {
        return Err(usage(format!(
            "features have dimension {}, checkpoint expects {}",
            file.d0, ck.d0
        )));
    }
    let images = file.mapped(ck.mode)?;
    let pooled = pooled_batch(&images, &ck.state.ctx)?;
    let model = &ck.state.model;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out)
        .map_err(Error::from)?;
    w.write_record(["image_id", "concept", "score", "present"])
        .map_err(Error::from)?;
    for (img, phi) in images.iter().zip(&pooled) {
        let scores = score(model, phi)?;
        for (k, s) in scores.iter().enumerate() {
            w.serialize(PredictionRow {
                image_id: img.image_id.clone(),
                concept: model.concept_names[k].clone(),
                score: *s,
                present: *s > 0.0,
            })
            .map_err(Error::from)?;
        }
    }
    w.flush().map_err(|e| usage(format!("write {}: {e}", out.display())))?;
    Ok(images.len())
}

/// Image ids and concept names in order of first appearance, and the score
/// of every (image, concept) pair.
pub type Predictions = (Vec<String>, Vec<String>, HashMap<(String, String), f64>);

pub fn read_predictions(path: &Path) -> CliResult<Predictions> {
    let mut rdr = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut images = Vec::new();
    let mut concepts = Vec::new();
    let mut scores = HashMap::new();
    for row in rdr.deserialize() {
        let row: PredictionRow = row.map_err(Error::from)?;
        if !images.contains(&row.image_id) {
            images.push(row.image_id.clone());
        }
        if !concepts.contains(&row.concept) {
            concepts.push(row.concept.clone());
        }
        if scores
            .insert((row.image_id.clone(), row.concept.clone()), row.score)
            .is_some()
        {
            return Err(usage(format!(
                "duplicate prediction for ({}, {})",
                row.image_id, row.concept
            )));
        }
    }
    Ok((images, concepts, scores))
}

/// Evaluate predictions against labels; writes `report.csv` and `report.json`.
pub fn cmd_eval(predictions: &Path, labels: &Path, out_dir: &Path) -> CliResult<EvalReport> {
    let (images, concepts, scores) = read_predictions(predictions)?;
    let truth = read_labels(labels, &images)?;
    let mut sorted_pred = concepts.clone();
    sorted_pred.sort();
    let mut sorted_truth = truth.concept_names.clone();
    sorted_truth.sort();
    if sorted_pred != sorted_truth {
        return Err(usage(format!(
            "shape mismatch: predictions cover concepts {concepts:?}, labels cover {:?}",
            truth.concept_names
        )));
    }
    let mut matrix = Array2::zeros((images.len(), truth.n_concepts()));
    for (i, id) in images.iter().enumerate() {
        for (k, c) in truth.concept_names.iter().enumerate() {
            matrix[[i, k]] = *scores
                .get(&(id.clone(), c.clone()))
                .ok_or_else(|| usage(format!("shape mismatch: no prediction for ({id}, {c})")))?;
        }
    }
    let report = evaluate(&matrix, &truth)?;
    create_dir(out_dir)?;
    report.write_csv(&out_dir.join("report.csv"))?;
    report.write_json(&out_dir.join("report.json"))?;
    Ok(report)
}

/// Write the checkpoint's context as JSON.
pub fn cmd_export_context(checkpoint: &Path, out: &Path) -> CliResult<ContextExport> {
    let ck = Checkpoint::load(checkpoint)?;
    let export = export_context(&ck.state.ctx);
    let text = serde_json::to_string_pretty(&export).map_err(Error::from)?;
    std::fs::write(out, text).map_err(|e| usage(format!("write {}: {e}", out.display())))?;
    Ok(export)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramReport {
    pub n_total: usize,
    pub max_relative_residual: f64,
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(Error::from)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))
            .map_err(Error::from)?;
    }
    w.flush().map_err(|e| usage(format!("write {}: {e}", path.display())))
}

/// Debug oracle: the gram recursion over all cells of the configured
/// features, checked against inner products of the explicit maps.
pub fn cmd_gram(cfg: &RunConfig, checkpoint: Option<&Path>, force: bool) -> CliResult<GramReport> {
    cfg.validate()?;
    let spec = cfg.grid_spec()?;
    let mode = cfg.feature_mode()?;
    let features_path = required(&cfg.io.features, "io.features")?;
    let file = read_feature_file(features_path)?;
    check_geometry(&file, &spec, mode)?;
    let n_total = file.images.len() * spec.cells();
    if n_total > GRAM_GUARD && !force {
        return Err(usage(format!(
            "{n_total} cells exceed the gram guard of {GRAM_GUARD}; pass --force to run anyway"
        )));
    }
    let images = file.mapped(mode)?;
    let ctx = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.grid() != &spec {
                return Err(usage("checkpoint grid does not match the configured grid"));
            }
            ck.state.ctx
        }
        None => ContextStack::handcrafted(&spec, cfg.kernel.depth, cfg.kernel.gamma)?,
    };
    let s = base_gram(&images);
    let k = gram_fixed_point(&s, &ctx, images.len())?;
    let phi = map_gram(&forward_batch(&images, &ctx)?);
    let residual = &k - &phi;
    let scale = k.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let max_diff = residual.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let rel = if scale > 0.0 { max_diff / scale } else { max_diff };

    let out = &cfg.io.output_dir;
    create_dir(out)?;
    write_matrix(&out.join(GRAM_FILE), &k)?;
    write_matrix(&out.join(RESIDUAL_FILE), &residual)?;
    let report = GramReport {
        n_total,
        max_relative_residual: rel,
    };
    if rel > GRAM_RESIDUAL_LIMIT {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("gram self-check failed: max relative residual {rel:e} > {GRAM_RESIDUAL_LIMIT:e}"),
        });
    }
    Ok(report)
}

/// Write `features.ctxf` and `labels.csv` of a synthetic arrangement dataset.
pub fn cmd_gen_synthetic(cfg: &RunConfig, n_images: usize) -> CliResult<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let spec = cfg.grid_spec()?;
    let mode = cfg.feature_mode()?;
    let (mut file, labels) = gen_synthetic(&spec, n_images, cfg.io.seed)?;
    file.mode = mode;
    let out = &cfg.io.output_dir;
    create_dir(out)?;
    let fpath = out.join("features.ctxf");
    let lpath = out.join("labels.csv");
    save_features(&fpath, &file)?;
    write_labels(&lpath, &labels)?;
    Ok((fpath, lpath))
}

//! End-to-end operations behind the CLI subcommands: dataset simulation,
//! training, Table-1-style evaluation, and the prior-misalignment sweep.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use crate::augment::rotate_inplane;
use crate::config::AppConfig;
use crate::dataset::{
    assign_splits, build_case, case_dirs, load_case_slices, read_dataset_manifest, write_case,
    write_dataset_manifest, CaseManifest, CaseSlices, DatasetManifest, Split,
};
use crate::error::{CbctError, Result};
use crate::image::Image2;
use crate::metrics::{
    aggregate, psnr_db, rmse_hu_images, slice_data_range, ssim, write_aggregate_csv,
    write_metrics_csv, AggregateRow, MetricsRow,
};
use crate::models::{forward, load_checkpoint, save_checkpoint, Model};
use crate::nn::Tape;
use crate::phantom::PhantomSpec;
use crate::stats::wilcoxon_signed_rank;
use crate::training::{train, EpochLogRow};

pub const FDK_TAG: &str = "fdk";
/// Forward-pass batch during evaluation; bounds tape memory.
const EVAL_BATCH: usize = 8;

fn derive_seed(base: u64, salt: u64, index: u64) -> u64 {
    // splitmix64 over a salted counter; kept within i64 range so the
    // seed survives TOML manifests
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) & 0x7fff_ffff_ffff_ffff
}

// ---- simulate ---------------------------------------------------------------

#[derive(Debug)]
pub struct SimulateSummary {
    pub n_cases: usize,
    pub case_ids: Vec<String>,
}

/// Generate `n_cases` deterministic cases with split tags and manifests.
pub fn cmd_simulate(config: &AppConfig, out_dir: &Path) -> Result<SimulateSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CbctError::io(out_dir, e))?;
    let grid = config.dataset.grid.to_grid();
    let protocol = config.to_protocol();
    let splits = assign_splits(config.dataset.n_cases, config.seed);
    let mut case_ids = Vec::new();
    for i in 0..config.dataset.n_cases {
        let case_id = format!("case_{i:04}");
        let phantom_seed = derive_seed(config.seed, 1, i as u64);
        let pose_seed = derive_seed(config.seed, 2, i as u64);
        let spec = PhantomSpec::for_grid(phantom_seed, grid.clone());
        let case = build_case(&case_id, &spec, pose_seed, &protocol)?;
        let manifest = CaseManifest {
            case_id: case_id.clone(),
            phantom_seed,
            pose_seed,
            pose: case.pose.clone(),
            scale_p99: case.scale_p99,
            split: splits[i],
            n_sparse_views: protocol.n_sparse_views,
            n_dense_views: protocol.n_dense_views,
        };
        write_case(&case, &manifest, &out_dir.join(&case_id))?;
        case_ids.push(case_id);
    }
    write_dataset_manifest(
        &DatasetManifest {
            n_cases: config.dataset.n_cases,
            seed: config.seed,
            protocol,
            cases: case_ids.clone(),
        },
        out_dir,
    )?;
    config.write_frozen(out_dir)?;
    Ok(SimulateSummary {
        n_cases: case_ids.len(),
        case_ids,
    })
}

// ---- train ------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainSummary {
    pub tag: String,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub epochs_completed: usize,
}

/// Tag under which a trained system is reported: the model kind, with a
/// `_no_mis` suffix when misalignment augmentation was disabled.
pub fn train_tag(config: &AppConfig) -> String {
    match config.train.mode {
        crate::augment::MisalignMode::Mis => config.train.kind.as_str().to_string(),
        crate::augment::MisalignMode::NoMis => format!("{}_no_mis", config.train.kind.as_str()),
    }
}

fn load_split(dataset_dir: &Path, split: Split) -> Result<Vec<CaseSlices>> {
    case_dirs(dataset_dir, Some(split))?
        .iter()
        .map(|d| load_case_slices(d))
        .collect()
}

/// Train per the config and save the best-validation checkpoint plus the
/// epoch log. `resume` continues a previous run, keeping epoch numbering.
pub fn cmd_train(
    config: &AppConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    read_dataset_manifest(dataset_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| CbctError::io(out_dir, e))?;
    let train_cases = load_split(dataset_dir, Split::Train)?;
    let val_cases = load_split(dataset_dir, Split::Val)?;

    let spec = config.to_model_spec();
    let resumed = match resume {
        Some(path) => {
            let (model, manifest, adam) = load_checkpoint(path)?;
            let adam = adam.ok_or_else(|| {
                CbctError::InvalidData("checkpoint has no optimizer state to resume".into())
            })?;
            Some((model, adam, manifest.epochs_completed))
        }
        None => None,
    };
    let outcome = train(
        &spec,
        &config.to_train_config(),
        &train_cases,
        &val_cases,
        resumed,
    )?;

    let tag = train_tag(config);
    let ckpt_stem = out_dir.join(&tag);
    save_checkpoint(
        &outcome.model,
        &tag,
        outcome.epochs_completed,
        outcome.best_val_total,
        Some(&outcome.adam),
        &ckpt_stem,
    )?;

    let range = config.misalign_range();
    let mut log_text = format!(
        "# model={} mode={} misalign_range_deg=[{},{}]\n{}\n",
        config.train.kind.as_str(),
        match config.train.mode {
            crate::augment::MisalignMode::Mis => "mis",
            crate::augment::MisalignMode::NoMis => "no-mis",
        },
        range[0],
        range[1],
        EpochLogRow::CSV_HEADER
    );
    for row in &outcome.log {
        log_text.push_str(&row.to_csv());
        log_text.push('\n');
    }
    let log_path = out_dir.join(format!("{tag}_log.csv"));
    fs::write(&log_path, log_text).map_err(|e| CbctError::io(&log_path, e))?;
    config.write_frozen(out_dir)?;

    Ok(TrainSummary {
        tag,
        checkpoint: ckpt_stem.with_extension("ckpt"),
        log_path,
        best_epoch: outcome.best_epoch,
        best_val_total: outcome.best_val_total,
        epochs_completed: outcome.epochs_completed,
    })
}

// ---- eval -------------------------------------------------------------------

pub struct LoadedModel {
    pub tag: String,
    pub model: Model<f32>,
}

pub fn load_models(paths: &[PathBuf]) -> Result<Vec<LoadedModel>> {
    paths
        .iter()
        .map(|p| {
            let (model, manifest, _) = load_checkpoint(p)?;
            Ok(LoadedModel {
                tag: manifest.tag,
                model,
            })
        })
        .collect()
}

fn stack_images(images: &[&Image2<f32>]) -> Array4<f32> {
    let (h, w) = (images[0].h, images[0].w);
    let mut out = Array4::<f32>::zeros((images.len(), 1, h, w));
    for (b, img) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                out[[b, 0, r, c]] = img.at(r, c);
            }
        }
    }
    out
}

/// Run a network over every slice of a case, returning denormalized HU
/// predictions.
fn predict_case(
    entry: &LoadedModel,
    case: &CaseSlices,
    rotated_prior: &[Image2<f32>],
) -> Result<Vec<Image2<f64>>> {
    let nz = case.sparse.len();
    let scale = case.scale_p99;
    let mut out = Vec::with_capacity(nz);
    let mut z0 = 0;
    while z0 < nz {
        let z1 = (z0 + EVAL_BATCH).min(nz);
        let sparse_refs: Vec<&Image2<f32>> = (z0..z1).map(|z| &case.sparse[z]).collect();
        let sparse = stack_images(&sparse_refs);
        let prior = if entry.model.spec.kind.uses_prior() {
            let prior_refs: Vec<&Image2<f32>> = (z0..z1).map(|z| &rotated_prior[z]).collect();
            Some(stack_images(&prior_refs))
        } else {
            None
        };
        let mut tape = Tape::<f32>::new();
        let pred = forward(&entry.model, &mut tape, &sparse, prior.as_ref(), false)?;
        let p_r = tape.value(pred.p_r);
        let (h, w) = (case.sparse[0].h, case.sparse[0].w);
        for b in 0..(z1 - z0) {
            let mut img = Image2::filled(h, w, 0.0f64);
            for r in 0..h {
                for c in 0..w {
                    img.set(r, c, p_r[[b, 0, r, c]] as f64 * scale - 1000.0);
                }
            }
            out.push(img);
        }
        z0 = z1;
    }
    Ok(out)
}

/// Per-slice metrics for the raw-FDK baseline plus every model, with the
/// prior rotated in-plane by `alpha_deg`. Row order: case → slice →
/// (fdk, then models in the given order).
pub fn evaluate_slices(
    cases: &[CaseSlices],
    models: &[LoadedModel],
    alpha_deg: f64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for case in cases {
        let nz = case.sparse.len();
        let rotated_prior: Vec<Image2<f32>> = if alpha_deg == 0.0 {
            case.prior.clone()
        } else {
            case.prior
                .iter()
                .map(|img| rotate_inplane(img, alpha_deg, 0.0f32))
                .collect()
        };
        let mut predictions: Vec<(String, Vec<Image2<f64>>)> = Vec::new();
        predictions.push((
            FDK_TAG.to_string(),
            case.sparse_hu.clone(),
        ));
        for entry in models {
            predictions.push((entry.tag.clone(), predict_case(entry, case, &rotated_prior)?));
        }
        for z in 0..nz {
            let gt = &case.ground_truth_hu[z];
            let range = slice_data_range(gt).max(1e-6);
            for (tag, preds) in &predictions {
                let pred = &preds[z];
                rows.push(MetricsRow {
                    case_id: case.case_id.clone(),
                    slice: z,
                    model: tag.clone(),
                    ssim_pct: 100.0 * ssim(pred, gt, range)?,
                    psnr_db: psnr_db(pred, gt, range)?,
                    rmse_hu: rmse_hu_images(pred, gt)?,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonRow {
    pub model_a: String,
    pub model_b: String,
    pub n: usize,
    pub p_value: f64,
}

impl WilcoxonRow {
    pub const CSV_HEADER: &'static str = "model_a,model_b,n,p_value";
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.model_a, self.model_b, self.n, self.p_value
        )
    }
}

/// Pairwise two-sided Wilcoxon signed-rank tests on per-slice RMSE.
pub fn pairwise_wilcoxon(rows: &[MetricsRow]) -> Result<Vec<WilcoxonRow>> {
    let mut tags: Vec<String> = Vec::new();
    for r in rows {
        if !tags.contains(&r.model) {
            tags.push(r.model.clone());
        }
    }
    let series: Vec<Vec<f64>> = tags
        .iter()
        .map(|t| {
            rows.iter()
                .filter(|r| &r.model == t)
                .map(|r| r.rmse_hu)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..tags.len() {
        for j in i + 1..tags.len() {
            let (a, b) = (&series[i], &series[j]);
            if a.len() != b.len() {
                return Err(CbctError::InvalidData(format!(
                    "unbalanced slice counts for {} and {}",
                    tags[i], tags[j]
                )));
            }
            let p = match wilcoxon_signed_rank(a, b) {
                Ok(p) => p,
                // identical series carry no evidence of a difference
                Err(CbctError::DegenerateInput(_)) => 1.0,
                Err(e) => return Err(e),
            };
            out.push(WilcoxonRow {
                model_a: tags[i].clone(),
                model_b: tags[j].clone(),
                n: a.len(),
                p_value: p,
            });
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct EvalSummary {
    pub metrics_path: PathBuf,
    pub aggregate_path: PathBuf,
    pub wilcoxon_path: PathBuf,
    pub aggregates: Vec<AggregateRow>,
    pub wilcoxon: Vec<WilcoxonRow>,
    pub n_rows: usize,
}

/// Evaluate the test split: metrics CSV, aggregate CSV (Table-1 layout)
/// and pairwise Wilcoxon p-values on per-slice RMSE.
pub fn cmd_eval(
    config: &AppConfig,
    dataset_dir: &Path,
    checkpoints: &[PathBuf],
    out_dir: &Path,
    alpha_deg: f64,
) -> Result<EvalSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CbctError::io(out_dir, e))?;
    let cases = load_split(dataset_dir, Split::Test)?;
    if cases.is_empty() {
        return Err(CbctError::InvalidData("dataset has no test cases".into()));
    }
    let models = load_models(checkpoints)?;
    let rows = evaluate_slices(&cases, &models, alpha_deg)?;
    let aggregates = aggregate(&rows);
    let wilcoxon = pairwise_wilcoxon(&rows)?;

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;
    let aggregate_path = out_dir.join("aggregate.csv");
    write_aggregate_csv(&aggregates, &aggregate_path)?;
    let wilcoxon_path = out_dir.join("wilcoxon.csv");
    let mut text = String::from(WilcoxonRow::CSV_HEADER);
    text.push('\n');
    for row in &wilcoxon {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(&wilcoxon_path, text).map_err(|e| CbctError::io(&wilcoxon_path, e))?;
    config.write_frozen(out_dir)?;

    Ok(EvalSummary {
        metrics_path,
        aggregate_path,
        wilcoxon_path,
        aggregates,
        wilcoxon,
        n_rows: rows.len(),
    })
}

// ---- sweep ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub alpha_deg: f64,
    pub rmse_median: f64,
    pub rmse_q25: f64,
    pub rmse_q75: f64,
    pub n_slices: usize,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "model,alpha_deg,rmse_median,rmse_q25,rmse_q75,n_slices";
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.model, self.alpha_deg, self.rmse_median, self.rmse_q25, self.rmse_q75,
            self.n_slices
        )
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n as f64 - 1.0) * p;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

#[derive(Debug)]
pub struct SweepSummary {
    pub sweep_path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Median and interquartile range of per-slice RMSE versus prior rotation,
/// for the FDK baseline and each checkpoint.
pub fn cmd_sweep(
    config: &AppConfig,
    dataset_dir: &Path,
    checkpoints: &[PathBuf],
    out_dir: &Path,
    alphas: &[f64],
) -> Result<SweepSummary> {
    config.validate()?;
    if alphas.is_empty() {
        return Err(CbctError::InvalidArgument("sweep needs at least one alpha".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CbctError::io(out_dir, e))?;
    let cases = load_split(dataset_dir, Split::Test)?;
    if cases.is_empty() {
        return Err(CbctError::InvalidData("dataset has no test cases".into()));
    }
    let models = load_models(checkpoints)?;

    let mut rows = Vec::new();
    for &alpha in alphas {
        let metric_rows = evaluate_slices(&cases, &models, alpha)?;
        let mut tags: Vec<String> = Vec::new();
        for r in &metric_rows {
            if !tags.contains(&r.model) {
                tags.push(r.model.clone());
            }
        }
        for tag in tags {
            let mut rmse: Vec<f64> = metric_rows
                .iter()
                .filter(|r| r.model == tag)
                .map(|r| r.rmse_hu)
                .collect();
            rmse.sort_by(f64::total_cmp);
            rows.push(SweepRow {
                model: tag,
                alpha_deg: alpha,
                rmse_median: quantile_sorted(&rmse, 0.5),
                rmse_q25: quantile_sorted(&rmse, 0.25),
                rmse_q75: quantile_sorted(&rmse, 0.75),
                n_slices: rmse.len(),
            });
        }
    }

    let sweep_path = out_dir.join("sweep.csv");
    let mut text = String::from(SweepRow::CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(&sweep_path, text).map_err(|e| CbctError::io(&sweep_path, e))?;
    config.write_frozen(out_dir)?;
    Ok(SweepSummary { sweep_path, rows })
}

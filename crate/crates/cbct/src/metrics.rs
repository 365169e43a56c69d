//! Image-quality metrics and their CSV records.
//!
//! RMSE is reported in HU, PSNR in dB against the per-slice ground-truth
//! dynamic range, SSIM as a percentage with the standard 11×11 Gaussian
//! window (σ = 1.5, K1 = 0.01, K2 = 0.03).

use std::fs;
use std::path::Path;

use crate::error::{CbctError, Result};
use crate::image::Image2;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Root-mean-square difference of two HU images.
pub fn rmse_hu_images(pred_hu: &Image2<f64>, gt_hu: &Image2<f64>) -> Result<f64> {
    if (pred_hu.h, pred_hu.w) != (gt_hu.h, gt_hu.w) {
        return Err(CbctError::InvalidArgument(format!(
            "rmse: {}x{} vs {}x{}",
            pred_hu.h, pred_hu.w, gt_hu.h, gt_hu.w
        )));
    }
    let n = pred_hu.data.len() as f64;
    let sum: f64 = pred_hu
        .data
        .iter()
        .zip(gt_hu.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n).sqrt())
}

/// RMSE of two normalized images after denormalizing both to HU with the
/// case scale.
pub fn rmse_hu(pred_norm: &Image2<f64>, gt_norm: &Image2<f64>, scale_p99: f64) -> Result<f64> {
    if !(scale_p99 > 0.0) {
        return Err(CbctError::InvalidArgument(format!(
            "rmse: scale {scale_p99} must be positive"
        )));
    }
    let denorm = |img: &Image2<f64>| img.map(|v| v * scale_p99 - 1000.0);
    rmse_hu_images(&denorm(pred_norm), &denorm(gt_norm))
}

/// `20·log10(range) − 20·log10(rmse)`; +∞ when the images are identical.
pub fn psnr_db(pred_hu: &Image2<f64>, gt_hu: &Image2<f64>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(CbctError::InvalidArgument(format!(
            "psnr: data range {data_range} must be positive"
        )));
    }
    let rmse = rmse_hu_images(pred_hu, gt_hu)?;
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * data_range.log10() - 20.0 * rmse.log10())
}

/// Per-slice dynamic range convention: ground-truth max − min in HU.
pub fn slice_data_range(gt_hu: &Image2<f64>) -> f64 {
    let (lo, hi) = gt_hu.min_max();
    hi - lo
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-region separable convolution with the 11-tap Gaussian.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // rows first
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * img[r * w + c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[(r + k) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean Gaussian-windowed SSIM over all fully-valid window positions,
/// as a fraction in [−1, 1] (multiply by 100 for reporting).
pub fn ssim(pred: &Image2<f64>, gt: &Image2<f64>, data_range: f64) -> Result<f64> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(CbctError::InvalidArgument("ssim: shape mismatch".into()));
    }
    if pred.h < SSIM_WINDOW || pred.w < SSIM_WINDOW {
        return Err(CbctError::InvalidArgument(format!(
            "ssim: image {}x{} smaller than the {SSIM_WINDOW}-pixel window",
            pred.h, pred.w
        )));
    }
    if !(data_range > 0.0) {
        return Err(CbctError::InvalidArgument(format!(
            "ssim: data range {data_range} must be positive"
        )));
    }
    let taps = gaussian_window();
    let (h, w) = (pred.h, pred.w);
    let x = &pred.data;
    let y = &gt.data;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let m_xx = filter_valid(&xx, h, w, &taps);
    let m_yy = filter_valid(&yy, h, w, &taps);
    let m_xy = filter_valid(&xy, h, w, &taps);

    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_y = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        acc += val;
    }
    Ok(acc / mu_x.len() as f64)
}

// ---- records ----------------------------------------------------------------

/// One evaluated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case_id: String,
    pub slice: usize,
    pub model: String,
    pub ssim_pct: f64,
    pub psnr_db: f64,
    pub rmse_hu: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "case_id,slice,model,ssim_pct,psnr_db,rmse_hu";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.case_id, self.slice, self.model, self.ssim_pct, self.psnr_db, self.rmse_hu
        )
    }

    pub fn from_csv(line: &str) -> Result<MetricsRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(CbctError::InvalidData(format!(
                "metrics row has {} fields: {line}",
                parts.len()
            )));
        }
        let fnum = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| CbctError::InvalidData(format!("bad number '{s}': {e}")))
        };
        Ok(MetricsRow {
            case_id: parts[0].to_string(),
            slice: parts[1]
                .parse()
                .map_err(|e| CbctError::InvalidData(format!("bad slice '{}': {e}", parts[1])))?,
            model: parts[2].to_string(),
            ssim_pct: fnum(parts[3])?,
            psnr_db: fnum(parts[4])?,
            rmse_hu: fnum(parts[5])?,
        })
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut text = String::from(MetricsRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CbctError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| CbctError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MetricsRow::CSV_HEADER => {}
        other => {
            return Err(CbctError::InvalidData(format!(
                "unexpected metrics header {other:?}"
            )));
        }
    }
    lines.map(MetricsRow::from_csv).collect()
}

/// Per-model mean ± population standard deviation over all test slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub model: String,
    pub ssim_pct_mean: f64,
    pub ssim_pct_std: f64,
    pub psnr_db_mean: f64,
    pub psnr_db_std: f64,
    pub rmse_hu_mean: f64,
    pub rmse_hu_std: f64,
    pub n_slices: usize,
}

impl AggregateRow {
    pub const CSV_HEADER: &'static str = "model,ssim_pct_mean,ssim_pct_std,psnr_db_mean,psnr_db_std,rmse_hu_mean,rmse_hu_std,n_slices";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.ssim_pct_mean,
            self.ssim_pct_std,
            self.psnr_db_mean,
            self.psnr_db_std,
            self.rmse_hu_mean,
            self.rmse_hu_std,
            self.n_slices
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group rows by model tag (first-appearance order) and aggregate.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.model) {
            order.push(r.model.clone());
        }
    }
    order
        .into_iter()
        .map(|model| {
            let ssim: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.ssim_pct)
                .collect();
            let psnr: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.psnr_db)
                .collect();
            let rmse: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.rmse_hu)
                .collect();
            let (sm, ss) = mean_std(&ssim);
            let (pm, ps) = mean_std(&psnr);
            let (rm, rs) = mean_std(&rmse);
            AggregateRow {
                model,
                ssim_pct_mean: sm,
                ssim_pct_std: ss,
                psnr_db_mean: pm,
                psnr_db_std: ps,
                rmse_hu_mean: rm,
                rmse_hu_std: rs,
                n_slices: ssim.len(),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut text = String::from(AggregateRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CbctError::io(path, e))
}

//! Image quality and attack outcome metrics, and the evaluation report.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::raster::Image8;
use crate::zoo::{Model, ZooError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("empty evaluation set")]
    Empty,
    #[error("{images} images but {labels} labels")]
    Count { images: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error("report output: {0}")]
    Io(String),
}

fn check_shapes(a: &Image8, b: &Image8) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Shape(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &Image8, b: &Image8) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    if a.data().is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image8, b: &Image8) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, &g)| g * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, &g)| g * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM, averaged over all full windows then channels.
pub fn ssim(a: &Image8, b: &Image8) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(h, w));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &Image8| -> Vec<f64> { img.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let n = mx.len() as f64;
        let s: f64 = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cxy = mxy[i] - ux * uy;
                ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
            })
            .sum();
        total += s / n;
    }
    Ok(total / c as f64)
}

fn predictions(model: &Model, images: &[Image8], labels: &[usize]) -> Result<Vec<bool>, MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    if images.len() != labels.len() {
        return Err(MetricsError::Count { images: images.len(), labels: labels.len() });
    }
    images.iter().zip(labels).map(|(im, &y)| Ok(model.classify(&im.to_tensor())? == y)).collect()
}

/// Percentage of `images` the model does not label correctly.
pub fn asr(model: &Model, images: &[Image8], labels: &[usize]) -> Result<f64, MetricsError> {
    let ok = predictions(model, images, labels)?;
    Ok(100.0 * ok.iter().filter(|&&c| !c).count() as f64 / ok.len() as f64)
}

/// Percentage of `images` the model labels correctly.
pub fn sr(model: &Model, images: &[Image8], labels: &[usize]) -> Result<f64, MetricsError> {
    Ok(100.0 - asr(model, images, labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    pub source: String,
    pub target: String,
    pub label: usize,
    /// Target prediction on the distributed (stego) image.
    pub adv_pred: usize,
    pub success: bool,
    pub queries: Option<usize>,
    /// Target prediction on the recovered image, when one was evaluated.
    pub recovered_pred: Option<usize>,
    /// Recovered vs original.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub total: usize,
    pub asr: f64,
    pub sr: Option<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub median_queries: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregates: Aggregates,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self, MetricsError> {
        if records.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = records.len() as f64;
        let asr = 100.0 * records.iter().filter(|r| r.success).count() as f64 / n;
        let recovered: Vec<bool> =
            records.iter().filter_map(|r| r.recovered_pred.map(|p| p == r.label)).collect();
        let sr = (!recovered.is_empty())
            .then(|| 100.0 * recovered.iter().filter(|&&c| c).count() as f64 / recovered.len() as f64);
        let mean_psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mut q: Vec<f64> = records.iter().filter(|r| r.success).filter_map(|r| r.queries.map(|q| q as f64)).collect();
        let median_queries = median(&mut q);
        let aggregates = Aggregates { total: records.len(), asr, sr, mean_psnr, mean_ssim, median_queries };
        Ok(Self { records, aggregates })
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), MetricsError> {
        let io = |e: csv::Error| MetricsError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image", "source", "target", "label", "adv_pred", "success", "queries", "recovered_pred", "psnr", "ssim"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.image.clone(),
                r.source.clone(),
                r.target.clone(),
                r.label.to_string(),
                r.adv_pred.to_string(),
                r.success.to_string(),
                r.queries.map_or(String::new(), |q| q.to_string()),
                r.recovered_pred.map_or(String::new(), |p| p.to_string()),
                csv_float(r.psnr),
                csv_float(r.ssim),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| MetricsError::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        let a = &self.aggregates;
        let records: Vec<Value> = self
            .records
            .iter()
            .map(|r| {
                json!({
                    "image": r.image,
                    "source": r.source,
                    "target": r.target,
                    "label": r.label,
                    "adv_pred": r.adv_pred,
                    "success": r.success,
                    "queries": r.queries,
                    "recovered_pred": r.recovered_pred,
                    "psnr": json_float(r.psnr),
                    "psnr_infinite": r.psnr.is_infinite(),
                    "ssim": r.ssim,
                })
            })
            .collect();
        json!({
            "records": records,
            "aggregates": {
                "total": a.total,
                "asr": a.asr,
                "sr": a.sr,
                "mean_psnr": json_float(a.mean_psnr),
                "mean_psnr_infinite": a.mean_psnr.is_infinite(),
                "mean_ssim": a.mean_ssim,
                "median_queries": a.median_queries,
            }
        })
    }
}

fn csv_float(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn json_float(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image8 {
        Image8::new(h, w, c, (0..h * w * c).map(|i| (i * 7 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn psnr_reference_points() {
        let a = ramp(12, 12, 3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = Image8::filled(12, 12, 3, 0);
        let full = Image8::filled(12, 12, 3, 255);
        assert_eq!(psnr(&zero, &full).unwrap(), 0.0);
        let one = Image8::filled(12, 12, 3, 1);
        assert!((psnr(&zero, &one).unwrap() - 48.1308).abs() < 0.01);
        assert!(psnr(&zero, &Image8::filled(12, 11, 3, 0)).is_err());
    }

    #[test]
    fn ssim_basics() {
        let a = ramp(16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image8::new(16, 16, 3, a.data().iter().map(|&v| 255 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        assert!(matches!(ssim(&ramp(10, 16, 1), &ramp(10, 16, 1)), Err(MetricsError::TooSmall(10, 16))));
    }

    fn record(success: bool, queries: Option<usize>, psnr: f64) -> EvalRecord {
        EvalRecord {
            image: "a.png".into(),
            source: "s".into(),
            target: "t".into(),
            label: 1,
            adv_pred: if success { 0 } else { 1 },
            success,
            queries,
            recovered_pred: Some(1),
            psnr,
            ssim: 0.99,
        }
    }

    #[test]
    fn report_serialization() {
        let r = EvalReport::from_records(vec![record(true, Some(10), f64::INFINITY), record(false, Some(99), 50.0), record(true, Some(30), 49.0)]).unwrap();
        assert!((r.aggregates.asr - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.aggregates.sr, Some(100.0));
        assert_eq!(r.aggregates.median_queries, Some(20.0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",inf,"));
        let j = r.to_json();
        assert!(j["records"][0]["psnr"].is_null());
        assert_eq!(j["records"][0]["psnr_infinite"], true);
        assert_eq!(j["aggregates"]["mean_psnr_infinite"], true);
        assert!(EvalReport::from_records(vec![]).is_err());
    }
}

//! Masked-region L1 / L2 / PSNR evaluation and report rendering.
//!
//! All metrics are computed on the `[0, 1]` scale over masked pixels times
//! channels only, pooled across images.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{test_image, Dataset};
use crate::error::{Error, Result};
use crate::imaging::{compose_completion, corrupt, sample_mask, to_unit, ImageTensor, Mask, MaskSpec, RangeTag};
use crate::networks::Generator;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PIXEL_SCALE: &str = "unit [0,1]";
pub const REGION: &str = "masked-only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Center,
    Random,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Center => "center",
            Regime::Random => "random",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Regime::Center),
            "random" => Ok(Regime::Random),
            other => Err(Error::Config(format!("unknown mask regime {other:?} (expected center or random)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: Regime,
    pub mask_size: usize,
    pub n_images: usize,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

/// Sums of absolute and squared unit-scale errors over masked elements.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn merge(self, other: ErrorSums) -> ErrorSums {
        ErrorSums { abs: self.abs + other.abs, sq: self.sq + other.sq, count: self.count + other.count }
    }

    pub fn means(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::DegenerateMask("metrics need at least one masked pixel"));
        }
        Ok((self.abs / self.count as f64, self.sq / self.count as f64))
    }
}

fn unit_values<T: Scalar>(img: &ImageTensor<T>) -> Vec<f64> {
    let unit = match img.range() {
        RangeTag::Unit => img.clone(),
        _ => to_unit(img),
    };
    unit.values().iter().map(|v| v.as_f64()).collect()
}

/// Unit-scale error sums over the masked region.
pub fn error_sums<T: Scalar>(completion: &ImageTensor<T>, gt: &ImageTensor<T>, mask: &Mask) -> Result<ErrorSums> {
    if (completion.height(), completion.width(), completion.channels()) != (gt.height(), gt.width(), gt.channels()) {
        return Err(Error::Validation("completion and ground truth differ in shape".into()));
    }
    if (mask.height(), mask.width()) != (gt.height(), gt.width()) {
        return Err(Error::Validation("mask and image differ in size".into()));
    }
    let (a, b) = (unit_values(completion), unit_values(gt));
    let plane = gt.height() * gt.width();
    let mut sums = ErrorSums::default();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if mask.values()[i % plane] == 1 {
            let d = x - y;
            sums.abs += d.abs();
            sums.sq += d * d;
            sums.count += 1;
        }
    }
    Ok(sums)
}

/// Mean absolute and squared error over masked pixels times channels.
pub fn pixel_metrics<T: Scalar>(completion: &ImageTensor<T>, gt: &ImageTensor<T>, mask: &Mask) -> Result<(f64, f64)> {
    error_sums(completion, gt, mask)?.means()
}

/// `10 log10(1 / mean_l2)` with peak 1; `+inf` when the error is zero.
pub fn psnr(mean_l2: f64) -> f64 {
    if mean_l2 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mean_l2).log10()
    }
}

/// Anything that fills a masked batch. Receives the 4-channel input and,
/// for oracle models, the ground truth; returns signed RGB.
pub trait Completer<T: Scalar> {
    fn complete(&self, input4: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Completer<T> for Generator<T> {
    fn complete(&self, input4: &Tensor<T>, _gt: &Tensor<T>) -> Result<Tensor<T>> {
        self.generate(input4)
    }
}

/// The mask an image receives under a regime.
pub fn regime_mask<R: rand::Rng + ?Sized>(regime: Regime, size: usize, h: usize, w: usize, rng: &mut R) -> Result<Mask> {
    match regime {
        Regime::Center => Mask::centered(h, w, size),
        Regime::Random => sample_mask(&MaskSpec { min_size: size, max_size: size }, h, w, rng),
    }
}

/// Corrupt every test image under the regime, complete, compose and pool
/// masked-region errors.
pub fn evaluate<T: Scalar, C: Completer<T> + ?Sized>(
    model: &C,
    dataset: &Dataset,
    regime: Regime,
    mask_size: usize,
    seed: u64,
) -> Result<MetricsRow> {
    if dataset.is_empty() {
        return Err(Error::Validation("evaluation dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = ErrorSums::default();
    for i in 0..dataset.len() {
        let gt: ImageTensor<T> = test_image(dataset, i)?;
        let mask = regime_mask(regime, mask_size, gt.height(), gt.width(), &mut rng)?;
        let (_, input4) = corrupt(&gt, &mask)?;
        let generated = model.complete(&input4.to_tensor(), &gt.to_tensor())?;
        let generated = ImageTensor::from_tensor(&generated.map(|v| v.max(-T::one()).min(T::one())), 0, RangeTag::Signed)?;
        let completion = compose_completion(&generated, &gt, &mask)?;
        sums = sums.merge(error_sums(&completion, &gt, &mask)?);
    }
    let (mean_l1, mean_l2) = sums.means()?;
    Ok(MetricsRow { regime, mask_size, n_images: dataset.len(), mean_l1, mean_l2, psnr: psnr(mean_l2) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn psnr_text(p: f64) -> String {
    if p.is_infinite() {
        "+inf".into()
    } else {
        format!("{p}")
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    regime: Regime,
    mask_size: usize,
    n_images: usize,
    mean_l1: f64,
    mean_l2: f64,
    psnr: String,
    pixel_scale: String,
    region: String,
}

/// Render a report. Output is deterministic for a given report.
pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Text => {
            let mut out = String::new();
            writeln!(out, "pixel scale: {PIXEL_SCALE}; region: {REGION}").expect("string write");
            writeln!(out, "{:<8} {:>9} {:>8} {:>12} {:>12} {:>10}", "Regime", "Mask", "Images", "Mean L1", "Mean L2", "PSNR").expect("string write");
            for r in &report.rows {
                let mask = format!("{0}x{0}", r.mask_size);
                let psnr = if r.psnr.is_infinite() { "+inf".to_string() } else { format!("{:.4}", r.psnr) };
                writeln!(
                    out,
                    "{:<8} {:>9} {:>8} {:>12.6} {:>12.6} {:>10}",
                    r.regime.as_str(),
                    mask,
                    r.n_images,
                    r.mean_l1,
                    r.mean_l2,
                    psnr
                )
                .expect("string write");
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &report.rows {
                w.serialize(CsvRow {
                    regime: r.regime,
                    mask_size: r.mask_size,
                    n_images: r.n_images,
                    mean_l1: r.mean_l1,
                    mean_l2: r.mean_l2,
                    psnr: psnr_text(r.psnr),
                    pixel_scale: PIXEL_SCALE.into(),
                    region: REGION.into(),
                })?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = report
                .rows
                .iter()
                .map(|r| {
                    let psnr = if r.psnr.is_finite() { serde_json::json!(r.psnr) } else { serde_json::json!(psnr_text(r.psnr)) };
                    serde_json::json!({
                        "regime": r.regime,
                        "mask_size": r.mask_size,
                        "n_images": r.n_images,
                        "mean_l1": r.mean_l1,
                        "mean_l2": r.mean_l2,
                        "psnr": psnr,
                    })
                })
                .collect();
            let doc = serde_json::json!({ "pixel_scale": PIXEL_SCALE, "region": REGION, "rows": rows });
            Ok(serde_json::to_string_pretty(&doc)?)
        }
    }
}

/// Parse the CSV rendering back into a report.
pub fn parse_csv_report(text: &str) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize::<CsvRow>() {
        let r = rec?;
        let psnr = match r.psnr.as_str() {
            "+inf" => f64::INFINITY,
            s => s.parse().map_err(|_| Error::Validation(format!("bad psnr value {s:?}")))?,
        };
        rows.push(MetricsRow {
            regime: r.regime,
            mask_size: r.mask_size,
            n_images: r.n_images,
            mean_l1: r.mean_l1,
            mean_l2: r.mean_l2,
            psnr,
        });
    }
    Ok(MetricsReport { rows })
}

//! MSE / SAD over the whole image and over the boundary band, plus the
//! shorter-edge evaluation protocol.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_image_pair, DatasetManifest};
use crate::error::{Error, Result};
use crate::labels::{extract_boundary, AlphaMatte, BoundaryMask, RgbImage};
use crate::network::{Mode, Network};
use crate::resample::{resize_matte, resize_rgb, shorter_edge_size};
use crate::tensor::Tensor;

/// Reported MSE is the mean squared error times this factor.
pub const MSE_SCALE: f64 = 1e3;
/// Reported SAD is the absolute-difference sum divided by this factor.
pub const SAD_DIVISOR: f64 = 1e3;

/// The evaluation band: identical to the training boundary rule.
pub fn eval_region_mask(gt: &AlphaMatte) -> BoundaryMask {
    extract_boundary(gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse_whole: f64,
    pub sad_whole: f64,
    /// `None` when the ground truth has no boundary pixel.
    pub mse_boundary: Option<f64>,
    pub sad_boundary: Option<f64>,
}

pub fn image_metrics(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<ImageMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    let band = eval_region_mask(gt);
    let (mut sq, mut abs, mut sq_b, mut abs_b, mut n_b) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for ((&p, &g), &m) in pred.values().iter().zip(gt.values()).zip(band.values()) {
        let e = p - g;
        sq += e * e;
        abs += e.abs();
        if m == 1 {
            sq_b += e * e;
            abs_b += e.abs();
            n_b += 1;
        }
    }
    let n = pred.values().len() as f64;
    Ok(ImageMetrics {
        mse_whole: sq / n * MSE_SCALE,
        sad_whole: abs / SAD_DIVISOR,
        mse_boundary: (n_b > 0).then(|| sq_b / n_b as f64 * MSE_SCALE),
        sad_boundary: (n_b > 0).then(|| abs_b / SAD_DIVISOR),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub n_images: usize,
    pub mse_whole: f64,
    pub sad_whole: f64,
    pub mse_boundary: Option<f64>,
    pub sad_boundary: Option<f64>,
    /// Images without any boundary pixel, left out of the boundary means.
    pub n_boundary_skipped: usize,
    /// Images that could not be read.
    pub n_unreadable: usize,
    pub mse_scale: f64,
    pub sad_divisor: f64,
    pub per_image: Vec<PerImageMetrics>,
}

impl MetricReport {
    /// Means of the per-image values.
    pub fn aggregate(dataset_id: &str, per_image: Vec<PerImageMetrics>, n_unreadable: usize) -> Self {
        let n = per_image.len();
        let mean = |vals: Vec<f64>| -> Option<f64> {
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let whole_mse = mean(per_image.iter().map(|p| p.metrics.mse_whole).collect());
        let whole_sad = mean(per_image.iter().map(|p| p.metrics.sad_whole).collect());
        let b_mse: Vec<f64> = per_image.iter().filter_map(|p| p.metrics.mse_boundary).collect();
        let b_sad: Vec<f64> = per_image.iter().filter_map(|p| p.metrics.sad_boundary).collect();
        let skipped = n - b_mse.len();
        Self {
            dataset_id: dataset_id.to_string(),
            n_images: n,
            mse_whole: whole_mse.unwrap_or(0.0),
            sad_whole: whole_sad.unwrap_or(0.0),
            mse_boundary: mean(b_mse),
            sad_boundary: mean(b_sad),
            n_boundary_skipped: skipped,
            n_unreadable,
            mse_scale: MSE_SCALE,
            sad_divisor: SAD_DIVISOR,
            per_image,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    /// Shorter image side fed to the network.
    pub edge: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { edge: 512 }
    }
}

/// Anything that maps an image to a matte of the same size.
pub trait MattePredictor: Sync {
    fn predict(&self, image: &RgbImage) -> Result<AlphaMatte>;
}

/// Runs a network under the shorter-edge protocol in eval mode.
pub struct NetworkPredictor<'a> {
    pub net: &'a Network<f32>,
    pub protocol: EvalProtocol,
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (h, w) = img.dims();
    Tensor::from_vec([1, 3, h, w], img.values().iter().map(|&v| v as f32).collect())
}

impl MattePredictor for NetworkPredictor<'_> {
    fn predict(&self, image: &RgbImage) -> Result<AlphaMatte> {
        let (h, w) = image.dims();
        let (rh, rw) = shorter_edge_size(h, w, self.protocol.edge);
        let resized = resize_rgb(image, rh, rw);
        let pred = self.net.forward_with_mode(&rgb_to_tensor(&resized), Mode::Eval)?;
        let m = pred.matte.plane(0, 0);
        let small = AlphaMatte::from_fn_clamped(rh, rw, |y, x| f64::from(m[y * rw + x]));
        Ok(resize_matte(&small, h, w))
    }
}

/// Evaluates every readable (image, matte) pair of an eval manifest.
pub fn evaluate_with(predictor: &dyn MattePredictor, manifest: &DatasetManifest, dataset_id: &str) -> Result<MetricReport> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset(manifest.root.clone()));
    }
    let results: Vec<Option<PerImageMetrics>> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<Option<PerImageMetrics>> {
            let (image, gt) = match load_image_pair(entry) {
                Ok(pair) => pair,
                Err(e) => {
                    log::warn!("skipping unreadable sample {}: {e}", entry.id);
                    return Ok(None);
                }
            };
            let pred = predictor.predict(&image)?;
            Ok(Some(PerImageMetrics {
                id: entry.id.clone(),
                metrics: image_metrics(&pred, &gt)?,
            }))
        })
        .collect::<Result<_>>()?;
    let unreadable = results.iter().filter(|r| r.is_none()).count();
    let per_image: Vec<_> = results.into_iter().flatten().collect();
    if per_image.is_empty() {
        return Err(Error::EmptyDataset(manifest.root.clone()));
    }
    Ok(MetricReport::aggregate(dataset_id, per_image, unreadable))
}

pub fn evaluate_dataset(net: &Network<f32>, manifest: &DatasetManifest, protocol: &EvalProtocol, dataset_id: &str) -> Result<MetricReport> {
    let predictor = NetworkPredictor {
        net,
        protocol: protocol.clone(),
    };
    evaluate_with(&predictor, manifest, dataset_id)
}

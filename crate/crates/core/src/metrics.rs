//! Image quality metrics and the versioned `metrics.json` report.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::Image;
use crate::losses::ssim;

pub const METRICS_VERSION: u32 = 1;
pub const LPIPS_REASON: &str = "requires pretrained network";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("{renders} renders but {gt} ground-truth images")]
    CountMismatch { renders: usize, gt: usize },
    #[error("mask selects no pixel")]
    EmptyMask,
}

/// `-10 log10(MSE)` over masked pixels, channels pooled. Identical inputs give `+inf`.
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    let n = a.width * a.height;
    if mask.is_some_and(|m| m.len() != n) {
        return Err(MetricsError::DimensionMismatch(a.dims(), (mask.unwrap().len(), 1)));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[p * 3 + c] as f64 - b.data[p * 3 + c] as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// A metric that serializes `+inf` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub f64);

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric(v)),
            Raw::Str(s) if s == "inf" => Ok(Metric(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: Metric,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: Metric,
    pub mean_ssim: f64,
    pub lpips: Option<f64>,
    pub lpips_reason: Option<String>,
    /// Fields written by other versions, kept on round trip.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Per-view and mean PSNR/SSIM for index-aligned render and ground-truth lists.
pub fn evaluate(renders: &[Image], gt: &[Image], view_ids: &[usize]) -> Result<EvalReport, MetricsError> {
    if renders.len() != gt.len() || view_ids.len() != gt.len() {
        return Err(MetricsError::CountMismatch {
            renders: renders.len(),
            gt: gt.len(),
        });
    }
    let mut views = Vec::with_capacity(gt.len());
    for ((r, g), &id) in renders.iter().zip(gt).zip(view_ids) {
        let p = psnr(r, g, None)?;
        let (s, _) = ssim(r, g, None).map_err(|_| MetricsError::DimensionMismatch(r.dims(), g.dims()))?;
        views.push(ViewMetrics {
            view: id,
            psnr: Metric(p),
            ssim: s,
        });
    }
    let n = views.len().max(1) as f64;
    Ok(EvalReport {
        version: METRICS_VERSION,
        mean_psnr: Metric(views.iter().map(|v| v.psnr.0).sum::<f64>() / n),
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        lpips: None,
        lpips_reason: Some(LPIPS_REASON.to_string()),
        extra: Default::default(),
    })
}

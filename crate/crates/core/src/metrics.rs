//! Evaluation metrics for binary segmentation maps: MAE, IoU and F-beta,
//! computed per image and averaged over a dataset.

use std::borrow::Borrow;
use std::fmt;

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_SQ: f64 = 0.3;

fn check(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::input(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("empty prediction map"));
    }
    Ok(())
}

/// Mean absolute error between a probability map and a binary mask.
pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    check(&pred, &gt)?;
    let s = Zip::from(&pred).and(&gt).fold(0.0, |acc, p, g| acc + (p - g).abs());
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Pixel counts after binarizing `pred >= threshold` against `gt > 0.5`.
pub fn confusion(pred: ArrayView2<f64>, gt: ArrayView2<f64>, threshold: f64) -> Result<Confusion> {
    check(&pred, &gt)?;
    let mut c = Confusion::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p >= threshold, g > 0.5) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        _ => {}
    });
    Ok(c)
}

impl Confusion {
    /// Intersection over union; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// F-beta with `beta_sq` = beta squared. Both masks empty scores 1; any
    /// other case with an undefined precision or recall scores 0.
    pub fn f_beta(&self, beta_sq: f64) -> f64 {
        let predicted = self.tp + self.fp;
        let actual = self.tp + self.fn_;
        if predicted == 0 && actual == 0 {
            return 1.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / predicted as f64;
        let r = self.tp as f64 / actual as f64;
        (1.0 + beta_sq) * p * r / (beta_sq * p + r)
    }
}

pub fn iou(pred: ArrayView2<f64>, gt: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    Ok(confusion(pred, gt, threshold)?.iou())
}

pub fn f_beta(pred: ArrayView2<f64>, gt: ArrayView2<f64>, threshold: f64, beta_sq: f64) -> Result<f64> {
    Ok(confusion(pred, gt, threshold)?.f_beta(beta_sq))
}

/// Best F-beta over the 256 thresholds `k / 255`.
pub fn f_beta_max(pred: ArrayView2<f64>, gt: ArrayView2<f64>, beta_sq: f64) -> Result<f64> {
    check(&pred, &gt)?;
    // histogram predictions by the highest threshold index they reach
    let mut pos = [0u64; 256];
    let mut neg = [0u64; 256];
    let mut n_pos = 0u64;
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        let k = ((p.clamp(0.0, 1.0) * 255.0).floor() as usize).min(255);
        // p >= k/255 must hold for bin k; guard against rounding at the edge
        let k = if p < k as f64 / 255.0 { k - 1 } else { k };
        if g > 0.5 {
            pos[k] += 1;
            n_pos += 1;
        } else {
            neg[k] += 1;
        }
    });
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = 0.0f64;
    for k in (0..256).rev() {
        tp += pos[k];
        fp += neg[k];
        let c = Confusion {
            tp,
            fp,
            fn_: n_pos - tp,
        };
        best = best.max(c.f_beta(beta_sq));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Threshold {
    Fixed(f64),
    /// Twice the mean prediction of each image, clamped below 1.
    Adaptive,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(0.5)
    }
}

impl Threshold {
    pub fn resolve(&self, pred: ArrayView2<f64>) -> f64 {
        match *self {
            Threshold::Fixed(t) => t,
            Threshold::Adaptive => {
                let m = pred.mean().unwrap_or(0.0);
                (2.0 * m).clamp(0.0, 1.0 - 1e-9)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FBetaMode {
    #[default]
    Single,
    MaxOverThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(default)]
    pub threshold: Threshold,
    #[serde(default)]
    pub f_beta_mode: FBetaMode,
    pub beta_sq: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::default(),
            f_beta_mode: FBetaMode::Single,
            beta_sq: DEFAULT_BETA_SQ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub iou: f64,
    pub f_beta: f64,
    pub n_images: usize,
    /// Fixed threshold, or the mean of the per-image adaptive thresholds.
    pub threshold: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mae,iou,f_beta,n_images,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{},{:.6}",
            self.mae, self.iou, self.f_beta, self.n_images, self.threshold
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}", "images", self.n_images)?;
        writeln!(f, "{:<10}{:>10.4}", "threshold", self.threshold)?;
        writeln!(f, "{:<10}{:>10.4}", "MAE", self.mae)?;
        writeln!(f, "{:<10}{:>10.4}", "IoU", self.iou)?;
        write!(f, "{:<10}{:>10.4}", "F_beta", self.f_beta)
    }
}

/// Scores every `(prediction, ground truth)` pair and averages per image.
pub fn evaluate_dataset<I, P, G>(pairs: I, cfg: &MetricConfig) -> Result<MetricReport>
where
    I: IntoIterator<Item = (P, G)>,
    P: Borrow<Array2<f64>>,
    G: Borrow<Array2<f64>>,
{
    let (mut m, mut i, mut f, mut t) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (p, g) in pairs {
        let (p, g) = (p.borrow().view(), g.borrow().view());
        let th = cfg.threshold.resolve(p);
        let c = confusion(p, g, th)?;
        m += mae(p, g)?;
        i += c.iou();
        f += match cfg.f_beta_mode {
            FBetaMode::Single => c.f_beta(cfg.beta_sq),
            FBetaMode::MaxOverThresholds => f_beta_max(p, g, cfg.beta_sq)?,
        };
        t += th;
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("cannot evaluate an empty dataset"));
    }
    let k = n as f64;
    Ok(MetricReport {
        mae: m / k,
        iou: i / k,
        f_beta: f / k,
        n_images: n,
        threshold: t / k,
    })
}

/// Splits a `(B, 1, H, W)` tensor into per-image `f64` maps.
pub fn maps_from_tensor(x: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::input(format!("expected one channel, got {c}")));
    }
    let v = crate::ops::to_f64_vec(x)?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("slice length"))
        .collect())
}

//! Training objectives: pixel-position-aware loss on the mask outputs, plain
//! BCE on the edge output, and their deep-supervision combination
//! `total = edge + sum_i ppa_i / 2^i`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::assembly::FusionGraphOutputs;
use crate::error::{Error, Result};
use crate::ops::{box_average, resize_mask, scalar, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpaConfig {
    /// Side of the square window used for the local GT average.
    pub window: usize,
    /// Weight gain on pixels whose local average disagrees with their label.
    pub gain: f64,
    /// Additive smoothing in the weighted IoU ratio.
    pub smooth: f64,
}

impl Default for PpaConfig {
    fn default() -> Self {
        Self {
            window: 31,
            gain: 5.0,
            smooth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default)]
    pub ppa: PpaConfig,
    pub deep_supervision: bool,
    pub edge_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ppa: PpaConfig::default(),
            deep_supervision: true,
            edge_supervision: true,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "{what}: logits {:?} and ground truth {:?} differ in shape",
            a.dims(),
            b.dims()
        )));
    }
    if a.rank() != 4 {
        return Err(Error::input(format!("{what}: expected (B, C, H, W), got {:?}", a.dims())));
    }
    Ok(())
}

/// Elementwise `bce(sigmoid(x), g)` in the overflow-free form
/// `max(x, 0) - x g + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * gt)?)? + soft)?)
}

/// Per-pixel hard-pixel weight `1 + gain * |local_mean(gt) - gt|`.
pub fn ppa_weights(gt: &Tensor, cfg: &PpaConfig) -> Result<Tensor> {
    let local = box_average(gt, cfg.window / 2)?;
    Ok(((local - gt)?.abs()? * cfg.gain)?.affine(1.0, 1.0)?)
}

/// Sum over (C, H, W) giving one value per image.
fn per_image_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// Weighted BCE plus weighted IoU, averaged over the batch.
pub fn ppa_loss_with(logits: &Tensor, gt: &Tensor, cfg: &PpaConfig) -> Result<Tensor> {
    same_shape(logits, gt, "ppa_loss")?;
    let w = ppa_weights(gt, cfg)?;
    let w_sum = per_image_sum(&w)?;
    let wbce = (per_image_sum(&(&w * bce_with_logits(logits, gt)?)?)? / &w_sum)?;
    let p = sigmoid(logits)?;
    let pg = (&p * gt)?;
    let inter = per_image_sum(&(&w * &pg)?)?;
    let union = per_image_sum(&(&w * ((&p + gt)? - &pg)?)?)?;
    let wiou = ((inter + cfg.smooth)? / (union + cfg.smooth)?)?.affine(-1.0, 1.0)?;
    Ok((wbce + wiou)?.mean(0)?)
}

pub fn ppa_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    ppa_loss_with(logits, gt, &PpaConfig::default())
}

/// Mean binary cross entropy over every pixel.
pub fn edge_bce_loss(logits: &Tensor, gt_edge: &Tensor) -> Result<Tensor> {
    same_shape(logits, gt_edge, "edge_bce_loss")?;
    Ok(bce_with_logits(logits, gt_edge)?.mean_all()?)
}

/// Scalar loss tensors of one step; all keep their autograd history.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_bce_edge: Tensor,
    /// Index 0 is the main output, 1..=4 the auxiliary outputs.
    pub l_ppa_per_scale: Vec<Tensor>,
    pub total: Tensor,
}

/// Plain numbers of a [`LossTerms`], one CSV row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_bce_edge: f64,
    pub ppa_0: f64,
    pub ppa_1: f64,
    pub ppa_2: f64,
    pub ppa_3: f64,
    pub ppa_4: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn record(&self, step: u64) -> Result<LossRecord> {
        let p = self
            .l_ppa_per_scale
            .iter()
            .map(scalar)
            .collect::<Result<Vec<_>>>()?;
        Ok(LossRecord {
            step,
            l_bce_edge: scalar(&self.l_bce_edge)?,
            ppa_0: p[0],
            ppa_1: p[1],
            ppa_2: p[2],
            ppa_3: p[3],
            ppa_4: p[4],
            total: scalar(&self.total)?,
        })
    }
}

/// Weight of the PPA term at scale `i`.
pub fn scale_weight(i: usize) -> f64 {
    0.5f64.powi(i as i32)
}

/// Combines every supervised output against the ground truth. `gt_mask` and
/// `gt_edge` are `(B, 1, H, W)` at input resolution and are resized to each
/// output's native resolution.
///
/// Disabled terms are reported as zero.
pub fn total_loss(
    outputs: &FusionGraphOutputs,
    gt_mask: &Tensor,
    gt_edge: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let at = |gt: &Tensor, like: &Tensor| -> Result<Tensor> {
        let (_, _, h, w) = like.dims4()?;
        resize_mask(gt, h, w)
    };
    let zero = outputs.main.zeros_like()?.sum_all()?;
    let mut ppa = vec![ppa_loss_with(&outputs.main, &at(gt_mask, &outputs.main)?, &cfg.ppa)?];
    if cfg.deep_supervision {
        if outputs.aux.len() != 4 {
            return Err(Error::config(format!(
                "deep supervision needs 4 auxiliary outputs, the network produced {}",
                outputs.aux.len()
            )));
        }
        for a in &outputs.aux {
            ppa.push(ppa_loss_with(a, &at(gt_mask, a)?, &cfg.ppa)?);
        }
    } else {
        ppa.extend(std::iter::repeat_n(zero.clone(), 4));
    }
    let edge = match (&outputs.edge, cfg.edge_supervision) {
        (Some(e), true) => edge_bce_loss(e, &at(gt_edge, e)?)?,
        (None, true) => {
            return Err(Error::config("edge supervision is on but the network has no edge output"))
        }
        (_, false) => zero,
    };
    let mut total = edge.clone();
    for (i, l) in ppa.iter().enumerate() {
        total = (total + (l * scale_weight(i))?)?;
    }
    Ok(LossTerms {
        l_bce_edge: edge,
        l_ppa_per_scale: ppa,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use candle_core::{DType, Device};

    fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn saturated_prediction_vanishes() {
        let g: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8 as f64).collect();
        let logits: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        let l = scalar(&ppa_loss(&t(logits.clone(), 8, 8), &t(g.clone(), 8, 8)).unwrap()).unwrap();
        assert!(l < 1e-4, "{l}");
        let e = scalar(&edge_bce_loss(&t(logits, 8, 8), &t(g, 8, 8)).unwrap()).unwrap();
        assert!(e < 1e-4);
    }

    #[test]
    fn uniform_gt_gives_unit_weights() {
        let g = t(vec![1.0; 36], 6, 6);
        let w = to_f64_vec(&ppa_weights(&g, &PpaConfig::default()).unwrap()).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        // so weighted BCE equals the plain mean BCE
        let x = Tensor::randn(0f64, 2.0, (1, 1, 6, 6), &Device::Cpu).unwrap();
        let w = ppa_weights(&g, &PpaConfig::default()).unwrap();
        let wbce = scalar(
            &((&w * bce_with_logits(&x, &g).unwrap()).unwrap().sum_all().unwrap() / 36.0).unwrap(),
        )
        .unwrap();
        let bce = scalar(&edge_bce_loss(&x, &g).unwrap()).unwrap();
        assert!((wbce - bce).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_edge_loss_is_ln2() {
        let x = Tensor::zeros((2, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let g = Tensor::rand(0f64, 1.0, (2, 1, 4, 4), &Device::Cpu).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let l = scalar(&edge_bce_loss(&x, &g).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn edge_two_by_two_scalar_oracle() {
        let l = scalar(&edge_bce_loss(&t(vec![1.0; 4], 2, 2), &t(vec![1.0, 0.0, 0.0, 0.0], 2, 2)).unwrap()).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let want = (-(s.ln()) - 3.0 * (1.0 - s).ln()) / 4.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let a = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ppa_loss(&a, &b), Err(Error::Input(_))));
        assert!(matches!(edge_bce_loss(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn moving_toward_saturation_decreases_loss() {
        let g = Tensor::rand(0f64, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let target = g.affine(20.0, -10.0).unwrap();
        let x0 = Tensor::randn(0f64, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=5 {
            let a = k as f64 / 5.0;
            let x = ((&x0 * (1.0 - a)).unwrap() + (&target * a).unwrap()).unwrap();
            let l = scalar(&ppa_loss(&x, &g).unwrap()).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn scale_weights_sum() {
        let s: f64 = (0..5).map(scale_weight).sum();
        assert_eq!(s, 1.9375);
    }
}

//! Multi-orientation intensity-based contrast (MIC) heads.
//!
//! An [`Icfe`] gates its input with a per-row and a per-column sigmoid
//! attention vector computed from axis-wise average pooling. A [`Mic`]
//! projects its input with a 1x1 convolution, runs one ICFE per orientation
//! (rotating the input by multiples of 90 degrees before and rotating the
//! result back after), multiplies the oriented responses elementwise and
//! finishes with a 3x3 and a 1x1 conv-norm-ReLU block.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::describe::{LayerKind, Shape4, Tracer};
use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, ConvGeom, ConvNorm, Mode};
use crate::ops::{rot90, sigmoid};
use crate::params::Scope;

/// How many ICFEs a MIC runs and at which orientations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationStrategy {
    /// One ICFE, no rotation.
    Single,
    /// Two ICFEs, both unrotated.
    DualSame,
    /// Three ICFEs at 0, 90 and 180 degrees.
    Tri,
    /// Four ICFEs at 0, 90, 180 and 270 degrees.
    Quad,
    /// Two ICFEs at 0 and 90 degrees.
    Mic,
}

impl RotationStrategy {
    /// Counterclockwise quarter turns applied before each ICFE.
    pub fn orientations(&self) -> &'static [i32] {
        match self {
            RotationStrategy::Single => &[0],
            RotationStrategy::DualSame => &[0, 0],
            RotationStrategy::Tri => &[0, 1, 2],
            RotationStrategy::Quad => &[0, 1, 2, 3],
            RotationStrategy::Mic => &[0, 1],
        }
    }

    pub fn num_extractors(&self) -> usize {
        self.orientations().len()
    }

    pub fn needs_square_input(&self) -> bool {
        self.orientations().iter().any(|d| d % 2 != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcfeConfig {
    pub channels: usize,
    pub reduction: usize,
    pub min_mid: usize,
}

impl IcfeConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: 16,
            min_mid: 8,
        }
    }

    pub fn mid_channels(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(self.min_mid)
    }
}

/// Directional attention extractor.
#[derive(Debug, Clone)]
pub struct Icfe {
    name: String,
    channels: usize,
    mid: usize,
    joint: ConvNorm,
    conv_h: Conv2d,
    conv_w: Conv2d,
}

impl Icfe {
    pub fn new(scope: &Scope, cfg: IcfeConfig) -> Result<Self> {
        let mid = cfg.mid_channels();
        Ok(Self {
            name: scope.prefix().to_string(),
            channels: cfg.channels,
            mid,
            joint: ConvNorm::new(&scope.pp("joint"), ConvGeom::new(cfg.channels, mid, 1), Act::Swish)?,
            conv_h: Conv2d::new(&scope.pp("conv_h"), ConvGeom::new(mid, cfg.channels, 1))?,
            conv_w: Conv2d::new(&scope.pp("conv_w"), ConvGeom::new(mid, cfg.channels, 1))?,
        })
    }

    pub fn mid_channels(&self) -> usize {
        self.mid
    }

    pub fn conv_h(&self) -> &Conv2d {
        &self.conv_h
    }

    pub fn conv_w(&self) -> &Conv2d {
        &self.conv_w
    }

    /// Row attention `(B, C, H, 1)` and column attention `(B, C, 1, W)`,
    /// both strictly inside `(0, 1)`.
    pub fn attention(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        // average over width -> (B, C, H, 1); over height -> (B, C, 1, W) -> (B, C, W, 1)
        let pooled_h = x.mean_keepdim(3)?;
        let pooled_w = x.mean_keepdim(2)?.transpose(2, 3)?;
        let joint = Tensor::cat(&[&pooled_h, &pooled_w], 2)?;
        let mid = self.joint.forward(&joint, mode)?;
        let mid_h = mid.narrow(2, 0, h)?;
        let mid_w = mid.narrow(2, h, w)?.transpose(2, 3)?;
        let att_h = sigmoid(&self.conv_h.forward(&mid_h)?)?;
        let att_w = sigmoid(&self.conv_w.forward(&mid_w.contiguous()?)?)?;
        debug_assert_eq!(att_h.dims(), &[b, c, h, 1]);
        Ok((att_h, att_w))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (att_h, att_w) = self.attention(x, mode)?;
        Ok(x.broadcast_mul(&att_h)?.broadcast_mul(&att_w)?)
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let [b, c, h, w] = x;
        let n = &self.name;
        t.record(format!("{n}.pool_h"), LayerKind::Pool, [b, c, h, 1], 0, (b * c * h * w) as u64)?;
        t.record(format!("{n}.pool_w"), LayerKind::Pool, [b, c, 1, w], 0, (b * c * h * w) as u64)?;
        t.record(format!("{n}.concat"), LayerKind::Concat, [b, c, h + w, 1], 0, 0)?;
        self.joint.trace(t, [b, c, h + w, 1])?;
        let ah = self.conv_h.trace(t, [b, self.mid, h, 1])?;
        t.elementwise(format!("{n}.sigmoid_h"), LayerKind::Activation, ah)?;
        let aw = self.conv_w.trace(t, [b, self.mid, w, 1])?;
        t.elementwise(format!("{n}.sigmoid_w"), LayerKind::Activation, aw)?;
        t.elementwise(format!("{n}.gate_h"), LayerKind::Elementwise, x)?;
        t.elementwise(format!("{n}.gate_w"), LayerKind::Elementwise, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub strategy: RotationStrategy,
    pub share_icfe_weights: bool,
    pub reduction: usize,
}

impl MicConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            strategy: RotationStrategy::Mic,
            share_icfe_weights: false,
            reduction: 16,
        }
    }

    pub fn strategy(mut self, strategy: RotationStrategy) -> Self {
        self.strategy = strategy;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Mic {
    name: String,
    cfg: MicConfig,
    proj: Conv2d,
    icfes: Vec<Icfe>,
    out3: ConvNorm,
    out1: ConvNorm,
}

impl Mic {
    pub fn new(scope: &Scope, cfg: MicConfig) -> Result<Self> {
        let width = cfg.out_channels;
        let icfe_cfg = IcfeConfig {
            reduction: cfg.reduction,
            ..IcfeConfig::new(width)
        };
        let icfes = (0..cfg.strategy.num_extractors())
            .map(|i| {
                let idx = if cfg.share_icfe_weights { 0 } else { i };
                Icfe::new(&scope.pp(format!("icfe{idx}")), icfe_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: scope.prefix().to_string(),
            cfg,
            proj: Conv2d::new(&scope.pp("proj"), ConvGeom::new(cfg.in_channels, width, 1))?,
            icfes,
            out3: ConvNorm::new(&scope.pp("out3"), ConvGeom::new(width, width, 3), Act::Relu)?,
            out1: ConvNorm::new(&scope.pp("out1"), ConvGeom::new(width, width, 1), Act::Relu)?,
        })
    }

    pub fn config(&self) -> &MicConfig {
        &self.cfg
    }

    pub fn extractors(&self) -> &[Icfe] {
        &self.icfes
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(x)
    }

    fn check_square(&self, h: usize, w: usize) -> Result<()> {
        if self.cfg.strategy.needs_square_input() && h != w {
            return Err(Error::input(format!(
                "{}: strategy {:?} rotates features and needs a square input, got {h}x{w}",
                self.name, self.cfg.strategy
            )));
        }
        Ok(())
    }

    /// Each ICFE response on the projected features, rotated back to the
    /// original orientation.
    pub fn oriented_factors(&self, projected: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = projected.dims4()?;
        self.check_square(h, w)?;
        self.cfg
            .strategy
            .orientations()
            .iter()
            .zip(&self.icfes)
            .map(|(&d, icfe)| rot90(&icfe.forward(&rot90(projected, d)?, mode)?, -d))
            .collect()
    }

    /// Elementwise product of the oriented factors (`f3` before the output convs).
    pub fn contrast(&self, projected: &Tensor, mode: Mode) -> Result<Tensor> {
        let factors = self.oriented_factors(projected, mode)?;
        let mut acc = factors[0].clone();
        for f in &factors[1..] {
            acc = (acc * f)?;
        }
        Ok(acc)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let p = self.project(x)?;
        let f3 = self.contrast(&p, mode)?;
        let y = self.out3.forward(&f3, mode)?;
        self.out1.forward(&y, mode)
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        self.check_square(x[2], x[3])?;
        let p = self.proj.trace(t, x)?;
        for (i, (&d, icfe)) in self.cfg.strategy.orientations().iter().zip(&self.icfes).enumerate() {
            let rotated = if d % 2 != 0 { [p[0], p[1], p[3], p[2]] } else { p };
            if d != 0 {
                t.record(format!("{}.rot{i}", self.name), LayerKind::Rotate, rotated, 0, 0)?;
            }
            icfe.trace(t, rotated)?;
            if d != 0 {
                t.record(format!("{}.unrot{i}", self.name), LayerKind::Rotate, p, 0, 0)?;
            }
        }
        for i in 1..self.icfes.len() {
            t.elementwise(format!("{}.product{i}", self.name), LayerKind::Elementwise, p)?;
        }
        let y = self.out3.trace(t, p)?;
        self.out1.trace(t, y)
    }
}

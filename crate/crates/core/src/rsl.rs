//! Reflection semantic logical (RSL) heads: four parallel context branches
//! with growing receptive fields, merged by a 3x3 convolution and joined to
//! a pointwise residual path.
//!
//! ```text
//! b1 = N(conv1x1(x))
//! b2 = N(conv3x3,d7(BConv7x7(BConv1x1(x))))
//! b3 = N(conv3x3,d7(BConv7x7(BConv7x7(BConv1x1(x)))))
//! b4 = N(conv1x1(x))
//! out = ReLU(N(conv3x3(b1 ++ b2 ++ b3)) + b4)
//! ```

use candle_core::Tensor;

use crate::describe::{LayerKind, Shape4, Tracer};
use crate::error::{Error, Result};
use crate::nn::{receptive_field, Act, BatchNorm2d, Conv2d, ConvGeom, ConvNorm, Mode, NormConfig};
use crate::params::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RslConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Learnable scale and shift in every normalization layer.
    pub norm_affine: bool,
    /// Bias terms in every convolution.
    pub conv_bias: bool,
}

impl RslConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            norm_affine: true,
            conv_bias: true,
        }
    }
}

/// One context branch: a stack of BConv blocks, then a final convolution
/// and a branch-level normalization with no activation.
#[derive(Debug, Clone)]
pub struct Branch {
    blocks: Vec<ConvNorm>,
    last: Conv2d,
    norm: BatchNorm2d,
}

impl Branch {
    fn new(scope: &Scope, cfg: &RslConfig, stack: &[ConvGeom], last: ConvGeom) -> Result<Self> {
        let norm_cfg = NormConfig {
            affine: cfg.norm_affine,
            ..NormConfig::default()
        };
        let blocks = stack
            .iter()
            .enumerate()
            .map(|(i, g)| {
                ConvNorm::with_norm(&scope.pp(format!("bconv{i}")), g.bias(cfg.conv_bias), Act::Relu, norm_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            last: Conv2d::new(&scope.pp("conv"), last.bias(cfg.conv_bias))?,
            norm: BatchNorm2d::new(&scope.pp("bn"), last.out_channels, norm_cfg)?,
        })
    }

    /// Convolution geometries in application order.
    pub fn geometry(&self) -> Vec<ConvGeom> {
        self.blocks
            .iter()
            .map(|b| *b.conv.geom())
            .chain(std::iter::once(*self.last.geom()))
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        self.norm.forward(&self.last.forward(&y)?, mode)
    }

    fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let mut y = x;
        for b in &self.blocks {
            y = b.trace(t, y)?;
        }
        let y = self.last.trace(t, y)?;
        self.norm.trace(t, y)
    }
}

#[derive(Debug, Clone)]
pub struct Rsl {
    name: String,
    cfg: RslConfig,
    branches: [Branch; 4],
    merge: Conv2d,
    merge_norm: BatchNorm2d,
}

impl Rsl {
    pub fn new(scope: &Scope, cfg: RslConfig) -> Result<Self> {
        let (i, o) = (cfg.in_channels, cfg.out_channels);
        let pw_in = ConvGeom::new(i, o, 1);
        let k7 = ConvGeom::new(o, o, 7);
        let dilated = ConvGeom::new(o, o, 3).dilation(7);
        let branches = [
            Branch::new(&scope.pp("branch1"), &cfg, &[], pw_in)?,
            Branch::new(&scope.pp("branch2"), &cfg, &[pw_in, k7], dilated)?,
            Branch::new(&scope.pp("branch3"), &cfg, &[pw_in, k7, k7], dilated)?,
            Branch::new(&scope.pp("branch4"), &cfg, &[], pw_in)?,
        ];
        let norm_cfg = NormConfig {
            affine: cfg.norm_affine,
            ..NormConfig::default()
        };
        Ok(Self {
            name: scope.prefix().to_string(),
            cfg,
            branches,
            merge: Conv2d::new(&scope.pp("merge").pp("conv"), ConvGeom::new(3 * o, o, 3).bias(cfg.conv_bias))?,
            merge_norm: BatchNorm2d::new(&scope.pp("merge").pp("bn"), o, norm_cfg)?,
        })
    }

    pub fn config(&self) -> &RslConfig {
        &self.cfg
    }

    pub fn branches(&self) -> &[Branch; 4] {
        &self.branches
    }

    /// Analytic receptive field of each branch, in input pixels.
    pub fn receptive_fields(&self) -> Vec<usize> {
        self.branches
            .iter()
            .map(|b| receptive_field(&b.geometry()))
            .collect()
    }

    /// The four branch outputs `b1..b4`.
    pub fn branch_outputs(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let c = x.dim(1)?;
        if c != self.cfg.in_channels {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.cfg.in_channels
            )));
        }
        self.branches.iter().map(|b| b.forward(x, mode)).collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = self.branch_outputs(x, mode)?;
        let cat = Tensor::cat(&[&b[0], &b[1], &b[2]], 1)?;
        let mid = self.merge_norm.forward(&self.merge.forward(&cat)?, mode)?;
        Ok((mid + &b[3])?.relu()?)
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        if x[1] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {}",
                self.name, self.cfg.in_channels, x[1]
            )));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.trace(t, x))
            .collect::<Result<Vec<_>>>()?;
        let [bb, o, h, w] = outs[0];
        t.record(format!("{}.concat", self.name), LayerKind::Concat, [bb, 3 * o, h, w], 0, 0)?;
        let y = self.merge.trace(t, [bb, 3 * o, h, w])?;
        let y = self.merge_norm.trace(t, y)?;
        t.elementwise(format!("{}.add", self.name), LayerKind::Elementwise, y)?;
        t.elementwise(format!("{}.relu", self.name), LayerKind::Activation, y)
    }
}

/// Receptive field of the whole module: the widest branch grown by the 3x3
/// merge convolution.
pub fn module_receptive_field(rsl: &Rsl) -> usize {
    let widest = rsl.receptive_fields().into_iter().max().unwrap_or(1);
    widest + (rsl.merge.geom().kernel - 1) * rsl.merge.geom().dilation
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn build(cfg: RslConfig) -> Rsl {
        let s = ParamStore::new(21, DType::F64, &Device::Cpu);
        Rsl::new(&s.root().pp("rsl"), cfg).unwrap()
    }

    #[test]
    fn receptive_fields_per_branch() {
        let r = build(RslConfig::new(4, 4));
        assert_eq!(r.receptive_fields(), vec![1, 21, 27, 1]);
        assert_eq!(module_receptive_field(&r), 29);
    }

    #[test]
    fn stage5_size_is_preserved_and_output_nonnegative() {
        let r = build(RslConfig::new(8, 6));
        let x = Tensor::randn(0f64, 1.0, (2, 8, 11, 11), &Device::Cpu).unwrap();
        let y = r.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims(), &[2, 6, 11, 11]);
        assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v >= 0.0));
        let mut t = Tracer::new();
        assert_eq!(r.trace(&mut t, [2, 8, 11, 11]).unwrap(), [2, 6, 11, 11]);
    }

    #[test]
    fn zero_input_without_biases_or_affine_is_zero() {
        let mut cfg = RslConfig::new(4, 4);
        cfg.norm_affine = false;
        cfg.conv_bias = false;
        let r = build(cfg);
        let x = Tensor::zeros((1, 4, 9, 9), DType::F64, &Device::Cpu).unwrap();
        let y = r.forward(&x, Mode::Eval).unwrap();
        assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let r = build(RslConfig::new(4, 4));
        let x = Tensor::zeros((1, 5, 9, 9), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(r.forward(&x, Mode::Eval), Err(Error::Config(_))));
    }
}

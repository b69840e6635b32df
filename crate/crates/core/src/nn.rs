//! Primitive layers: convolution, batch normalization and their fused
//! conv-norm-activation blocks.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::describe::{numel, LayerKind, Shape4, Tracer};
use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// Whether normalization layers use batch statistics (and update their
/// running averages) or the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Static description of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvGeom {
    /// A stride-1, size-preserving convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation and the matching size-preserving padding
    /// `dilation * (kernel - 1) / 2`.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn out_size(&self, size: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (size + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    pub fn num_params(&self) -> u64 {
        let w = self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel;
        (w + if self.bias { self.out_channels } else { 0 }) as u64
    }

    /// `H_out * W_out * C_out * (C_in / groups) * k * k` per image, times batch.
    pub fn macs(&self, out: Shape4) -> u64 {
        numel(out) * ((self.in_channels / self.groups) * self.kernel * self.kernel) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::config(format!("invalid convolution {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Receptive field of a chain of convolutions,
/// `rf' = rf + dilation * (k - 1) * jump`, `jump' = jump * stride`.
pub fn receptive_field(chain: &[ConvGeom]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for g in chain {
        rf += g.dilation * (g.kernel - 1) * jump;
        jump *= g.stride;
    }
    rf
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    geom: ConvGeom,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(scope: &Scope, geom: ConvGeom) -> Result<Self> {
        geom.validate()?;
        let fan_in = geom.in_channels / geom.groups * geom.kernel * geom.kernel;
        let weight = scope.param(
            (
                geom.out_channels,
                geom.in_channels / geom.groups,
                geom.kernel,
                geom.kernel,
            ),
            "weight",
            Init::KaimingNormal { fan_in },
        )?;
        let bias = if geom.bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Some(scope.param(geom.out_channels, "bias", Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self {
            name: scope.prefix().to_string(),
            geom,
            weight,
            bias,
        })
    }

    pub fn geom(&self) -> &ConvGeom {
        &self.geom
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias_tensor(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.geom.in_channels {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.geom.in_channels
            )));
        }
        let g = &self.geom;
        let y = if g.kernel == 1 && g.stride == 1 && g.groups == 1 && g.padding == 0 {
            // pointwise: a plain matrix product over channels
            let (b, _, h, w) = x.dims4()?;
            let xm = x.reshape((b, c, h * w))?;
            let wm = self.weight.reshape((g.out_channels, c))?;
            wm.broadcast_left(b)?
                .contiguous()?
                .matmul(&xm.contiguous()?)?
                .reshape((b, g.out_channels, h, w))?
        } else {
            x.conv2d(&self.weight, g.padding, g.stride, g.dilation, g.groups)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, g.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        if x[1] != self.geom.in_channels {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {}",
                self.name, self.geom.in_channels, x[1]
            )));
        }
        let out = [
            x[0],
            self.geom.out_channels,
            self.geom.out_size(x[2]),
            self.geom.out_size(x[3]),
        ];
        t.record(
            self.name.clone(),
            LayerKind::Conv,
            out,
            self.geom.num_params(),
            self.geom.macs(out),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormConfig {
    pub affine: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            affine: true,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Batch normalization over `(B, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    name: String,
    channels: usize,
    cfg: NormConfig,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize, cfg: NormConfig) -> Result<Self> {
        let (weight, bias) = if cfg.affine {
            (
                Some(scope.param(channels, "weight", Init::Const(1.0))?),
                Some(scope.param(channels, "bias", Init::Const(0.0))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            name: scope.prefix().to_string(),
            channels,
            cfg,
            weight,
            bias,
            running_mean: scope.buffer(channels, "running_mean", 0.0)?,
            running_var: scope.buffer(channels, "running_var", 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let shape = (1, c, 1, 1);
        let xhat = match mode {
            Mode::Train => {
                let n = b * h * w;
                if n < 2 {
                    return Err(Error::input(format!(
                        "{}: batch statistics need more than one value per channel, got input {:?}",
                        self.name,
                        x.dims()
                    )));
                }
                let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, n))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                let m = self.cfg.momentum;
                let unbiased = (var.detach() * (n as f64 / (n as f64 - 1.0)))?.flatten_all()?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                x.broadcast_sub(&mean.reshape(shape)?)?
                    .broadcast_div(&(var.reshape(shape)? + self.cfg.eps)?.sqrt()?)?
            }
            Mode::Eval => {
                let mean = self.running_mean.as_tensor().reshape(shape)?;
                let std = (self.running_var.as_tensor().reshape(shape)? + self.cfg.eps)?.sqrt()?;
                x.broadcast_sub(&mean)?.broadcast_div(&std)?
            }
        };
        match (&self.weight, &self.bias) {
            (Some(wt), Some(bs)) => Ok(xhat
                .broadcast_mul(&wt.reshape(shape)?)?
                .broadcast_add(&bs.reshape(shape)?)?),
            _ => Ok(xhat),
        }
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let params = if self.cfg.affine { 2 * self.channels as u64 } else { 0 };
        t.record(self.name.clone(), LayerKind::BatchNorm, x, params, numel(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Swish,
}

impl Act {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Identity => x.clone(),
            Act::Relu => x.relu()?,
            Act::Swish => x.silu()?,
        })
    }

    pub fn trace(&self, t: &mut Tracer, name: &str, x: Shape4) -> Result<Shape4> {
        match self {
            Act::Identity => Ok(x),
            Act::Relu => t.elementwise(format!("{name}.relu"), LayerKind::Activation, x),
            Act::Swish => t.elementwise(format!("{name}.swish"), LayerKind::Activation, x),
        }
    }
}

/// Convolution followed by batch normalization and an activation. With
/// `Act::Relu` this is the `BConv` block, with `Act::Swish` the `SConv` block.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    name: String,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvNorm {
    pub fn new(scope: &Scope, geom: ConvGeom, act: Act) -> Result<Self> {
        Self::with_norm(scope, geom, act, NormConfig::default())
    }

    pub fn with_norm(scope: &Scope, geom: ConvGeom, act: Act, norm: NormConfig) -> Result<Self> {
        Ok(Self {
            name: scope.prefix().to_string(),
            conv: Conv2d::new(&scope.pp("conv"), geom)?,
            bn: BatchNorm2d::new(&scope.pp("bn"), geom.out_channels, norm)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        self.act.apply(&y)
    }

    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let y = self.conv.trace(t, x)?;
        let y = self.bn.trace(t, y)?;
        self.act.trace(t, &self.name, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn conv_param_count_closed_form() {
        assert_eq!(ConvGeom::new(16, 16, 3).num_params(), 3 * 3 * 16 * 16 + 16);
        assert_eq!(ConvGeom::new(8, 4, 1).bias(false).num_params(), 32);
    }

    #[test]
    fn conv_macs_closed_form() {
        let g = ConvGeom::new(16, 16, 3);
        assert_eq!(g.macs([1, 16, 32, 32]), 32 * 32 * 16 * 16 * 9);
        let g = ConvGeom::new(64, 64, 3).groups(32);
        assert_eq!(g.macs([1, 64, 8, 8]), 8 * 8 * 64 * 2 * 9);
    }

    #[test]
    fn padding_law_preserves_size() {
        for (k, d) in [(1, 1), (3, 1), (7, 1), (3, 7), (5, 2)] {
            let g = ConvGeom::new(4, 4, k).dilation(d);
            assert_eq!(g.out_size(11), 11, "k={k} d={d}");
        }
        assert_eq!(ConvGeom::new(4, 4, 3).stride(2).out_size(64), 32);
        assert_eq!(ConvGeom::new(4, 4, 3).stride(4).out_size(88), 22);
    }

    #[test]
    fn receptive_field_composition() {
        assert_eq!(receptive_field(&[ConvGeom::new(1, 1, 1)]), 1);
        assert_eq!(
            receptive_field(&[ConvGeom::new(1, 1, 3), ConvGeom::new(1, 1, 3)]),
            5
        );
    }

    #[test]
    fn pointwise_fast_path_matches_conv2d() {
        let store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let conv = Conv2d::new(&store.root().pp("c"), ConvGeom::new(5, 3, 1)).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 4, 6), &Device::Cpu).unwrap();
        let a = conv.forward(&x).unwrap();
        let b = x
            .conv2d(conv.weight(), 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias_tensor().unwrap().reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2, NormConfig::default()).unwrap();
        let x = Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &Device::Cpu).unwrap().affine(3.0, 5.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-9);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&v| v > 0.2 && v < 0.8), "{rm:?}");
        // eval with fresh stats is a near identity
        let store2 = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn2 = BatchNorm2d::new(&store2.root().pp("bn"), 2, NormConfig::default()).unwrap();
        let z = bn2.forward(&x, Mode::Eval).unwrap();
        let d = (z - (&x / (1.0f64 + 1e-5).sqrt()).unwrap())
            .unwrap()
            .abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_value_batches_in_training() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2, NormConfig::default()).unwrap();
        let x = Tensor::ones((1, 2, 1, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }
}

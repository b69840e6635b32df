//! Five-stage feature extractors.
//!
//! `Full` is a ResNeXt-101 (32x4d) topology: stem at stride 2, then the four
//! bottleneck stages at strides 4, 8, 16 and 32. `Tiny` is five strided
//! 3x3 conv-norm-ReLU blocks, small enough to train on a CPU.
//!
//! Checkpoint keys follow `backbone.stage{i}.block{j}.<layer>`.

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::describe::{numel, LayerKind, Shape4, Tracer};
use crate::error::{Error, Result};
use crate::nn::{Act, ConvGeom, ConvNorm, Mode};
use crate::params::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Full,
    Tiny,
}

pub const RESNEXT_CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];
pub const DEFAULT_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];
const RESNEXT_BLOCKS: [usize; 4] = [3, 4, 23, 3];
const RESNEXT_CARDINALITY: usize = 32;
const RESNEXT_BASE_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights_path: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn full() -> Self {
        Self {
            variant: BackboneVariant::Full,
            stage_channels: RESNEXT_CHANNELS.to_vec(),
            stage_strides: DEFAULT_STRIDES.to_vec(),
            pretrained_weights_path: None,
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            stage_channels: vec![16, 32, 64, 64, 64],
            stage_strides: DEFAULT_STRIDES.to_vec(),
            pretrained_weights_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 5 || self.stage_strides.len() != 5 {
            return Err(Error::config(format!(
                "backbone needs exactly 5 stage channels and strides, got {} and {}",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("backbone stage channels must be positive"));
        }
        if self.stage_strides.windows(2).any(|w| w[0] >= w[1]) || self.stage_strides[0] == 0 {
            return Err(Error::config(format!(
                "backbone stage strides must be strictly increasing, got {:?}",
                self.stage_strides
            )));
        }
        if self.stage_strides != DEFAULT_STRIDES {
            return Err(Error::config(format!(
                "{:?} backbone realizes strides {:?}, config asks for {:?}",
                self.variant, DEFAULT_STRIDES, self.stage_strides
            )));
        }
        if self.variant == BackboneVariant::Full && self.stage_channels != RESNEXT_CHANNELS {
            return Err(Error::config(format!(
                "full backbone has stage channels {:?}, config asks for {:?}",
                RESNEXT_CHANNELS, self.stage_channels
            )));
        }
        Ok(())
    }

    /// Largest stride; input sides must be multiples of it.
    pub fn max_stride(&self) -> usize {
        *self.stage_strides.last().unwrap_or(&1)
    }
}

/// Per-stage backbone features, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    name: String,
    conv1: ConvNorm,
    conv2: ConvNorm,
    conv3: ConvNorm,
    downsample: Option<ConvNorm>,
}

impl Bottleneck {
    fn new(scope: &Scope, in_c: usize, planes: usize, stride: usize) -> Result<Self> {
        let width = planes * RESNEXT_BASE_WIDTH / 64 * RESNEXT_CARDINALITY;
        let out_c = planes * 4;
        let downsample = if stride != 1 || in_c != out_c {
            Some(ConvNorm::new(
                &scope.pp("downsample"),
                ConvGeom::new(in_c, out_c, 1).stride(stride).bias(false),
                Act::Identity,
            )?)
        } else {
            None
        };
        Ok(Self {
            name: scope.prefix().to_string(),
            conv1: ConvNorm::new(&scope.pp("conv1"), ConvGeom::new(in_c, width, 1).bias(false), Act::Relu)?,
            conv2: ConvNorm::new(
                &scope.pp("conv2"),
                ConvGeom::new(width, width, 3)
                    .stride(stride)
                    .groups(RESNEXT_CARDINALITY)
                    .bias(false),
                Act::Relu,
            )?,
            conv3: ConvNorm::new(&scope.pp("conv3"), ConvGeom::new(width, out_c, 1).bias(false), Act::Identity)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let y = self.conv3.forward(&y, mode)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }

    fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let y = self.conv1.trace(t, x)?;
        let y = self.conv2.trace(t, y)?;
        let y = self.conv3.trace(t, y)?;
        if let Some(d) = &self.downsample {
            d.trace(t, x)?;
        }
        t.elementwise(format!("{}.add", self.name), LayerKind::Elementwise, y)?;
        t.elementwise(format!("{}.relu", self.name), LayerKind::Activation, y)
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Plain(ConvNorm),
    Stem(ConvNorm),
    Residual {
        name: String,
        maxpool: bool,
        blocks: Vec<Bottleneck>,
    },
}

impl Stage {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Stage::Plain(c) | Stage::Stem(c) => c.forward(x, mode),
            Stage::Residual { maxpool, blocks, .. } => {
                let mut y = if *maxpool {
                    // inputs are post-ReLU, so zero padding equals -inf padding
                    x.pad_with_zeros(2, 1, 1)?
                        .pad_with_zeros(3, 1, 1)?
                        .max_pool2d_with_stride(3, 2)?
                } else {
                    x.clone()
                };
                for b in blocks {
                    y = b.forward(&y, mode)?;
                }
                Ok(y)
            }
        }
    }

    fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        match self {
            Stage::Plain(c) | Stage::Stem(c) => c.trace(t, x),
            Stage::Residual {
                name,
                maxpool,
                blocks,
            } => {
                let mut y = x;
                if *maxpool {
                    y = [x[0], x[1], x[2].div_ceil(2), x[3].div_ceil(2)];
                    t.record(format!("{name}.maxpool"), LayerKind::Pool, y, 0, numel(y) * 9)?;
                }
                for b in blocks {
                    y = b.trace(t, y)?;
                }
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Builds the extractor under `scope` (normally `backbone`) and, when the
    /// config names pretrained weights, loads every `backbone.*` key from
    /// that file.
    pub fn build(config: &BackboneConfig, scope: &Scope) -> Result<Self> {
        config.validate()?;
        let stages = match config.variant {
            BackboneVariant::Tiny => {
                let mut in_c = 3;
                let mut stages = Vec::with_capacity(5);
                for (i, &c) in config.stage_channels.iter().enumerate() {
                    let s = scope.pp(format!("stage{}", i + 1)).pp("block0");
                    stages.push(Stage::Plain(ConvNorm::new(
                        &s,
                        ConvGeom::new(in_c, c, 3).stride(2).bias(false),
                        Act::Relu,
                    )?));
                    in_c = c;
                }
                stages
            }
            BackboneVariant::Full => {
                let mut stages = vec![Stage::Stem(ConvNorm::new(
                    &scope.pp("stage1").pp("block0"),
                    ConvGeom::new(3, 64, 7).stride(2).bias(false),
                    Act::Relu,
                )?)];
                let mut in_c = 64;
                for (i, &n) in RESNEXT_BLOCKS.iter().enumerate() {
                    let planes = 64 << i;
                    let stage_scope = scope.pp(format!("stage{}", i + 2));
                    let mut blocks = Vec::with_capacity(n);
                    for j in 0..n {
                        let stride = if j == 0 && i > 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(
                            &stage_scope.pp(format!("block{j}")),
                            in_c,
                            planes,
                            stride,
                        )?);
                        in_c = planes * 4;
                    }
                    stages.push(Stage::Residual {
                        name: stage_scope.prefix().to_string(),
                        maxpool: i == 0,
                        blocks,
                    });
                }
                stages
            }
        };
        if let Some(path) = &config.pretrained_weights_path {
            if !path.exists() {
                return Err(Error::config(format!(
                    "pretrained weights {} do not exist",
                    path.display()
                )));
            }
            scope.store().load_prefix(path, scope.prefix())?;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::input(format!(
                "backbone expects a (B, 3, H, W) image batch, got {dims:?}"
            )));
        }
        let s = self.config.max_stride();
        if dims[2] % s != 0 || dims[3] % s != 0 {
            return Err(Error::input(format!(
                "input spatial size {}x{} must be divisible by {s}",
                dims[2], dims[3]
            )));
        }
        Ok(())
    }

    pub fn extract(&self, images: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        self.check_input(images.dims())?;
        let mut x = images.clone();
        let mut stages = Vec::with_capacity(5);
        for s in &self.stages {
            x = s.forward(&x, mode)?;
            stages.push(x.clone());
        }
        Ok(FeaturePyramid { stages })
    }

    /// Output shapes per stage for an input shape, recording each layer.
    pub fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Vec<Shape4>> {
        self.check_input(&x)?;
        let mut y = x;
        let mut shapes = Vec::with_capacity(5);
        for s in &self.stages {
            y = s.trace(t, y)?;
            shapes.push(y);
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn tiny() -> (ParamStore, Backbone) {
        let store = ParamStore::new(11, DType::F32, &Device::Cpu);
        let bb = Backbone::build(&BackboneConfig::tiny(), &store.root().pp("backbone")).unwrap();
        (store, bb)
    }

    #[test]
    fn tiny_pyramid_shapes() {
        let (_, bb) = tiny();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = bb.extract(&x, Mode::Eval).unwrap();
        let sizes: Vec<usize> = p.stages.iter().map(|s| s.dim(2).unwrap()).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        let chans: Vec<usize> = p.stages.iter().map(|s| s.dim(1).unwrap()).collect();
        assert_eq!(chans, vec![16, 32, 64, 64, 64]);
    }

    #[test]
    fn batch_dim_is_preserved() {
        let (_, bb) = tiny();
        let x = Tensor::rand(0f32, 1.0, (4, 3, 32, 32), &Device::Cpu).unwrap();
        let p = bb.extract(&x, Mode::Eval).unwrap();
        assert!(p.stages.iter().all(|s| s.dim(0).unwrap() == 4));
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let (_, bb) = tiny();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        for s in bb.extract(&x, Mode::Eval).unwrap().stages {
            let v: Vec<f32> = s.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn identical_items_give_identical_features() {
        let (_, bb) = tiny();
        let one = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&one, &one], 0).unwrap();
        for s in bb.extract(&x, Mode::Eval).unwrap().stages {
            let a: Vec<f32> = s.get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = s.get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_non_divisible_input() {
        let (_, bb) = tiny();
        let x = Tensor::zeros((1, 3, 48, 40), DType::F32, &Device::Cpu).unwrap();
        let err = bb.extract(&x, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("divisible by 32"), "{err}");
    }

    #[test]
    fn config_invariants() {
        let mut c = BackboneConfig::tiny();
        c.stage_channels.pop();
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny();
        c.stage_strides = vec![2, 4, 4, 16, 32];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::full();
        c.stage_channels[4] = 1024;
        assert!(c.validate().is_err());
        let c: std::result::Result<BackboneConfig, _> = toml::from_str(
            "variant = \"huge\"\nstage_channels = [1,2,3,4,5]\nstage_strides = [2,4,8,16,32]",
        );
        assert!(c.is_err());
    }

    #[test]
    fn full_trace_stage_sizes_at_352() {
        let store = ParamStore::shape_only(DType::F32);
        let bb = Backbone::build(&BackboneConfig::full(), &store.root().pp("backbone")).unwrap();
        let mut t = Tracer::new();
        let shapes = bb.trace(&mut t, [1, 3, 352, 352]).unwrap();
        assert_eq!(shapes[0], [1, 64, 176, 176]);
        assert_eq!(shapes[4], [1, 2048, 11, 11]);
        // ResNeXt-101 32x4d without the classifier: 42.14M parameters
        let p = store.num_trainable() as f64 / 1e6;
        assert!((p - 42.14).abs() < 0.05, "{p}");
        assert_eq!(t.finish().total_params(), store.num_trainable() as u64);
    }

    #[test]
    fn pretrained_weights_load_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.safetensors");
        let (store, _) = tiny();
        store.save(&path, Default::default()).unwrap();

        let mut cfg = BackboneConfig::tiny();
        cfg.pretrained_weights_path = Some(path.clone());
        let s2 = ParamStore::new(99, DType::F32, &Device::Cpu);
        Backbone::build(&cfg, &s2.root().pp("backbone")).unwrap();
        let a: Vec<f32> = store.trainable_vars()[0].1.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = s2.trainable_vars()[0].1.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);

        cfg.stage_channels = vec![16, 32, 64, 64, 128];
        let s3 = ParamStore::new(99, DType::F32, &Device::Cpu);
        let err = Backbone::build(&cfg, &s3.root().pp("backbone")).unwrap_err().to_string();
        assert!(err.contains("backbone.stage5.block0"), "{err}");
    }
}

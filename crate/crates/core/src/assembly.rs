//! Whole-network assembly: backbone, heterogeneous stage heads, the global
//! extractor, the cross-aggregation fusion tree and the output heads.
//!
//! ```text
//! f1..f5 = head_i(backbone stage i)          f6 = GE(backbone stage 5)
//! f21 = CA(f1, f2)      f22 = CA(f2, f3)      f23 = CA(f4, CA(f5, f6))
//! f31 = CA(f22, f23)    main = up(conv1x1(CA(f21, f31)))
//! aux = conv1x1 on f21, f22, f23, f31         edge = conv1x1 on f21
//! ```
//!
//! Every ablation variant is a [`NetworkConfig`] produced by
//! [`NetworkConfig::variant`].

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::describe::{numel, LayerKind, LayerTable, Shape4, Tracer};
use crate::error::{Error, Result};
use crate::mic::{Mic, MicConfig, RotationStrategy};
use crate::nn::{Act, Conv2d, ConvGeom, ConvNorm, Mode};
use crate::ops::{adaptive_avg_pool, resize_bilinear};
use crate::params::{ParamStore, Scope};
use crate::rsl::{Rsl, RslConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mic,
    Rsl,
    /// A MIC with a single unrotated ICFE.
    IcfeOnly,
    /// Only the 1x1 projection to the fusion width.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionCombine {
    #[default]
    Sum,
    Concat,
}

fn default_reduction() -> usize {
    16
}

fn default_bins() -> Vec<usize> {
    vec![1, 2, 3, 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub head_assignment: Vec<HeadKind>,
    pub use_global_extractor: bool,
    pub fusion_width: usize,
    pub rotation_strategy: RotationStrategy,
    #[serde(default)]
    pub share_icfe_weights: bool,
    #[serde(default = "default_reduction")]
    pub icfe_reduction: usize,
    pub deep_supervision: bool,
    pub edge_supervision: bool,
    #[serde(default)]
    pub fusion_combine: FusionCombine,
    #[serde(default = "default_bins")]
    pub ge_bins: Vec<usize>,
    pub ge_bin_width: usize,
}

/// Architectural variants compared in the ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    HetNet,
    /// RSL at stages 1-3, MIC at stages 4-5.
    ArchBa,
    /// MIC at every stage.
    ArchA,
    /// RSL at every stage.
    ArchB,
    /// Projection-only heads, no global extractor.
    AblationI,
    /// Projection-only heads with the global extractor.
    AblationII,
    /// Single-ICFE heads at stages 1-3.
    AblationIII,
    /// MIC heads at stages 1-3.
    AblationIV,
    /// RSL heads at stages 4-5 only.
    AblationV,
    /// Canonical layout with a different MIC rotation strategy.
    Rotation(RotationStrategy),
}

impl NetworkConfig {
    /// Canonical layout: MIC at stages 1-3, RSL at 4-5, global extractor,
    /// two-orientation MIC, deep and edge supervision.
    pub fn hetnet(backbone: BackboneConfig, fusion_width: usize) -> Self {
        use HeadKind::*;
        Self {
            backbone,
            head_assignment: vec![Mic, Mic, Mic, Rsl, Rsl],
            use_global_extractor: true,
            fusion_width,
            rotation_strategy: RotationStrategy::Mic,
            share_icfe_weights: false,
            icfe_reduction: default_reduction(),
            deep_supervision: true,
            edge_supervision: true,
            fusion_combine: FusionCombine::Sum,
            ge_bins: default_bins(),
            ge_bin_width: fusion_width,
        }
    }

    /// Canonical layout on the ResNeXt-101 backbone, 64-channel fusion.
    pub fn full() -> Self {
        Self::hetnet(BackboneConfig::full(), 64)
    }

    /// Canonical layout on the tiny backbone, 16-channel fusion.
    pub fn tiny() -> Self {
        Self::hetnet(BackboneConfig::tiny(), 16)
    }

    /// This config with its head layout replaced according to `v`.
    pub fn variant(&self, v: Variant) -> Self {
        use HeadKind::*;
        let mut c = self.clone();
        c.rotation_strategy = RotationStrategy::Mic;
        c.use_global_extractor = true;
        c.head_assignment = match v {
            Variant::HetNet => vec![Mic, Mic, Mic, Rsl, Rsl],
            Variant::ArchBa => vec![Rsl, Rsl, Rsl, Mic, Mic],
            Variant::ArchA => vec![Mic; 5],
            Variant::ArchB => vec![Rsl; 5],
            Variant::AblationI => {
                c.use_global_extractor = false;
                vec![Identity; 5]
            }
            Variant::AblationII => vec![Identity; 5],
            Variant::AblationIII => vec![IcfeOnly, IcfeOnly, IcfeOnly, Identity, Identity],
            Variant::AblationIV => vec![Mic, Mic, Mic, Identity, Identity],
            Variant::AblationV => vec![Identity, Identity, Identity, Rsl, Rsl],
            Variant::Rotation(s) => {
                c.rotation_strategy = s;
                vec![Mic, Mic, Mic, Rsl, Rsl]
            }
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_assignment.len() != 5 {
            return Err(Error::config(format!(
                "head_assignment needs 5 entries, got {}",
                self.head_assignment.len()
            )));
        }
        if self.fusion_width == 0 {
            return Err(Error::config("fusion_width must be positive"));
        }
        if self.use_global_extractor && (self.ge_bins.is_empty() || self.ge_bin_width == 0) {
            return Err(Error::config(
                "global extractor needs at least one bin and a positive bin width",
            ));
        }
        if self.ge_bins.contains(&0) {
            return Err(Error::config("global extractor bins must be positive"));
        }
        if self.icfe_reduction == 0 {
            return Err(Error::config("icfe_reduction must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Identity(Conv2d),
    Mic(Mic),
    Rsl(Rsl),
}

impl Head {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Head::Identity(c) => c.forward(x),
            Head::Mic(m) => m.forward(x, mode),
            Head::Rsl(r) => r.forward(x, mode),
        }
    }

    fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        match self {
            Head::Identity(c) => c.trace(t, x),
            Head::Mic(m) => m.trace(t, x),
            Head::Rsl(r) => r.trace(t, x),
        }
    }
}

/// Pyramid-pooling global context over the deepest backbone features.
#[derive(Debug, Clone)]
pub struct GlobalExtractor {
    name: String,
    bins: Vec<usize>,
    bin_convs: Vec<ConvNorm>,
    fuse: ConvNorm,
}

impl GlobalExtractor {
    pub fn new(scope: &Scope, in_channels: usize, bins: &[usize], bin_width: usize, out: usize) -> Result<Self> {
        let bin_convs = bins
            .iter()
            .map(|b| {
                ConvNorm::new(
                    &scope.pp(format!("bin{b}")),
                    ConvGeom::new(in_channels, bin_width, 1),
                    Act::Relu,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvNorm::new(
            &scope.pp("fuse"),
            ConvGeom::new(in_channels + bins.len() * bin_width, out, 3),
            Act::Relu,
        )?;
        Ok(Self {
            name: scope.prefix().to_string(),
            bins: bins.to_vec(),
            bin_convs,
            fuse,
        })
    }

    /// Pooled grid size of a bin; bins larger than the map are clamped to it.
    fn grid(bin: usize, h: usize, w: usize) -> (usize, usize) {
        (bin.min(h), bin.min(w))
    }

    /// The per-bin context maps after their 1x1 conv, before upsampling.
    pub fn bin_features(&self, f5: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = f5.dims4()?;
        self.bins
            .iter()
            .zip(&self.bin_convs)
            .map(|(&b, conv)| {
                let (gh, gw) = Self::grid(b, h, w);
                conv.forward(&adaptive_avg_pool(f5, gh, gw)?, mode)
            })
            .collect()
    }

    pub fn forward(&self, f5: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = f5.dims4()?;
        let mut parts = vec![f5.clone()];
        for b in self.bin_features(f5, mode)? {
            parts.push(resize_bilinear(&b, h, w)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        self.fuse.forward(&cat, mode)
    }

    fn trace(&self, t: &mut Tracer, x: Shape4) -> Result<Shape4> {
        let [b, c, h, w] = x;
        let mut cat_c = c;
        for (&bin, conv) in self.bins.iter().zip(&self.bin_convs) {
            let (gh, gw) = Self::grid(bin, h, w);
            t.record(format!("{}.pool{bin}", self.name), LayerKind::Pool, [b, c, gh, gw], 0, numel(x))?;
            let y = conv.trace(t, [b, c, gh, gw])?;
            t.elementwise(format!("{}.up{bin}", self.name), LayerKind::Resize, [b, y[1], h, w])?;
            cat_c += y[1];
        }
        t.record(format!("{}.concat", self.name), LayerKind::Concat, [b, cat_c, h, w], 0, 0)?;
        self.fuse.trace(t, [b, cat_c, h, w])
    }
}

/// Fusion of a finer (`low`) and a coarser (`high`) feature map by mutual
/// multiplicative gating.
#[derive(Debug, Clone)]
pub struct CrossAggregate {
    name: String,
    width: usize,
    ratio: usize,
    combine: FusionCombine,
    down: ConvNorm,
    merge: ConvNorm,
}

impl CrossAggregate {
    /// `ratio` is the resolution factor between `low` and `high`; it must be
    /// a power of two (1 means equal resolution).
    pub fn new(scope: &Scope, width: usize, ratio: usize, combine: FusionCombine) -> Result<Self> {
        if !ratio.is_power_of_two() {
            return Err(Error::input(format!(
                "cross aggregation resolution ratio {ratio} is not a power of two"
            )));
        }
        let merge_in = match combine {
            FusionCombine::Sum => width,
            FusionCombine::Concat => 2 * width,
        };
        Ok(Self {
            name: scope.prefix().to_string(),
            width,
            ratio,
            combine,
            down: ConvNorm::new(&scope.pp("down"), ConvGeom::new(width, width, 3).stride(ratio), Act::Relu)?,
            merge: ConvNorm::new(&scope.pp("merge"), ConvGeom::new(merge_in, width, 3), Act::Relu)?,
        })
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    fn check(&self, low: Shape4, high: Shape4) -> Result<()> {
        if low[1] != self.width || high[1] != self.width {
            return Err(Error::config(format!(
                "{}: expected {} channels on both inputs, got {} and {}",
                self.name, self.width, low[1], high[1]
            )));
        }
        let ok = |l: usize, h: usize| l % h == 0 && (l / h).is_power_of_two();
        if !ok(low[2], high[2]) || !ok(low[3], high[3]) {
            return Err(Error::input(format!(
                "{}: resolution ratio between {}x{} and {}x{} is not a power of two",
                self.name, low[2], low[3], high[2], high[3]
            )));
        }
        if low[2] / high[2] != self.ratio || low[3] / high[3] != self.ratio {
            return Err(Error::input(format!(
                "{}: built for ratio {}, got {}x{} against {}x{}",
                self.name, self.ratio, low[2], low[3], high[2], high[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, low: &Tensor, high: &Tensor, mode: Mode) -> Result<Tensor> {
        let (lb, lc, lh, lw) = low.dims4()?;
        let (hb, hc, hh, hw) = high.dims4()?;
        self.check([lb, lc, lh, lw], [hb, hc, hh, hw])?;
        let interim_low = (low * resize_bilinear(high, lh, lw)?)?;
        let interim_high = (high * self.down.forward(low, mode)?)?;
        let interim_high = resize_bilinear(&interim_high, lh, lw)?;
        let combined = match self.combine {
            FusionCombine::Sum => (interim_low + interim_high)?,
            FusionCombine::Concat => Tensor::cat(&[&interim_low, &interim_high], 1)?,
        };
        self.merge.forward(&combined, mode)
    }

    fn trace(&self, t: &mut Tracer, low: Shape4, high: Shape4) -> Result<Shape4> {
        self.check(low, high)?;
        let n = &self.name;
        if low != high {
            t.elementwise(format!("{n}.up_high"), LayerKind::Resize, low)?;
        }
        t.elementwise(format!("{n}.gate_low"), LayerKind::Elementwise, low)?;
        let d = self.down.trace(t, low)?;
        t.elementwise(format!("{n}.gate_high"), LayerKind::Elementwise, d)?;
        if low != high {
            t.elementwise(format!("{n}.up_interim"), LayerKind::Resize, low)?;
        }
        let merged_in = match self.combine {
            FusionCombine::Sum => t.elementwise(format!("{n}.sum"), LayerKind::Elementwise, low)?,
            FusionCombine::Concat => t.record(
                format!("{n}.concat"),
                LayerKind::Concat,
                [low[0], 2 * low[1], low[2], low[3]],
                0,
                0,
            )?,
        };
        self.merge.trace(t, merged_in)
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct FusionGraphOutputs {
    /// `f1..f5` after the stage heads.
    pub stage_features: Vec<Tensor>,
    pub f6: Option<Tensor>,
    pub f21: Tensor,
    pub f22: Tensor,
    pub f23: Tensor,
    pub f31: Tensor,
    /// One-channel logits at input resolution.
    pub main: Tensor,
    /// Logits from `f21, f22, f23, f31` at their native resolutions.
    pub aux: Vec<Tensor>,
    /// Edge logits from `f21` at its native resolution.
    pub edge: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    backbone: Backbone,
    heads: Vec<Head>,
    ge: Option<GlobalExtractor>,
    fuse56: Option<CrossAggregate>,
    fuse21: CrossAggregate,
    fuse22: CrossAggregate,
    fuse23: CrossAggregate,
    fuse31: CrossAggregate,
    fuse_out: CrossAggregate,
    predict: Conv2d,
    aux: Vec<Conv2d>,
    edge: Option<Conv2d>,
}

impl Network {
    /// Builds every module, registering parameters in `store`.
    pub fn build(config: &NetworkConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let backbone = Backbone::build(&config.backbone, &root.pp("backbone"))?;
        let width = config.fusion_width;
        let chans = &config.backbone.stage_channels;
        let heads = config
            .head_assignment
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let stage = format!("stage{}", i + 1);
                let mic_cfg = |strategy| MicConfig {
                    in_channels: chans[i],
                    out_channels: width,
                    strategy,
                    share_icfe_weights: config.share_icfe_weights,
                    reduction: config.icfe_reduction,
                };
                Ok(match kind {
                    HeadKind::Identity => Head::Identity(Conv2d::new(
                        &root.pp("proj").pp(&stage),
                        ConvGeom::new(chans[i], width, 1),
                    )?),
                    HeadKind::Mic => Head::Mic(Mic::new(
                        &root.pp("mic").pp(&stage),
                        mic_cfg(config.rotation_strategy),
                    )?),
                    HeadKind::IcfeOnly => Head::Mic(Mic::new(
                        &root.pp("icfe").pp(&stage),
                        mic_cfg(RotationStrategy::Single),
                    )?),
                    HeadKind::Rsl => Head::Rsl(Rsl::new(
                        &root.pp("rsl").pp(&stage),
                        RslConfig::new(chans[i], width),
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let s = &config.backbone.stage_strides;
        let fuse = root.pp("fuse");
        let combine = config.fusion_combine;
        let ca = |name: &str, ratio: usize| CrossAggregate::new(&fuse.pp(name), width, ratio, combine);
        let (ge, fuse56) = if config.use_global_extractor {
            (
                Some(GlobalExtractor::new(
                    &root.pp("ge"),
                    chans[4],
                    &config.ge_bins,
                    config.ge_bin_width,
                    width,
                )?),
                Some(ca("f56", 1)?),
            )
        } else {
            (None, None)
        };
        let out = root.pp("out");
        let aux = if config.deep_supervision {
            (1..=4)
                .map(|i| Conv2d::new(&out.pp(format!("aux{i}")), ConvGeom::new(width, 1, 1)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let edge = if config.edge_supervision {
            Some(Conv2d::new(&out.pp("edge"), ConvGeom::new(width, 1, 1))?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store: store.clone(),
            backbone,
            heads,
            ge,
            fuse56,
            fuse21: ca("f21", s[1] / s[0])?,
            fuse22: ca("f22", s[2] / s[1])?,
            fuse23: ca("f23", s[4] / s[3])?,
            fuse31: ca("f31", s[3] / s[1])?,
            fuse_out: ca("final", s[1] / s[0])?,
            predict: Conv2d::new(&out.pp("main"), ConvGeom::new(width, 1, 1))?,
            aux,
            edge,
        })
    }

    /// Builds with freshly initialized weights in a new store.
    pub fn new(config: &NetworkConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, &ParamStore::new(seed, dtype, &Device::Cpu))
    }

    /// Builds without allocating weights; suitable for [`describe`](Self::describe)
    /// and parameter counting only.
    pub fn shape_only(config: &NetworkConfig) -> Result<Self> {
        let mut config = config.clone();
        config.backbone.pretrained_weights_path = None;
        Self::build(&config, &ParamStore::shape_only(DType::F32))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn predict_head(&self) -> &Conv2d {
        &self.predict
    }

    pub fn cross_aggregators(&self) -> Vec<&CrossAggregate> {
        let mut v = vec![&self.fuse21, &self.fuse22, &self.fuse23, &self.fuse31, &self.fuse_out];
        if let Some(f) = &self.fuse56 {
            v.push(f);
        }
        v
    }

    fn fuse(&self, images: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Option<Tensor>, [Tensor; 5])> {
        let pyramid = self.backbone.extract(images, mode)?;
        let f = self
            .heads
            .iter()
            .zip(&pyramid.stages)
            .map(|(h, x)| h.forward(x, mode))
            .collect::<Result<Vec<_>>>()?;
        let f6 = match &self.ge {
            Some(ge) => Some(ge.forward(&pyramid.stages[4], mode)?),
            None => None,
        };
        let f21 = self.fuse21.forward(&f[0], &f[1], mode)?;
        let f22 = self.fuse22.forward(&f[1], &f[2], mode)?;
        let deep = match (&self.fuse56, &f6) {
            (Some(ca), Some(f6)) => ca.forward(&f[4], f6, mode)?,
            _ => f[4].clone(),
        };
        let f23 = self.fuse23.forward(&f[3], &deep, mode)?;
        let f31 = self.fuse31.forward(&f22, &f23, mode)?;
        let fused = self.fuse_out.forward(&f21, &f31, mode)?;
        Ok((f, f6, [f21, f22, f23, f31, fused]))
    }

    /// Full forward pass including auxiliary and edge heads.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<FusionGraphOutputs> {
        let (_, _, h, w) = images.dims4()?;
        let (stage_features, f6, [f21, f22, f23, f31, fused]) = self.fuse(images, mode)?;
        let main = resize_bilinear(&self.predict.forward(&fused)?, h, w)?;
        let aux = self
            .aux
            .iter()
            .zip([&f21, &f22, &f23, &f31])
            .map(|(head, f)| head.forward(f))
            .collect::<Result<Vec<_>>>()?;
        let edge = match &self.edge {
            Some(e) => Some(e.forward(&f21)?),
            None => None,
        };
        Ok(FusionGraphOutputs {
            stage_features,
            f6,
            f21,
            f22,
            f23,
            f31,
            main,
            aux,
            edge,
        })
    }

    /// Main-output logits only, in evaluation mode.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let (_, _, [.., fused]) = self.fuse(images, Mode::Eval)?;
        resize_bilinear(&self.predict.forward(&fused)?, h, w)
    }

    /// Layer table for a batch-1 input of `input` = (H, W), covering the
    /// inference path (backbone, heads, fusion, main output).
    pub fn describe(&self, input: (usize, usize)) -> Result<LayerTable> {
        let mut t = Tracer::new();
        self.trace_into(&mut t, [1, 3, input.0, input.1], false)?;
        Ok(t.finish())
    }

    /// Layer table including the auxiliary and edge heads.
    pub fn describe_training(&self, input: (usize, usize)) -> Result<LayerTable> {
        let mut t = Tracer::new();
        self.trace_into(&mut t, [1, 3, input.0, input.1], true)?;
        Ok(t.finish())
    }

    fn trace_into(&self, t: &mut Tracer, x: Shape4, training_heads: bool) -> Result<Shape4> {
        let stages = self.backbone.trace(t, x)?;
        let f = self
            .heads
            .iter()
            .zip(&stages)
            .map(|(h, s)| h.trace(t, *s))
            .collect::<Result<Vec<_>>>()?;
        let f6 = match &self.ge {
            Some(ge) => Some(ge.trace(t, stages[4])?),
            None => None,
        };
        let f21 = self.fuse21.trace(t, f[0], f[1])?;
        let f22 = self.fuse22.trace(t, f[1], f[2])?;
        let deep = match (&self.fuse56, f6) {
            (Some(ca), Some(f6)) => ca.trace(t, f[4], f6)?,
            _ => f[4],
        };
        let f23 = self.fuse23.trace(t, f[3], deep)?;
        let f31 = self.fuse31.trace(t, f22, f23)?;
        let fused = self.fuse_out.trace(t, f21, f31)?;
        let logits = self.predict.trace(t, fused)?;
        let out = [logits[0], 1, x[2], x[3]];
        t.elementwise("out.upsample", LayerKind::Resize, out)?;
        if training_heads {
            for (head, s) in self.aux.iter().zip([f21, f22, f23, f31]) {
                head.trace(t, s)?;
            }
            if let Some(e) = &self.edge {
                e.trace(t, f21)?;
            }
        }
        Ok(out)
    }
}

use std::fmt;
use std::str::FromStr;

use super::{CLS, OBJ, STRIDES};
use crate::autodiff::{concat_rows, Graph, ParamId, ParamStore, Var};
use crate::cft::{CftConfig, CftModule, CorrelationMatrix};
use crate::error::{CftError, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Cft,
    TwoStream,
    RgbOnly,
    ThermalOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::RgbOnly, Mode::ThermalOnly, Mode::TwoStream, Mode::Cft];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Cft => "cft",
            Mode::TwoStream => "two_stream",
            Mode::RgbOnly => "rgb_only",
            Mode::ThermalOnly => "thermal_only",
        }
    }

    pub fn uses_rgb(self) -> bool {
        self != Mode::ThermalOnly
    }

    pub fn uses_thermal(self) -> bool {
        self != Mode::RgbOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CftError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                CftError::Config(format!(
                    "unknown mode {s:?} (expected cft, two_stream, rgb_only or thermal_only)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub mode: Mode,
    /// Side of the square training images; sets each stage's pooled grid.
    pub image_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Output channels of the three fused stages; each stage's fusion module
    /// runs at this width.
    pub stage_channels: [usize; 3],
    pub pyramid_channels: usize,
    /// Width of a 3x3 convolution between each pyramid input and its
    /// prediction layer; 0 predicts straight from the pyramid input.
    pub head_hidden: usize,
    /// Heads, blocks, pooled size and MLP ratio of every fusion module.
    /// `channels` is overridden per stage.
    pub cft: CftConfig,
    pub obj_bias_init: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mode: Mode::Cft,
            image_size: 64,
            num_classes: 3,
            stem_channels: 8,
            stage_channels: [16, 16, 16],
            pyramid_channels: 16,
            head_hidden: 16,
            cft: CftConfig {
                channels: 16,
                heads: 2,
                blocks: 1,
                pooled_size: 8,
                mlp_ratio: 2,
                paper_literal_heads: false,
                use_layernorm: false,
            },
            obj_bias_init: -4.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.stem_channels == 0 || self.pyramid_channels == 0 {
            return Err(CftError::Config("class and channel counts must be positive".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(CftError::Config("stage channels must be positive".into()));
        }
        check_extent(self.image_size, self.image_size)?;
        if self.mode == Mode::Cft {
            for (i, &c) in self.stage_channels.iter().enumerate() {
                self.stage_cft(c, self.image_size / STRIDES[i]).validate()?;
            }
        }
        Ok(())
    }

    /// Fusion config for a stage of width `channels` and spatial side `extent`.
    /// The pooled grid never exceeds the feature map.
    fn stage_cft(&self, channels: usize, extent: usize) -> CftConfig {
        CftConfig {
            channels,
            pooled_size: self.cft.pooled_size.min(extent),
            ..self.cft.clone()
        }
    }

    pub fn head_channels(&self) -> usize {
        CLS + self.num_classes
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias_init: f64,
    ) -> Result<Self> {
        let n = c_out * c_in * k * k;
        let weight = store.register(
            format!("{name}.w"),
            Tensor::new(vec![c_out, c_in, k, k], rng.xavier(n, c_in * k * k, c_out * k * k))?,
        )?;
        let bias = store.register(
            format!("{name}.b"),
            Tensor::full(&[c_out], S::from_f64(bias_init)),
        )?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    fn apply<'g, S: Real>(&self, g: &'g Graph<S>, store: &ParamStore<S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        x.conv2d(g.param(store, self.weight), self.stride, self.pad)?
            .add_channel_bias(g.param(store, self.bias))
    }
}

/// Stem plus three stride-2 stages of one modality.
#[derive(Clone, Debug)]
struct Branch {
    stem: Conv,
    stages: [Conv; 3],
}

impl Branch {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, c_in: usize, cfg: &DetectorConfig) -> Result<Self> {
        let stem = Conv::new(store, rng, &format!("{name}.stem"), c_in, cfg.stem_channels, 3, 2, 0.0)?;
        let mut prev = cfg.stem_channels;
        let mut stages = Vec::with_capacity(3);
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            stages.push(Conv::new(store, rng, &format!("{name}.stage{}", i + 1), prev, c, 3, 2, 0.0)?);
            prev = c;
        }
        Ok(Branch {
            stem,
            stages: stages.try_into().expect("three stages"),
        })
    }
}

/// The full detector's parameter handles.
#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    rgb: Option<Branch>,
    thermal: Option<Branch>,
    /// One per stage, in CFT mode only.
    fusion: Vec<CftModule>,
    merge: [Conv; 3],
    head_hidden: Vec<Conv>,
    head: [Conv; 3],
}

/// Features entering and corrections leaving one fusion module.
#[derive(Clone, Debug)]
pub struct StageResidual<S: Real> {
    pub stage: usize,
    pub f_r: Tensor<S>,
    pub delta_r: Tensor<S>,
    pub f_t: Tensor<S>,
    pub delta_t: Tensor<S>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run the fusion modules but add zero in place of their corrections.
    pub zero_deltas: bool,
    pub record_attention: bool,
    pub record_residuals: bool,
}

pub struct ForwardOutput<'g, S: Real> {
    /// Pyramid inputs at strides 4, 8, 16.
    pub pyramid: [Var<'g, S>; 3],
    /// Raw head maps `[(5 + classes) x S x S]`, one per pyramid level.
    pub heads: [Var<'g, S>; 3],
    /// Per stage, one matrix per (block, head); empty unless recorded.
    pub attention: Vec<Vec<CorrelationMatrix<S>>>,
    pub residuals: Vec<StageResidual<S>>,
}

fn concat_channels<'g, S: Real>(a: Var<'g, S>, b: Var<'g, S>) -> Result<Var<'g, S>> {
    concat_rows(&[a, b])
}

impl Detector {
    /// Register all parameters. Backbone, merge and head weights are drawn
    /// from one stream and registered first; each fusion module has its own
    /// stream. Two detectors built from the same seed in `Cft` and
    /// `TwoStream` mode therefore share every non-fusion weight.
    pub fn new<S: Real>(cfg: DetectorConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0);
        let rgb = if cfg.mode.uses_rgb() {
            Some(Branch::new(store, &mut rng, "rgb", 3, &cfg)?)
        } else {
            None
        };
        // the thermal branch always consumes its own stream so that its
        // weights do not depend on whether the RGB branch exists
        let mut trng = Rng::derive(seed, 1);
        let thermal = if cfg.mode.uses_thermal() {
            Some(Branch::new(store, &mut trng, "thermal", 1, &cfg)?)
        } else {
            None
        };
        let per_branch = if cfg.mode.uses_rgb() && cfg.mode.uses_thermal() { 2 } else { 1 };
        let mut hrng = Rng::derive(seed, 2);
        let mut merge = Vec::with_capacity(3);
        let mut head = Vec::with_capacity(3);
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            merge.push(Conv::new(
                store,
                &mut hrng,
                &format!("merge{}", i + 1),
                per_branch * c,
                cfg.pyramid_channels,
                1,
                1,
                0.0,
            )?);
        }
        let mut head_hidden = Vec::new();
        if cfg.head_hidden > 0 {
            for i in 0..3 {
                head_hidden.push(Conv::new(
                    store,
                    &mut hrng,
                    &format!("head{}.hidden", i + 1),
                    cfg.pyramid_channels,
                    cfg.head_hidden,
                    3,
                    1,
                    0.0,
                )?);
            }
        }
        let head_in = if cfg.head_hidden > 0 { cfg.head_hidden } else { cfg.pyramid_channels };
        for i in 0..3 {
            let conv = Conv::new(
                store,
                &mut hrng,
                &format!("head{}", i + 1),
                head_in,
                cfg.head_channels(),
                1,
                1,
                0.0,
            )?;
            let mut bias = store.value(conv.bias).clone();
            bias.data_mut()[OBJ] = S::from_f64(cfg.obj_bias_init);
            store.set_value(conv.bias, bias)?;
            head.push(conv);
        }
        let mut fusion = Vec::new();
        if cfg.mode == Mode::Cft {
            for (i, &c) in cfg.stage_channels.iter().enumerate() {
                let mut frng = Rng::derive(seed, 10 + i as u64);
                let module_cfg = cfg.stage_cft(c, cfg.image_size / STRIDES[i]);
                fusion.push(CftModule::new(module_cfg, store, &format!("cft{}", i + 1), &mut frng)?);
            }
        }
        Ok(Detector {
            cfg,
            rgb,
            thermal,
            fusion,
            merge: merge.try_into().expect("three levels"),
            head_hidden,
            head: head.try_into().expect("three levels"),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn fusion_modules(&self) -> &[CftModule] {
        &self.fusion
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.cfg.image_size / s)
    }

    /// `rgb[3 x H x W]`, `thermal[1 x H x W]` with `H`, `W` divisible by 16.
    pub fn forward<'g, S: Real>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        rgb: Var<'g, S>,
        thermal: Var<'g, S>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'g, S>> {
        let (rs, ts) = (rgb.shape(), thermal.shape());
        if rs.len() != 3 || rs[0] != 3 || ts.len() != 3 || ts[0] != 1 || rs[1..] != ts[1..] {
            return Err(CftError::dim(format!(
                "expected rgb 3xHxW and thermal 1xHxW of equal extent, got {rs:?} and {ts:?}"
            )));
        }
        check_extent(rs[1], rs[2])?;

        let act = |x: Var<'g, S>| x.silu();
        let mut fr = match &self.rgb {
            Some(b) => Some(act(b.stem.apply(g, store, rgb)?)?),
            None => None,
        };
        let mut ft = match &self.thermal {
            Some(b) => Some(act(b.stem.apply(g, store, thermal)?)?),
            None => None,
        };

        let mut attention = Vec::new();
        let mut residuals = Vec::new();
        let mut pyramid = Vec::with_capacity(3);
        let mut heads = Vec::with_capacity(3);
        for i in 0..3 {
            if let (Some(b), Some(x)) = (&self.rgb, fr) {
                fr = Some(act(b.stages[i].apply(g, store, x)?)?);
            }
            if let (Some(b), Some(x)) = (&self.thermal, ft) {
                ft = Some(act(b.stages[i].apply(g, store, x)?)?);
            }
            if let (Some(module), Some(r), Some(t)) = (self.fusion.get(i), fr, ft) {
                let out = module.fuse(g, store, r, t, opts.record_attention)?;
                if opts.record_residuals {
                    residuals.push(StageResidual {
                        stage: i + 1,
                        f_r: (*r.value()).clone(),
                        delta_r: (*out.delta_r.value()).clone(),
                        f_t: (*t.value()).clone(),
                        delta_t: (*out.delta_t.value()).clone(),
                    });
                }
                if let Some(a) = out.attention {
                    attention.push(a);
                }
                if !opts.zero_deltas {
                    fr = Some(r.add(out.delta_r)?);
                    ft = Some(t.add(out.delta_t)?);
                }
            }
            let merged_in = match (fr, ft) {
                (Some(r), Some(t)) => concat_channels(r, t)?,
                (Some(r), None) => r,
                (None, Some(t)) => t,
                (None, None) => unreachable!("every mode has a branch"),
            };
            let p = self.merge[i].apply(g, store, merged_in)?;
            let head_in = match self.head_hidden.get(i) {
                Some(conv) => act(conv.apply(g, store, p)?)?,
                None => p,
            };
            heads.push(self.head[i].apply(g, store, head_in)?);
            pyramid.push(p);
        }
        Ok(ForwardOutput {
            pyramid: pyramid.try_into().expect("three levels"),
            heads: heads.try_into().expect("three levels"),
            attention,
            residuals,
        })
    }
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    let total = STRIDES[2];
    if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
        return Err(CftError::dim(format!(
            "input {h}x{w} must be a positive multiple of {total} on both sides"
        )));
    }
    Ok(())
}

//! Closed-form cost of a fusion transformer block next to what the
//! implementation actually registers and executes.
//!
//! Counting convention: one multiply-accumulate (MAC) is two FLOPs. The
//! closed-form FLOP expression counts MACs, so it is compared against traced
//! MACs, not traced FLOPs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Graph, ParamStore, TraceEntry};
use crate::cft::{CftConfig, CftModule};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{CftError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn positive(t: u64, c: u64) -> Result<()> {
    if t == 0 || c == 0 {
        return Err(CftError::contract("token count and channels must be at least 1"));
    }
    Ok(())
}

/// `4 T C + 8 C^2` for `T` tokens of width `C`.
pub fn analytic_params(t: u64, c: u64) -> Result<u64> {
    positive(t, c)?;
    Ok(4 * t * c + 8 * c * c)
}

/// `12 T C^2 + 2 T^2 C`.
pub fn analytic_flops(t: u64, c: u64) -> Result<u64> {
    positive(t, c)?;
    Ok(12 * t * c * c + 2 * t * t * c)
}

/// Elements of `Q K^T` when attending over both modalities at full
/// resolution: `(2 H W)^2`.
pub fn qkt_elements(h: u64, w: u64) -> u64 {
    let t = 2 * h * w;
    t * t
}

/// Reference figure for the un-pooled attention matrix at 160x160.
pub const QKT_REFERENCE_ELEMENTS: f64 = 2.4e9;

/// MACs and elementwise operations per trace scope.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub by_scope: BTreeMap<String, (u64, u64)>,
}

impl FlopCount {
    pub fn from_trace(trace: &[TraceEntry]) -> Self {
        let mut by_scope: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for e in trace {
            let slot = by_scope.entry(e.scope.to_string()).or_default();
            slot.0 += e.macs;
            slot.1 += e.elementwise;
        }
        FlopCount { by_scope }
    }

    pub fn macs(&self) -> u64 {
        self.by_scope.values().map(|v| v.0).sum()
    }

    pub fn elementwise(&self) -> u64 {
        self.by_scope.values().map(|v| v.1).sum()
    }

    pub fn scope_macs(&self, scope: &str) -> u64 {
        self.by_scope.get(scope).map_or(0, |v| v.0)
    }

    /// `2 * MACs`; elementwise work is reported separately.
    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

/// Element count per parameter id and per top-level group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub by_id: BTreeMap<String, u64>,
    pub by_group: BTreeMap<String, u64>,
}

pub fn count_params<S: crate::Real>(store: &ParamStore<S>) -> ParamCount {
    let mut out = ParamCount::default();
    for (_, p) in store.iter() {
        let n = p.numel() as u64;
        out.total += n;
        out.by_id.insert(p.id().to_string(), n);
        let group = p.id().split('.').next().unwrap_or("").to_string();
        *out.by_group.entry(group).or_default() += n;
    }
    out
}

/// Parameters of one fusion module, itemized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CftParamItems {
    /// Q/K/V, output and MLP weight matrices of each block.
    pub projections_per_block: Vec<u64>,
    pub biases: u64,
    pub norms: u64,
    pub pos_embed: u64,
}

pub fn cft_param_items<S: crate::Real>(module: &CftModule, store: &ParamStore<S>) -> CftParamItems {
    let numel = |pid| store.get(pid).numel() as u64;
    let mut biases = 0;
    let mut norms = 0;
    let projections_per_block = module
        .blocks
        .iter()
        .map(|b| {
            biases += numel(b.fc1_b) + numel(b.fc2_b);
            if let Some(ns) = b.norms {
                norms += ns.iter().map(|&p| numel(p)).sum::<u64>();
            }
            b.projection_weights().into_iter().map(numel).sum()
        })
        .collect();
    CftParamItems {
        projections_per_block,
        biases,
        norms,
        pos_embed: numel(module.pos_embed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub config: CftConfig,
    pub tokens: u64,
    pub analytic_params: u64,
    pub analytic_flops: u64,
    pub items: CftParamItems,
    pub counted_params: u64,
    /// Forward pass of the whole module.
    pub flops: FlopCount,
    pub qkt_full_resolution: u64,
    /// Whole-detector parameter totals per mode, when requested.
    pub detector_params: Vec<(String, u64)>,
}

impl ComplexityReport {
    pub fn per_block_macs(&self, scope: &str) -> u64 {
        self.flops.scope_macs(scope) / self.config.blocks as u64
    }

    /// Q/K/V, output projection and MLP MACs of one block.
    pub fn projection_macs_per_block(&self) -> u64 {
        ["qkv", "out_proj", "mlp"]
            .iter()
            .map(|s| self.per_block_macs(s))
            .sum()
    }

    pub fn attention_core_macs_per_block(&self) -> u64 {
        self.per_block_macs("attn_core")
    }

    pub fn to_text(&self) -> String {
        let cfg = &self.config;
        let (t, c) = (self.tokens, cfg.channels as u64);
        let mut s = String::new();
        let _ = writeln!(s, "[config]");
        let _ = writeln!(s, "channels = {}", cfg.channels);
        let _ = writeln!(s, "heads = {}", cfg.heads);
        let _ = writeln!(s, "blocks = {}", cfg.blocks);
        let _ = writeln!(s, "pooled_size = {}", cfg.pooled_size);
        let _ = writeln!(s, "mlp_ratio = {}", cfg.mlp_ratio);
        let _ = writeln!(s, "tokens = {t}");
        let _ = writeln!(s, "flop_convention = 1 MAC = 2 FLOPs; analytic FLOPs compared as MACs");

        let _ = writeln!(s, "\n[analytic per block]");
        let _ = writeln!(s, "params = {}  (4TC = {}, 8C^2 = {})", self.analytic_params, 4 * t * c, 8 * c * c);
        let _ = writeln!(
            s,
            "flops = {}  (12TC^2 = {}, 2T^2C = {})",
            self.analytic_flops,
            12 * t * c * c,
            2 * t * t * c
        );

        let _ = writeln!(s, "\n[counted parameters]");
        for (b, n) in self.items.projections_per_block.iter().enumerate() {
            let _ = writeln!(s, "block{b}.projections = {n}  (8C^2 = {}, match = {})", 8 * c * c, *n == 8 * c * c);
        }
        let _ = writeln!(s, "biases = {}", self.items.biases);
        let _ = writeln!(s, "norms = {}", self.items.norms);
        let _ = writeln!(s, "pos_embed = {}  (T x C; the 4TC term is {})", self.items.pos_embed, 4 * t * c);
        let _ = writeln!(s, "total = {}", self.counted_params);

        let _ = writeln!(s, "\n[traced forward, per block]");
        for scope in ["norm", "qkv", "attn_core", "out_proj", "mlp"] {
            let _ = writeln!(s, "{scope}.macs = {}", self.per_block_macs(scope));
        }
        let proj = self.projection_macs_per_block();
        let core = self.attention_core_macs_per_block();
        let _ = writeln!(
            s,
            "projection.macs = {proj}  (12TC^2 = {}, ratio = {:.4})",
            12 * t * c * c,
            proj as f64 / (12 * t * c * c) as f64
        );
        let _ = writeln!(
            s,
            "attn_core.macs = {core}  (2T^2C = {}, match = {})",
            2 * t * t * c,
            core == 2 * t * t * c
        );
        let _ = writeln!(s, "attn_core.flops = {}  (= 2 x MACs)", 2 * core);
        let _ = writeln!(s, "\n[traced forward, whole module]");
        for (scope, (m, e)) in &self.flops.by_scope {
            let name = if scope.is_empty() { "(unscoped)" } else { scope };
            let _ = writeln!(s, "{name}: macs = {m}, elementwise = {e}");
        }
        let _ = writeln!(s, "flops = {}", self.flops.flops());
        let _ = writeln!(s, "elementwise = {}", self.flops.elementwise());

        let _ = writeln!(s, "\n[memory]");
        let _ = writeln!(
            s,
            "qkt_elements_160x160 = {}  (reference > {:.1e}: {})",
            self.qkt_full_resolution,
            QKT_REFERENCE_ELEMENTS,
            self.qkt_full_resolution as f64 > QKT_REFERENCE_ELEMENTS
        );
        let _ = writeln!(s, "qkt_elements_pooled = {}", t * t);

        if !self.detector_params.is_empty() {
            let _ = writeln!(s, "\n[detector parameters]");
            for (mode, n) in &self.detector_params {
                let _ = writeln!(s, "{mode} = {n}");
            }
        }
        let _ = writeln!(s, "\n[notes]");
        let _ = writeln!(
            s,
            "projection MACs equal 12TC^2 only at mlp_ratio 4; at ratio r they are (4 + 2r)TC^2"
        );
        let _ = writeln!(s, "attention core traced FLOPs are 4T^2C, twice the 2T^2C MAC expression");
        s
    }
}

/// Build one fusion module from `cfg`, run a forward pass on a random
/// `P x P` input and collect counts.
pub fn complexity_report(cfg: &CftConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(0);
    let module = CftModule::new(cfg.clone(), &mut store, "cft", &mut rng)?;
    let p = cfg.pooled_size;
    let c = cfg.channels;
    let g = Graph::<f64>::new();
    let fr = g.constant(Tensor::from_fn(&[c, p, p], |_| rng.uniform_range(-1.0, 1.0)));
    let ft = g.constant(Tensor::from_fn(&[c, p, p], |_| rng.uniform_range(-1.0, 1.0)));
    module.fuse(&g, &store, fr, ft, false)?;
    let t = cfg.sequence_len() as u64;
    let items = cft_param_items(&module, &store);
    Ok(ComplexityReport {
        config: cfg.clone(),
        tokens: t,
        analytic_params: analytic_params(t, c as u64)?,
        analytic_flops: analytic_flops(t, c as u64)?,
        items,
        counted_params: count_params(&store).total,
        flops: FlopCount::from_trace(&g.trace()),
        qkt_full_resolution: qkt_elements(160, 160),
        detector_params: Vec::new(),
    })
}

/// Total parameters of a detector built from `cfg`.
pub fn detector_param_count(cfg: &DetectorConfig) -> Result<u64> {
    let mut store = ParamStore::<f32>::new();
    Detector::new(cfg.clone(), &mut store, 0)?;
    Ok(count_params(&store).total)
}

use super::config::CftConfig;
use super::correlation::CorrelationMatrix;
use crate::autodiff::{concat_cols, concat_rows, Graph, ParamId, ParamStore, Var};
use crate::error::{CftError, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Parameter handles of one attention + MLP block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Per-head `C x C` projections; only with `paper_literal_heads`.
    pub head_q: Vec<ParamId>,
    pub head_k: Vec<ParamId>,
    pub head_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub norms: Option<[ParamId; 4]>,
}

impl BlockParams {
    /// The Q/K/V, output and MLP weight matrices (no biases, no norms).
    pub fn projection_weights(&self) -> Vec<ParamId> {
        let mut out = vec![self.w_q, self.w_k, self.w_v];
        out.extend(&self.head_q);
        out.extend(&self.head_k);
        out.extend(&self.head_v);
        out.extend([self.w_o, self.fc1_w, self.fc2_w]);
        out
    }
}

/// One fusion transformer: a positional embedding plus `blocks` stacked
/// attention/MLP blocks operating on `2 P^2` tokens of width `C`.
#[derive(Clone, Debug)]
pub struct CftModule {
    cfg: CftConfig,
    prefix: String,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Per-modality corrections produced by [`CftModule::fuse`].
#[derive(Debug)]
pub struct CftOutput<'g, S: Real> {
    pub delta_r: Var<'g, S>,
    pub delta_t: Var<'g, S>,
    /// One matrix per (block, head) when requested.
    pub attention: Option<Vec<CorrelationMatrix<S>>>,
}

fn register<S: Real>(
    store: &mut ParamStore<S>,
    id: String,
    shape: &[usize],
    data: Vec<S>,
) -> Result<ParamId> {
    store.register(id, Tensor::new(shape.to_vec(), data)?)
}

impl CftModule {
    /// Register all parameters under `prefix`.
    ///
    /// Q/K/V and the first MLP layer get Glorot-uniform weights. Every block's
    /// output projection and second MLP layer start at zero, so each block is
    /// an identity map on the residual stream and the module's correction is
    /// exactly zero until training moves them.
    pub fn new<S: Real>(
        cfg: CftConfig,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let t = cfg.sequence_len();
        let hidden = cfg.hidden();
        let pos = (0..t * c)
            .map(|_| S::from_f64(rng.uniform_range(-0.02, 0.02)))
            .collect();
        let pos_embed = register(store, format!("{prefix}.pos_embed"), &[t, c], pos)?;

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("{prefix}.block{b}");
            let sq = |store: &mut ParamStore<S>, name: &str, rng: &mut Rng| {
                register(store, format!("{p}.{name}"), &[c, c], rng.xavier(c * c, c, c))
            };
            let w_q = sq(store, "w_q", rng)?;
            let w_k = sq(store, "w_k", rng)?;
            let w_v = sq(store, "w_v", rng)?;
            let (mut head_q, mut head_k, mut head_v) = (Vec::new(), Vec::new(), Vec::new());
            if cfg.paper_literal_heads {
                for h in 0..cfg.heads {
                    head_q.push(sq(store, &format!("head{h}.w_q"), rng)?);
                    head_k.push(sq(store, &format!("head{h}.w_k"), rng)?);
                    head_v.push(sq(store, &format!("head{h}.w_v"), rng)?);
                }
            }
            let concat_width = cfg.heads * cfg.head_dim();
            let w_o = register(
                store,
                format!("{p}.w_o"),
                &[concat_width, c],
                vec![S::ZERO; concat_width * c],
            )?;
            let fc1_w = register(
                store,
                format!("{p}.fc1.w"),
                &[c, hidden],
                rng.xavier(c * hidden, c, hidden),
            )?;
            let fc1_b = register(store, format!("{p}.fc1.b"), &[hidden], vec![S::ZERO; hidden])?;
            let fc2_w = register(
                store,
                format!("{p}.fc2.w"),
                &[hidden, c],
                vec![S::ZERO; hidden * c],
            )?;
            let fc2_b = register(store, format!("{p}.fc2.b"), &[c], vec![S::ZERO; c])?;
            let norms = if cfg.use_layernorm {
                Some([
                    register(store, format!("{p}.ln1.g"), &[c], vec![S::ONE; c])?,
                    register(store, format!("{p}.ln1.b"), &[c], vec![S::ZERO; c])?,
                    register(store, format!("{p}.ln2.g"), &[c], vec![S::ONE; c])?,
                    register(store, format!("{p}.ln2.b"), &[c], vec![S::ZERO; c])?,
                ])
            } else {
                None
            };
            blocks.push(BlockParams {
                w_q,
                w_k,
                w_v,
                head_q,
                head_k,
                head_v,
                w_o,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                norms,
            });
        }
        Ok(CftModule {
            cfg,
            prefix: prefix.to_string(),
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &CftConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Pool both modalities, attend jointly over their tokens and return the
    /// upsampled corrections for each branch.
    ///
    /// The correction is the change the block stack makes to its residual
    /// stream, `O - I`, split back into the RGB rows `[0, P^2)` and thermal
    /// rows `[P^2, 2P^2)`.
    pub fn fuse<'g, S: Real>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        f_r: Var<'g, S>,
        f_t: Var<'g, S>,
        record_attention: bool,
    ) -> Result<CftOutput<'g, S>> {
        let shape = f_r.shape();
        if shape != f_t.shape() {
            return Err(CftError::dim(format!(
                "modality feature maps differ: {:?} vs {:?}",
                shape,
                f_t.shape()
            )));
        }
        let [c, h, w] = shape[..] else {
            return Err(CftError::dim(format!("expected C x H x W, got {shape:?}")));
        };
        if c != self.cfg.channels {
            return Err(CftError::dim(format!(
                "module built for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let p = self.cfg.pooled_size;
        let tokens = g.scoped("tokenize", || -> Result<_> {
            let tr = tokenize(f_r.adaptive_avg_pool(p)?)?;
            let tt = tokenize(f_t.adaptive_avg_pool(p)?)?;
            let seq = concat_rows(&[tr, tt])?;
            seq.add(g.param(store, self.pos_embed))
        })?;

        let mut x = tokens;
        let mut attention = record_attention.then(Vec::new);
        for (bi, block) in self.blocks.iter().enumerate() {
            let (out, alphas) = attention_block(g, store, &self.cfg, block, x, record_attention)?;
            x = out;
            if let Some(all) = attention.as_mut() {
                for (hi, alpha) in alphas.into_iter().enumerate() {
                    all.push(CorrelationMatrix::new(bi, hi, alpha)?);
                }
            }
        }

        let pp = p * p;
        let (delta_r, delta_t) = g.scoped("detokenize", || -> Result<_> {
            let change = x.sub(tokens)?;
            let dr = detokenize(change.slice_rows(0, pp)?, p, p)?.bilinear_upsample(h, w)?;
            let dt = detokenize(change.slice_rows(pp, 2 * pp)?, p, p)?.bilinear_upsample(h, w)?;
            Ok((dr, dt))
        })?;
        Ok(CftOutput {
            delta_r,
            delta_t,
            attention,
        })
    }
}

/// `F[C x H x W]` to `[H*W x C]`: row `y*W + x` is the channel vector at `(y, x)`.
pub fn tokenize<S: Real>(f: Var<'_, S>) -> Result<Var<'_, S>> {
    let shape = f.shape();
    let [c, h, w] = shape[..] else {
        return Err(CftError::dim(format!("tokenize expects C x H x W, got {shape:?}")));
    };
    f.reshape(&[c, h * w])?.transpose()
}

/// Inverse of [`tokenize`].
pub fn detokenize<S: Real>(tokens: Var<'_, S>, h: usize, w: usize) -> Result<Var<'_, S>> {
    let shape = tokens.shape();
    let [n, c] = shape[..] else {
        return Err(CftError::dim(format!("detokenize expects tokens x C, got {shape:?}")));
    };
    if n != h * w {
        return Err(CftError::dim(format!("{n} tokens cannot fill a {h}x{w} grid")));
    }
    tokens.transpose()?.reshape(&[c, h, w])
}

/// One block: `Z'' = MultiHead(I) + I`, `O = FC2(GELU(FC1(Z''))) + Z''`.
///
/// Returns the block output and, when `record` is set, every head's attention
/// weights `softmax(Q K^T / sqrt(d))`.
pub fn attention_block<'g, S: Real>(
    g: &'g Graph<S>,
    store: &ParamStore<S>,
    cfg: &CftConfig,
    block: &BlockParams,
    input: Var<'g, S>,
    record: bool,
) -> Result<(Var<'g, S>, Vec<Tensor<S>>)> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(CftError::dim(format!(
            "attention block expects tokens x {}, got {shape:?}",
            cfg.channels
        )));
    }
    cfg.validate()?;
    let p = |id| g.param(store, id);

    let attn_in = match block.norms {
        Some([g1, b1, _, _]) => g.scoped("norm", || input.layer_norm(p(g1), p(b1), LN_EPS))?,
        None => input,
    };
    let (q, k, v) = g.scoped("qkv", || -> Result<_> {
        Ok((
            attn_in.matmul(p(block.w_q))?,
            attn_in.matmul(p(block.w_k))?,
            attn_in.matmul(p(block.w_v))?,
        ))
    })?;

    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut alphas = Vec::new();
    for h in 0..cfg.heads {
        let (qh, kh, vh) = g.scoped("qkv", || -> Result<_> {
            if cfg.paper_literal_heads {
                Ok((
                    q.matmul(p(block.head_q[h]))?,
                    k.matmul(p(block.head_k[h]))?,
                    v.matmul(p(block.head_v[h]))?,
                ))
            } else {
                let (lo, hi) = (h * d, (h + 1) * d);
                Ok((q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?))
            }
        })?;
        let z = g.scoped("attn_core", || -> Result<_> {
            let alpha = qh.matmul_nt(kh)?.scale(scale)?.softmax(1)?;
            if record {
                alphas.push((*alpha.value()).clone());
            }
            alpha.matmul(vh)
        })?;
        heads.push(z);
    }
    let attended = g.scoped("out_proj", || -> Result<_> {
        let cat = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
        cat.matmul(p(block.w_o))
    })?;
    let z2 = attended.add(input)?;

    let mlp_in = match block.norms {
        Some([_, _, g2, b2]) => g.scoped("norm", || z2.layer_norm(p(g2), p(b2), LN_EPS))?,
        None => z2,
    };
    let out = g.scoped("mlp", || -> Result<_> {
        mlp_in
            .matmul(p(block.fc1_w))?
            .add_row_bias(p(block.fc1_b))?
            .gelu()?
            .matmul(p(block.fc2_w))?
            .add_row_bias(p(block.fc2_b))
    })?;
    Ok((out.add(z2)?, alphas))
}

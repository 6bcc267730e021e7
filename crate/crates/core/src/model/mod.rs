//! Predictor transformer, projectors, latent target tokens and sequence
//! packing.

mod checkpoint;
mod params;
pub mod positional;
mod projector;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};
pub use projector::{Projector, ProjectorKind};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attnmask::{AttentionMask, TokenRole};
use crate::masking::{MaskSpec, PatchGrid};
use crate::numerics::{Graph, Tensor, Var, LAYERNORM_EPS};
use crate::rng::{rng_for, Rng, Stream};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

pub(crate) fn init_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Layer whose output feeds the target projector: the first quarter of the stack.
pub fn tap_layer_default(layers: usize) -> usize {
    layers.div_ceil(4).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// 1-based block index; `None` means [`tap_layer_default`].
    pub tap_layer: Option<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 4,
            heads: 4,
            vocab: 64,
            max_seq: 128,
            tap_layer: None,
        }
    }
}

impl PredictorConfig {
    pub fn tap(&self) -> usize {
        self.tap_layer.unwrap_or_else(|| tap_layer_default(self.layers))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::Config("predictor needs at least one layer".into()));
        }
        let j = self.tap();
        if j == 0 || j > self.layers {
            return Err(Error::Config(format!("tap layer {j} outside [1, {}]", self.layers)));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub predictor: PredictorConfig,
    pub proj: ProjectorKind,
    pub proj_tgt: ProjectorKind,
    /// Width of the context encoder output.
    pub ctx_dim: usize,
    /// Width of the target encoder output.
    pub tgt_dim: usize,
    pub grid: PatchGrid,
    /// Instantiate the target projector and latent token.
    pub jepa: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            proj: ProjectorKind::Mlp,
            proj_tgt: ProjectorKind::Mlp,
            ctx_dim: 32,
            tgt_dim: 32,
            grid: PatchGrid { rows: 6, cols: 6 },
            jepa: true,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Decoder-style transformer with a custom attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    cfg: PredictorConfig,
    tok_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

fn affine(g: &mut Graph, bound: &Bound, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let h = g.matmul(x, bound.var(w))?;
    Ok(g.add_row(h, bound.var(b))?)
}

fn norm(g: &mut Graph, bound: &Bound, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
    Ok(g.layernorm(x, bound.var(gain), bound.var(bias), LAYERNORM_EPS)?)
}

impl Predictor {
    fn init(store: &mut ParamStore, cfg: &PredictorConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let grp = ParamGroup::Predictor;
        let tok_emb = store.add("predictor.tok_emb", grp, init_normal(&[cfg.vocab, d], rng));
        let mut lin = |store: &mut ParamStore, name: String, a: usize, b: usize| {
            let w = store.add(format!("{name}.weight"), grp, init_normal(&[a, b], rng));
            let bias = store.add(format!("{name}.bias"), grp, Tensor::zeros(&[b]));
            (w, bias)
        };
        let ln = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gain"), grp, Tensor::full(&[d], 1.0)),
                store.add(format!("{name}.bias"), grp, Tensor::zeros(&[d])),
            )
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("predictor.block{l}");
            blocks.push(Block {
                ln1: ln(store, format!("{p}.ln1")),
                q: lin(store, format!("{p}.attn.q"), d, d),
                k: lin(store, format!("{p}.attn.k"), d, d),
                v: lin(store, format!("{p}.attn.v"), d, d),
                o: lin(store, format!("{p}.attn.o"), d, d),
                ln2: ln(store, format!("{p}.ln2")),
                fc1: lin(store, format!("{p}.mlp.fc1"), d, 4 * d),
                fc2: lin(store, format!("{p}.mlp.fc2"), 4 * d, d),
            });
        }
        let ln_f = ln(store, "predictor.ln_f".into());
        let head = (
            store.add("predictor.head.weight", grp, Tensor::zeros(&[d, cfg.vocab])),
            store.add("predictor.head.bias", grp, Tensor::zeros(&[cfg.vocab])),
        );
        Self {
            cfg: cfg.clone(),
            tok_emb,
            blocks,
            ln_f,
            head,
        }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn tok_emb(&self) -> ParamId {
        self.tok_emb
    }

    /// One pre-norm block: masked multi-head attention then a GELU MLP,
    /// each wrapped in a residual connection.
    pub fn block(&self, g: &mut Graph, bound: &Bound, layer: usize, x: Var, mask: &AttentionMask) -> Result<Var> {
        let b = &self.blocks[layer];
        let (d, heads) = (self.cfg.d, self.cfg.heads);
        let dh = d / heads;
        let h = norm(g, bound, x, b.ln1)?;
        let q = affine(g, bound, h, b.q)?;
        let k = affine(g, bound, h, b.k)?;
        let v = affine(g, bound, h, b.v)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let p = g.softmax_masked(scores, mask)?;
            outs.push(g.matmul(p, vh)?);
        }
        let attn = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn = affine(g, bound, attn, b.o)?;
        let x = g.add(x, attn)?;

        let h = norm(g, bound, x, b.ln2)?;
        let h = affine(g, bound, h, b.fc1)?;
        let h = g.gelu(h)?;
        let h = affine(g, bound, h, b.fc2)?;
        Ok(g.add(x, h)?)
    }

    /// Runs the stack; `hidden[l]` is the output of block `l + 1`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, seq: &PackedSequence, mask: &AttentionMask) -> Result<ForwardOutput> {
        let s = seq.len();
        let max_pos = seq.positions.iter().copied().max().unwrap_or(0);
        if s > self.cfg.max_seq || max_pos >= self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: s.max(max_pos + 1),
                max: self.cfg.max_seq,
            });
        }
        if mask.size() != s {
            return Err(Error::Config(format!("mask is {0}×{0}, sequence has {s} tokens", mask.size())));
        }
        let pos = positional::sequence_table(self.cfg.max_seq, self.cfg.d).select_rows(&seq.positions);
        let pos = g.constant(pos)?;
        let mut x = g.add(seq.tokens, pos)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            x = self.block(g, bound, l, x, mask)?;
            hidden.push(x);
        }
        let h = norm(g, bound, x, self.ln_f)?;
        let logits = affine(g, bound, h, self.head)?;
        Ok(ForwardOutput {
            logits,
            tap: hidden[self.cfg.tap() - 1],
            hidden,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[S × V]` next-token logits at every position.
    pub logits: Var,
    /// `[S × d]` output of the tapped block.
    pub tap: Var,
    pub hidden: Vec<Var>,
}

/// Shared learnable vector plus a fixed 2-D positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTarget {
    pub z: ParamId,
    pub phi: Tensor,
}

/// Token embeddings laid out as `[visual tokens in raster order, caption]`.
#[derive(Debug, Clone)]
pub struct PackedSequence {
    pub tokens: Var,
    pub roles: Vec<TokenRole>,
    pub positions: Vec<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Sequence index of the first caption token.
    pub fn text_start(&self) -> usize {
        self.roles.iter().position(|r| !r.is_visual()).unwrap_or(self.roles.len())
    }

    /// Sequence indices holding target tokens, ascending (raster order).
    pub fn target_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_target())
            .map(|(i, _)| i)
            .collect()
    }

    /// Patch indices of the target tokens, in sequence order.
    pub fn target_patches(&self) -> Vec<usize> {
        self.roles
            .iter()
            .filter(|r| r.is_target())
            .filter_map(TokenRole::patch)
            .collect()
    }
}

/// Visual tokens sit at their patch index and caption token `t` at `n + t`,
/// so dropping patches never shifts the caption.
fn slot_positions(roles: &[TokenRole], n: usize) -> Vec<usize> {
    roles
        .iter()
        .map(|r| match r {
            TokenRole::Context { patch } | TokenRole::Target { patch, .. } => *patch,
            TokenRole::Text { position } => n + position,
        })
        .collect()
}

/// All trainable and frozen parts on the language side.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    predictor: Predictor,
    proj: Projector,
    proj_tgt: Option<Projector>,
    latent: Option<LatentTarget>,
}

impl Model {
    /// Fresh initialisation; each component draws from its own seeded stream
    /// so adding or removing the optional parts leaves the others unchanged.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.predictor.validate()?;
        if cfg.ctx_dim == 0 || cfg.tgt_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let mut store = ParamStore::default();
        let d = cfg.predictor.d;
        let predictor = Predictor::init(&mut store, &cfg.predictor, &mut rng_for(cfg.init_seed, Stream::Init, 0));
        let proj = Projector::init(
            &mut store,
            "proj",
            ParamGroup::Proj,
            cfg.proj,
            cfg.ctx_dim,
            d,
            &mut rng_for(cfg.init_seed, Stream::Init, 1),
        );
        let (proj_tgt, latent) = if cfg.jepa {
            let pt = Projector::init(
                &mut store,
                "proj_tgt",
                ParamGroup::ProjTgt,
                cfg.proj_tgt,
                d,
                cfg.tgt_dim,
                &mut rng_for(cfg.init_seed, Stream::Init, 2),
            );
            let z = store.add(
                "latent.z",
                ParamGroup::Latent,
                init_normal(&[d], &mut rng_for(cfg.init_seed, Stream::Init, 3)),
            );
            let phi = positional::patch_table(cfg.grid, d);
            (Some(pt), Some(LatentTarget { z, phi }))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            store,
            predictor,
            proj,
            proj_tgt,
            latent,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn proj(&self) -> &Projector {
        &self.proj
    }

    pub fn proj_tgt(&self) -> Option<&Projector> {
        self.proj_tgt.as_ref()
    }

    pub fn latent(&self) -> Option<&LatentTarget> {
        self.latent.as_ref()
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Result<Bound> {
        self.store.bind(g, trainable)
    }

    /// Copies every parameter of `group` from `other` by name.
    pub fn load_group(&mut self, other: &ParamStore, group: ParamGroup) -> Result<()> {
        for p in self.store.iter_mut().filter(|p| p.group == group) {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() || src.group != group {
                return Err(Error::CheckpointMismatch(format!("parameter {} differs in shape", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    fn caption_embeddings(&self, g: &mut Graph, bound: &Bound, caption: &[usize]) -> Result<Var> {
        let v = self.cfg.predictor.vocab;
        if let Some(&bad) = caption.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(g.gather_rows(bound.var(self.predictor.tok_emb), caption)?)
    }

    /// Packs visual tokens and the caption. With `mask = None` every patch
    /// is context (the unmasked path); otherwise context patches go
    /// through `proj`, target patches become `z + φ(i)`, and patches in
    /// neither set are dropped.
    pub fn pack(
        &self,
        g: &mut Graph,
        bound: &Bound,
        mask: Option<&MaskSpec>,
        ctx_emb: &Tensor,
        caption: &[usize],
    ) -> Result<PackedSequence> {
        let grid = self.cfg.grid;
        if ctx_emb.rows() != grid.n() || ctx_emb.cols() != self.cfg.ctx_dim {
            return Err(Error::Config(format!(
                "context embeddings {:?}, expected [{}, {}]",
                ctx_emb.shape(),
                grid.n(),
                self.cfg.ctx_dim
            )));
        }
        let mut roles = Vec::with_capacity(grid.n() + caption.len());
        let mut ctx_rows = Vec::new();
        let mut tgt_rows = Vec::new();
        match mask {
            None => {
                for i in 0..grid.n() {
                    roles.push(TokenRole::Context { patch: i });
                    ctx_rows.push(i);
                }
            }
            Some(m) => {
                if m.grid != grid {
                    return Err(Error::Config("mask grid differs from model grid".into()));
                }
                if m.context.is_empty() {
                    return Err(Error::EmptyContext);
                }
                for i in 0..grid.n() {
                    if m.context.binary_search(&i).is_ok() {
                        roles.push(TokenRole::Context { patch: i });
                        ctx_rows.push(i);
                    } else if m.target_union.binary_search(&i).is_ok() {
                        roles.push(TokenRole::Target {
                            patch: i,
                            blocks: m.membership(i),
                        });
                        tgt_rows.push(i);
                    }
                }
            }
        }

        let mut parts = Vec::with_capacity(3);
        if !ctx_rows.is_empty() {
            let c = g.constant(ctx_emb.select_rows(&ctx_rows))?;
            parts.push(self.proj.apply(g, bound, c)?);
        }
        if !tgt_rows.is_empty() {
            let lat = self
                .latent
                .as_ref()
                .ok_or_else(|| Error::Config("model was built without latent target tokens".into()))?;
            let phi = g.constant(lat.phi.select_rows(&tgt_rows))?;
            parts.push(g.add_row(phi, bound.var(lat.z))?);
        }
        if !caption.is_empty() {
            parts.push(self.caption_embeddings(g, bound, caption)?);
        }
        roles.extend((0..caption.len()).map(|position| TokenRole::Text { position }));

        let cat = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let tokens = if tgt_rows.is_empty() {
            cat
        } else {
            // Context rows come first in `cat`; interleave back into raster order.
            let (mut ci, mut ti) = (0, ctx_rows.len());
            let mut order = Vec::with_capacity(roles.len());
            for r in &roles {
                match r {
                    TokenRole::Context { .. } => {
                        order.push(ci);
                        ci += 1;
                    }
                    TokenRole::Target { .. } => {
                        order.push(ti);
                        ti += 1;
                    }
                    TokenRole::Text { position } => order.push(ctx_rows.len() + tgt_rows.len() + position),
                }
            }
            g.gather_rows(cat, &order)?
        };
        let positions = slot_positions(&roles, grid.n());
        Ok(PackedSequence {
            tokens,
            roles,
            positions,
        })
    }

    /// Sequence whose visual slots hold one vocabulary word per patch
    /// instead of projected embeddings; used to pretrain the predictor on
    /// text that describes an image layout. `keep` lists the patches to
    /// include (ascending); `None` keeps all of them.
    pub fn pack_words(&self, g: &mut Graph, bound: &Bound, words: &[usize], keep: Option<&[usize]>, caption: &[usize]) -> Result<PackedSequence> {
        let n = self.cfg.grid.n();
        if words.len() != n {
            return Err(Error::Config(format!("{} patch words for {n} patches", words.len())));
        }
        let patches: Vec<usize> = match keep {
            Some(k) => k.to_vec(),
            None => (0..n).collect(),
        };
        if patches.iter().any(|&p| p >= n) || patches.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("kept patches must be ascending and inside the grid".into()));
        }
        let all: Vec<usize> = patches.iter().map(|&p| words[p]).chain(caption.iter().copied()).collect();
        let tokens = self.caption_embeddings(g, bound, &all)?;
        let roles = patches
            .iter()
            .map(|&patch| TokenRole::Context { patch })
            .chain((0..caption.len()).map(|position| TokenRole::Text { position }))
            .collect::<Vec<_>>();
        Ok(PackedSequence {
            tokens,
            positions: slot_positions(&roles, n),
            roles,
        })
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, seq: &PackedSequence, mask: &AttentionMask) -> Result<ForwardOutput> {
        self.predictor.forward(g, bound, seq, mask)
    }

    /// Applies the target projector to the tapped activations at `positions`.
    pub fn project_tap(&self, g: &mut Graph, bound: &Bound, tap: Var, seq: &PackedSequence, positions: &[usize]) -> Result<Var> {
        if let Some(&bad) = positions.iter().find(|&&p| !seq.roles.get(p).is_some_and(TokenRole::is_target)) {
            return Err(Error::NotTarget(bad));
        }
        let pt = self
            .proj_tgt
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a target projector".into()))?;
        let rows = g.gather_rows(tap, positions)?;
        pt.apply(g, bound, rows)
    }
}

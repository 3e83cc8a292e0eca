//! Scene-conditioned correction of person embeddings.
//!
//! A small convolutional extractor turns the scene map into a noise map, which
//! is pooled to 7×7 and flattened into 49 position-encoded tokens. Each person
//! embedding then attends to the tokens of its own scene through a one-block
//! decoder and the result is added back to the embedding as an offset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bmn::string_enum;
use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::primitives::{BatchNormState, Conv2d, CrossAttention, FeedForward, LayerNorm, Linear};
use crate::tensor::Tensor;

pub const TOKEN_GRID: usize = 7;
pub const TOKEN_COUNT: usize = TOKEN_GRID * TOKEN_GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FmnMode {
    Off,
    Linear,
    CrossAttention,
}
string_enum!(FmnMode { Off => "off", Linear => "linear", CrossAttention => "cross-attention" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmnConfig {
    pub mode: FmnMode,
    /// Channels of the first two extractor layers; the last one emits the embedding dim.
    pub extractor_channels: [usize; 2],
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for FmnConfig {
    fn default() -> Self {
        FmnConfig {
            mode: FmnMode::CrossAttention,
            extractor_channels: [512, 256],
            heads: 8,
            ffn_hidden: 2048,
        }
    }
}

/// Three conv → ReLU → batch-norm layers, stride 1, padding 1.
#[derive(Clone, Debug)]
pub struct NoiseExtractor {
    pub layers: Vec<(Conv2d, BatchNormState)>,
}

impl NoiseExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, channels: [usize; 2], out_ch: usize, rng: &mut R) -> Self {
        let plan = [in_ch, channels[0], channels[1], out_ch];
        let layers = plan
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let conv = Conv2d::new(store, &format!("{name}.conv{i}"), w[0], w[1], 3, 1, 1, true, rng);
                let bn = BatchNormState::new(store, &format!("{name}.bn{i}"), w[1]);
                (conv, bn)
            })
            .collect();
        NoiseExtractor { layers }
    }

    pub fn channel_plan(&self, store: &ParamStore) -> Vec<usize> {
        let mut plan = vec![store.get(self.layers[0].0.weight).shape()[1]];
        plan.extend(self.layers.iter().map(|(c, _)| store.get(c.weight).shape()[0]));
        plan
    }

    pub fn forward(&self, g: &mut Graph, scene: Var) -> Result<Var> {
        let mut x = scene;
        for (conv, bn) in &self.layers {
            let y = conv.forward(g, x)?;
            let y = g.relu(y);
            x = bn.forward(g, y)?;
        }
        Ok(x)
    }
}

/// Pool to 7×7, flatten, add a learned position table, layer-normalize.
#[derive(Clone, Copy, Debug)]
pub struct NoiseTokenizer {
    pub position: ParamId,
    pub ln: LayerNorm,
}

impl NoiseTokenizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        NoiseTokenizer {
            position: store.trainable(format!("{name}.position"), Tensor::randn(&[TOKEN_COUNT, dim], 0.02, rng)),
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
        }
    }

    /// `noise: [s, d, h, w] -> [s, 49, d]`.
    pub fn forward(&self, g: &mut Graph, noise: Var) -> Result<Var> {
        let pooled = g.adaptive_max_pool(noise, TOKEN_GRID, TOKEN_GRID)?;
        let tokens = g.spatial_tokens(pooled)?;
        let pos = g.param(self.position);
        let tokens = g.add_broadcast(tokens, pos)?;
        self.ln.forward(g, tokens)
    }
}

/// Embeddings grouped by scene and zero-padded to a common group size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedBatch {
    pub scenes: usize,
    pub group: usize,
    /// Slot `s * group + k` holds original row `slots[..]`, or padding.
    pub slots: Vec<Option<usize>>,
    /// Slot of each original row.
    pub positions: Vec<usize>,
}

impl AlignedBatch {
    /// Layout for rows tagged with `scene_ids`, each below `scenes`.
    pub fn new(scene_ids: &[usize], scenes: usize) -> Result<Self> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); scenes];
        for (i, &s) in scene_ids.iter().enumerate() {
            groups.get_mut(s).ok_or(ReidError::UnknownScene(s))?.push(i);
        }
        let group = groups.iter().map(Vec::len).max().unwrap_or(0);
        let mut slots = vec![None; scenes * group];
        let mut positions = vec![0; scene_ids.len()];
        for (s, members) in groups.iter().enumerate() {
            for (k, &i) in members.iter().enumerate() {
                slots[s * group + k] = Some(i);
                positions[i] = s * group + k;
            }
        }
        Ok(AlignedBatch {
            scenes,
            group,
            slots,
            positions,
        })
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn padding(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// `x: [n, d] -> [scenes, group, d]`.
    pub fn align(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = self.check_rows(g.shape(x), self.positions.len())?;
        let flat = g.gather_rows(x, &self.slots)?;
        g.reshape(flat, &[self.scenes, self.group, d])
    }

    /// `y: [scenes, group, d] -> [n, d]` in original order, padding dropped.
    pub fn de_align(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[0] != self.scenes || s[1] != self.group {
            return Err(ReidError::shape("emb_de_align", format!("aligned shape {s:?}")));
        }
        let flat = g.reshape(y, &[self.scenes * self.group, s[2]])?;
        let idx: Vec<Option<usize>> = self.positions.iter().map(|&p| Some(p)).collect();
        g.gather_rows(flat, &idx)
    }

    pub fn align_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let v = g.constant(x.clone());
        let y = self.align(&mut g, v)?;
        Ok(g.value(y).clone())
    }

    pub fn de_align_tensor(&self, y: &Tensor) -> Result<Tensor> {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let v = g.constant(y.clone());
        let x = self.de_align(&mut g, v)?;
        Ok(g.value(x).clone())
    }

    fn check_rows(&self, shape: &[usize], n: usize) -> Result<usize> {
        match shape {
            [rows, d] if *rows == n => Ok(*d),
            _ => Err(ReidError::shape("emb_align", format!("expected [{n}, d], got {shape:?}"))),
        }
    }
}

/// One decoder block: feed-forward with residual, cross-attention without
/// residual, batch norm, feed-forward with residual.
#[derive(Clone, Copy, Debug)]
pub struct Denoiser {
    pub ffn_in: FeedForward,
    pub ln_in: LayerNorm,
    pub attn: CrossAttention,
    pub bn: BatchNormState,
    pub ffn_out: FeedForward,
    pub ln_out: LayerNorm,
}

/// Intermediate activations of one denoiser pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserTrace {
    pub attended: Var,
    pub offsets: Var,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: &FmnConfig, rng: &mut R) -> Result<Self> {
        Ok(Denoiser {
            ffn_in: FeedForward::new(store, &format!("{name}.ffn_in"), dim, cfg.ffn_hidden, rng),
            ln_in: LayerNorm::new(store, &format!("{name}.ln_in"), dim),
            attn: CrossAttention::new(store, &format!("{name}.attn"), dim, cfg.heads, rng)?,
            bn: BatchNormState::new(store, &format!("{name}.bn"), dim),
            ffn_out: FeedForward::new(store, &format!("{name}.ffn_out"), dim, cfg.ffn_hidden, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
        })
    }

    /// `queries: [s, g, d]` with `tokens: [s, 49, d]`; offsets shaped like the queries.
    pub fn trace(&self, g: &mut Graph, queries: Var, tokens: Var, mask: &[bool]) -> Result<DenoiserTrace> {
        let shape = g.shape(queries).to_vec();
        let [s, k, d] = shape[..] else {
            return Err(ReidError::shape("denoiser", format!("rank-3 queries, got {shape:?}")));
        };
        let flat = g.reshape(queries, &[s * k, d])?;
        let f = self.ffn_in.forward(g, flat)?;
        let h = g.add(flat, f)?;
        let h = self.ln_in.forward(g, h)?;
        let h = g.reshape(h, &[s, k, d])?;
        let attended = self.attn.forward(g, h, tokens)?;
        let a = g.reshape(attended, &[s * k, d])?;
        let a = g.batch_norm(a, &self.bn, Some(mask))?;
        let f = self.ffn_out.forward(g, a)?;
        let o = g.add(a, f)?;
        let o = self.ln_out.forward(g, o)?;
        let offsets = g.reshape(o, &[s, k, d])?;
        Ok(DenoiserTrace { attended, offsets })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, tokens: Var, mask: &[bool]) -> Result<Var> {
        Ok(self.trace(g, queries, tokens, mask)?.offsets)
    }
}

#[derive(Clone, Debug)]
pub enum OffsetHead {
    /// Global max pool of the noise map, then a linear map: one offset per scene.
    Linear(Linear),
    CrossAttention {
        tokenizer: NoiseTokenizer,
        denoiser: Denoiser,
    },
}

#[derive(Clone, Debug)]
pub struct Fmn {
    pub extractor: NoiseExtractor,
    pub head: OffsetHead,
    pub dim: usize,
}

impl Fmn {
    /// `None` when the mode is `off`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        dim: usize,
        cfg: &FmnConfig,
        rng: &mut R,
    ) -> Result<Option<Self>> {
        if cfg.mode == FmnMode::Off {
            return Ok(None);
        }
        let extractor = NoiseExtractor::new(store, &format!("{name}.extractor"), in_ch, cfg.extractor_channels, dim, rng);
        let head = match cfg.mode {
            FmnMode::Linear => OffsetHead::Linear(Linear::new(store, &format!("{name}.linear"), dim, dim, true, rng)),
            _ => OffsetHead::CrossAttention {
                tokenizer: NoiseTokenizer::new(store, &format!("{name}.tokens"), dim, rng),
                denoiser: Denoiser::new(store, &format!("{name}.denoiser"), dim, cfg, rng)?,
            },
        };
        Ok(Some(Fmn { extractor, head, dim }))
    }

    /// Zeroes the last affine map of the offset head so offsets start at zero.
    pub fn zero_output(&self, store: &mut ParamStore) -> Result<()> {
        let ids = match &self.head {
            OffsetHead::Linear(lin) => vec![Some(lin.weight), lin.bias],
            OffsetHead::CrossAttention { denoiser, .. } => vec![Some(denoiser.ln_out.gamma), Some(denoiser.ln_out.beta)],
        };
        for id in ids.into_iter().flatten() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    /// One offset row per embedding row: `scene_maps: [s, c, h, w]`, `emb: [n, d]`.
    pub fn offsets(&self, g: &mut Graph, scene_maps: Var, emb: Var, scene_ids: &[usize]) -> Result<Var> {
        let scenes = g.shape(scene_maps)[0];
        let noise = self.extractor.forward(g, scene_maps)?;
        match &self.head {
            OffsetHead::Linear(lin) => {
                if let Some(&s) = scene_ids.iter().find(|&&s| s >= scenes) {
                    return Err(ReidError::UnknownScene(s));
                }
                let pooled = g.global_max_pool(noise)?;
                let per_scene = lin.forward(g, pooled)?;
                let idx: Vec<Option<usize>> = scene_ids.iter().map(|&s| Some(s)).collect();
                g.gather_rows(per_scene, &idx)
            }
            OffsetHead::CrossAttention { tokenizer, denoiser } => {
                let layout = AlignedBatch::new(scene_ids, scenes)?;
                let tokens = tokenizer.forward(g, noise)?;
                let q = layout.align(g, emb)?;
                let o = denoiser.forward(g, q, tokens, &layout.mask())?;
                layout.de_align(g, o)
            }
        }
    }
}

/// Adds the offset to the embedding.
pub fn fmn_apply(g: &mut Graph, emb: Var, offset: Var) -> Result<Var> {
    g.add(emb, offset)
}

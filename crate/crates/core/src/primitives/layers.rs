//! Parameterized building blocks composed from graph operations.

use rand::Rng;

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::primitives::norm::BatchNormState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.trainable(
            format!("{name}.weight"),
            fan_in_uniform(&[out_dim, in_dim], in_dim, 1.0, rng),
        );
        let bias = bias.then(|| {
            store.trainable(
                format!("{name}.bias"),
                fan_in_uniform(&[out_dim], in_dim, 1.0, rng),
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    /// Applies the map to the last axis of a rank-3 `[a, b, in]` input.
    pub fn forward_rows3(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let [a, b, d] = s[..] else {
            return Err(ReidError::shape("linear", format!("rank-3 input, got {s:?}")));
        };
        let flat = g.reshape(x, &[a * b, d])?;
        let y = self.forward(g, flat)?;
        g.reshape(y, &[a, b, self.out_dim])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.trainable(
            format!("{name}.weight"),
            fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, 3f64.sqrt(), rng),
        );
        let bias = bias.then(|| {
            store.trainable(
                format!("{name}.bias"),
                fan_in_uniform(&[out_ch], fan_in, 1.0, rng),
            )
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl BatchNormState {
    /// Unit scale, zero shift, running mean 0 and variance 1.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormState {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.batch_norm(x, self, None)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.trainable(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

/// Two-layer position-wise MLP with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Channel attention followed by spatial attention, each a sigmoid gate.
#[derive(Clone, Copy, Debug)]
pub struct Cbam {
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub spatial: Conv2d,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl Cbam {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Cbam {
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), channels, hidden, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), hidden, channels, true, rng),
            spatial: Conv2d::new(
                store,
                &format!("{name}.spatial"),
                2,
                1,
                CBAM_SPATIAL_KERNEL,
                1,
                CBAM_SPATIAL_KERNEL / 2,
                true,
                rng,
            ),
        }
    }

    fn shared_mlp(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.mlp_in.forward(g, x)?;
        let h = g.relu(h);
        self.mlp_out.forward(g, h)
    }

    /// Gate `x: [n, c, h, w]`; output has the same shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.global_avg_pool(x)?;
        let max = g.global_max_pool(x)?;
        let a = self.shared_mlp(g, avg)?;
        let m = self.shared_mlp(g, max)?;
        let logits = g.add(a, m)?;
        let channel_gate = g.sigmoid(logits);
        let x = g.mul_channel_gate(x, channel_gate)?;

        let mean = g.channel_mean(x)?;
        let maxc = g.channel_max(x)?;
        let desc = g.concat(&[mean, maxc], 1)?;
        let s = self.spatial.forward(g, desc)?;
        let spatial_gate = g.sigmoid(s);
        g.mul_spatial_gate(x, spatial_gate)
    }
}

/// Drops whole rows of `x: [n, d]` with probability `p` in training mode and
/// rescales survivors by `1/(1-p)`. Identity in evaluation mode.
pub fn drop_path<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(ReidError::InvalidArgument(format!(
            "drop-path probability {p} must lie in [0, 1)"
        )));
    }
    if !g.is_training() || p == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let [n, d] = shape[..] else {
        return Err(ReidError::shape("drop_path", format!("rank-2 input, got {shape:?}")));
    };
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let v = if rng.gen::<f64>() < p { 0.0 } else { keep };
        mask.row_mut(r).iter_mut().for_each(|m| *m = v);
    }
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Multi-head cross-attention with query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ReidError::InvalidArgument(format!(
                "embedding dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(CrossAttention {
            q_proj: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k_proj: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v_proj: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out_proj: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        })
    }

    /// `queries: [s, g, d]` attend to `tokens: [s, t, d]`; returns `[s, g, d]`.
    pub fn forward(&self, g: &mut Graph, queries: Var, tokens: Var) -> Result<Var> {
        let q = self.q_proj.forward_rows3(g, queries)?;
        let k = self.k_proj.forward_rows3(g, tokens)?;
        let v = self.v_proj.forward_rows3(g, tokens)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out_proj.forward_rows3(g, a)
    }

    /// Attention weights `[s, heads, g, t]` for inspection.
    pub fn weights(&self, store: &ParamStore, queries: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let qv = g.constant(queries.clone());
        let tv = g.constant(tokens.clone());
        let q = self.q_proj.forward_rows3(&mut g, qv)?;
        let k = self.k_proj.forward_rows3(&mut g, tv)?;
        crate::primitives::attention::attention_weights(g.value(q), g.value(k), self.heads)
    }
}

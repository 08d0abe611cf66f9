//! Transformer building blocks expressed over [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Sinusoidal table used to initialize learned position embeddings.
pub(crate) fn sinusoid_table(rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |(pos, i)| {
        let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / cols as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dense layer `y = x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.w"), normal_matrix(rng, fan_in, fan_out, std)),
            bias: store.add(format!("{name}.b"), Matrix::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Matrix::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same var twice).
#[derive(Clone, Debug)]
pub struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    n_heads: usize,
    d_model: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must be divisible by n_heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    /// `mask` is added to the raw scores (`0` to keep, `-inf` to block).
    pub fn forward(&self, g: &mut Graph, x_query: Var, x_memory: Var, mask: Option<&Matrix>) -> Var {
        let q = self.query.forward(g, x_query);
        let k = self.key.forward(g, x_memory);
        let v = self.value.forward(g, x_memory);
        let head_dim = self.d_model / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add_const(scores, m);
            }
            let weights = g.softmax(scores);
            heads.push(g.matmul(weights, vh));
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.output.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model),
            attn: Attention::new(store, &format!("{name}.attn"), d_model, n_heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Var {
        let h = self.attn_norm.forward(g, x);
        let h = self.attn.forward(g, h, h, None);
        let h = g.dropout(h, dropout);
        let x = g.add(x, h);
        let h = self.ff_norm.forward(g, x);
        let h = self.ff.forward(g, h);
        let h = g.dropout(h, dropout);
        g.add(x, h)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d_model),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d_model, n_heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d_model),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d_model, n_heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: &Matrix, dropout: f64) -> Var {
        let h = self.self_norm.forward(g, x);
        let h = self.self_attn.forward(g, h, h, Some(causal));
        let h = g.dropout(h, dropout);
        let x = g.add(x, h);
        let h = self.cross_norm.forward(g, x);
        let h = self.cross_attn.forward(g, h, memory, None);
        let h = g.dropout(h, dropout);
        let x = g.add(x, h);
        let h = self.ff_norm.forward(g, x);
        let h = self.ff.forward(g, h);
        let h = g.dropout(h, dropout);
        g.add(x, h)
    }
}

/// Strictly causal additive mask: position `i` sees `0..=i`.
pub fn causal_mask(n: usize) -> Matrix {
    Matrix::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { f64::NEG_INFINITY })
}

//! Small parameterized building blocks shared by the segmentation, set and patch models.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
                gain: 1.0,
            },
            rng,
        );
        let b = bias.then(|| store.register(format!("{name}.bias"), &[d_out], Init::Zeros, rng));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), &[d], Init::Ones, rng),
            beta: store.register(format!("{name}.beta"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm_rows(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention without any positional terms.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        kv_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, kv_bias, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, kv_bias, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// `query: [nq, d]`, `key`/`value: [nk, d]`; masked keys get zero weight.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, key)?;
        let v = self.v.forward(g, store, value)?;
        let dh = self.dim / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_t(qh, false, kh, true)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows_masked(s, key_mask.clone());
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, store, h)
    }
}

/// Post-norm self-attention encoder layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        key_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x, x, key_mask)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// 2-D convolution over `[c, h, w]` maps with replicate padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = store.register(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Xavier {
                fan_in,
                fan_out: c_out * kernel * kernel,
                gain: 2f64.sqrt(),
            },
            rng,
        );
        let b = store.register(format!("{name}.bias"), &[c_out], Init::Zeros, rng);
        Self {
            w,
            b,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.kernel, self.stride)
    }
}

//! Parameterised layers built on the tape.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::numerics::{normal, xavier_uniform, Graph, ParamId, ParamStore, RngState, Tensor, Var};

/// Weight initialisation context: the store being filled plus its RNG.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut RngState,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let t = xavier_uniform(fan_in, fan_out, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    /// Zero-mean normal entries with standard deviation `std`.
    pub fn embedding(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal(shape, std, self.rng);
        self.store.add(name, t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        let w = init.weight(&format!("{name}.w"), input, output);
        let b = init.zeros(&format!("{name}.b"), &[output]);
        Self { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        let gamma = init.ones(&format!("{name}.gamma"), &[width]);
        let beta = init.zeros(&format!("{name}.beta"), &[width]);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), width, width),
            k: Linear::new(init, &format!("{name}.k"), width, width),
            v: Linear::new(init, &format!("{name}.v"), width, width),
            o: Linear::new(init, &format!("{name}.o"), width, width),
            heads,
        }
    }

    /// Queries from `xq` attend over keys/values from `xkv`. Key rows marked
    /// invalid receive zero weight.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, key_valid: &[bool]) -> Result<Var> {
        let width = self.q.output;
        if width % self.heads != 0 {
            return Err(shape_err("attention", format!("width {width} not divisible by {} heads", self.heads)));
        }
        let dh = width / self.heads;
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s, Some(key_valid))?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, cat)
    }
}

/// Position-wise feed-forward: `Linear -> GELU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), width, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Shape hyper-parameters shared by every transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl SelfBlock {
    pub fn new(init: &mut Init, name: &str, d: BlockDims) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d.width),
            attn: Attention::new(init, &format!("{name}.attn"), d.width, d.heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d.width),
            ff: FeedForward::new(init, &format!("{name}.ff"), d.width, d.hidden),
            dropout: d.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, valid)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        let f = g.dropout(f, self.dropout);
        g.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend over a fixed context.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl CrossBlock {
    pub fn new(init: &mut Init, name: &str, d: BlockDims) -> Self {
        Self {
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), d.width),
            norm_kv: LayerNorm::new(init, &format!("{name}.norm_kv"), d.width),
            attn: Attention::new(init, &format!("{name}.attn"), d.width, d.heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d.width),
            ff: FeedForward::new(init, &format!("{name}.ff"), d.width, d.hidden),
            dropout: d.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, q: Var, context: Var, context_valid: &[bool]) -> Result<Var> {
        let hq = self.norm_q.forward(g, q)?;
        let hk = self.norm_kv.forward(g, context)?;
        let a = self.attn.forward(g, hq, hk, context_valid)?;
        let a = g.dropout(a, self.dropout);
        let q = g.add(q, a)?;
        let h = self.norm2.forward(g, q)?;
        let f = self.ff.forward(g, h)?;
        let f = g.dropout(f, self.dropout);
        g.add(q, f)
    }
}

/// A stack of self-attention blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<SelfBlock>,
    pub norm: LayerNorm,
}

impl Stack {
    pub fn new(init: &mut Init, name: &str, depth: usize, d: BlockDims) -> Self {
        let blocks = (0..depth).map(|i| SelfBlock::new(init, &format!("{name}.layers.{i}"), d)).collect();
        Self { blocks, norm: LayerNorm::new(init, &format!("{name}.norm"), d.width) }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, valid: &[bool]) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, valid)?;
        }
        self.norm.forward(g, x)
    }
}

/// Every parameter id registered under `prefix`.
pub fn params_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}

//! Standard pre-normalization transformer blocks on the autodiff graph.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Learnable tensors of one transformer block. Attention projections are
/// D×D, the feedforward expands to 4D.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl BlockParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * dim;
        let attn_std = (2.0 / (dim + dim) as f64).sqrt();
        let ff1_std = (2.0 / (dim + hidden) as f64).sqrt();
        BlockParams {
            wq: Tensor::randn(vec![dim, dim], attn_std, rng),
            wk: Tensor::randn(vec![dim, dim], attn_std, rng),
            wv: Tensor::randn(vec![dim, dim], attn_std, rng),
            wo: Tensor::randn(vec![dim, dim], attn_std, rng),
            bo: Tensor::zeros(vec![dim]),
            ff1_w: Tensor::randn(vec![dim, hidden], ff1_std, rng),
            ff1_b: Tensor::zeros(vec![hidden]),
            ff2_w: Tensor::randn(vec![hidden, dim], ff1_std, rng),
            ff2_b: Tensor::zeros(vec![dim]),
            norm1_gain: Tensor::new(vec![dim], vec![1.0; dim]),
            norm1_bias: Tensor::zeros(vec![dim]),
            norm2_gain: Tensor::new(vec![dim], vec![1.0; dim]),
            norm2_bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
        f(format!("{prefix}.ff1.weight"), &self.ff1_w);
        f(format!("{prefix}.ff1.bias"), &self.ff1_b);
        f(format!("{prefix}.ff2.weight"), &self.ff2_w);
        f(format!("{prefix}.ff2.bias"), &self.ff2_b);
        f(format!("{prefix}.norm1.gain"), &self.norm1_gain);
        f(format!("{prefix}.norm1.bias"), &self.norm1_bias);
        f(format!("{prefix}.norm2.gain"), &self.norm2_gain);
        f(format!("{prefix}.norm2.bias"), &self.norm2_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.bo"), &mut self.bo);
        f(format!("{prefix}.ff1.weight"), &mut self.ff1_w);
        f(format!("{prefix}.ff1.bias"), &mut self.ff1_b);
        f(format!("{prefix}.ff2.weight"), &mut self.ff2_w);
        f(format!("{prefix}.ff2.bias"), &mut self.ff2_b);
        f(format!("{prefix}.norm1.gain"), &mut self.norm1_gain);
        f(format!("{prefix}.norm1.bias"), &mut self.norm1_bias);
        f(format!("{prefix}.norm2.gain"), &mut self.norm2_gain);
        f(format!("{prefix}.norm2.bias"), &mut self.norm2_bias);
    }
}

/// Graph handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl BlockParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BlockVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
            ff1_w: leaf(&self.ff1_w),
            ff1_b: leaf(&self.ff1_b),
            ff2_w: leaf(&self.ff2_w),
            ff2_b: leaf(&self.ff2_b),
            norm1_gain: leaf(&self.norm1_gain),
            norm1_bias: leaf(&self.norm1_bias),
            norm2_gain: leaf(&self.norm2_gain),
            norm2_bias: leaf(&self.norm2_bias),
        }
    }
}

impl BlockVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.bo,
            self.ff1_w,
            self.ff1_b,
            self.ff2_w,
            self.ff2_b,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }
}

/// Scaled dot-product self-attention. Heads are column slices of the Q/K/V
/// projections; logits are scaled by 1/sqrt(head_dim), so a single head is
/// exactly softmax(Q K^T / sqrt(D)) V.
pub fn attention_core(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var, heads: usize) -> Var {
    let dim = g.value(x).cols();
    assert!(
        heads >= 1 && dim % heads == 0,
        "invalid argument: dim {dim} not divisible by heads {heads}"
    );
    let head_dim = dim / heads;
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = g.slice_cols(q, h * head_dim, head_dim);
        let ks = g.slice_cols(k, h * head_dim, head_dim);
        let vs = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(ks);
        let scores = g.matmul(qs, kt);
        let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        outs.push(g.matmul(attn, vs));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// One pre-norm block: x + Proj(Attn(LN(x))), then x + FF(LN(x)).
pub fn attention_block(g: &mut Graph, x: Var, p: &BlockVars, heads: usize) -> Var {
    let normed = g.layer_norm_rows(x, LAYER_NORM_EPS);
    let normed = g.mul_row(normed, p.norm1_gain);
    let normed = g.add_row(normed, p.norm1_bias);
    let attn = attention_core(g, normed, p.wq, p.wk, p.wv, heads);
    let proj = g.matmul(attn, p.wo);
    let proj = g.add_row(proj, p.bo);
    let x = g.add(x, proj);

    let normed = g.layer_norm_rows(x, LAYER_NORM_EPS);
    let normed = g.mul_row(normed, p.norm2_gain);
    let normed = g.add_row(normed, p.norm2_bias);
    let h = g.matmul(normed, p.ff1_w);
    let h = g.add_row(h, p.ff1_b);
    let h = g.silu(h);
    let h = g.matmul(h, p.ff2_w);
    let h = g.add_row(h, p.ff2_b);
    g.add(x, h)
}

/// Stack of blocks; used for both the encoder (n blocks) and decoder
/// (m blocks).
pub fn stack_forward(g: &mut Graph, x: Var, blocks: &[BlockVars], heads: usize) -> Var {
    let mut t = x;
    for b in blocks {
        t = attention_block(g, t, b, heads);
    }
    t
}

/// Parameters of a whole encoder or decoder stack.
#[derive(Clone, Debug)]
pub struct StackParams {
    pub blocks: Vec<BlockParams>,
}

impl StackParams {
    pub fn init(n_blocks: usize, dim: usize, rng: &mut impl Rng) -> Self {
        StackParams {
            blocks: (0..n_blocks).map(|_| BlockParams::init(dim, rng)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BlockVars> {
        self.blocks.iter().map(|b| b.bind(g, trainable)).collect()
    }
}

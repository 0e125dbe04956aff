//! Layers shared by both networks: dense, rank-1 conditioned dense, graph
//! attention and 1-D transposed convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::graphs::Adjacency;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Which parameters a forward pass records as trainable.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    All,
    Nothing,
    Only(Vec<ParamId>),
}

impl Trainable {
    fn includes(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(ids) => ids.contains(&id),
        }
    }
}

/// One forward pass: a tape plus the parameters it reads.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    trainable: Trainable,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self { tape: Tape::new(), store, trainable }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if self.trainable.includes(id) {
            self.tape.param(self.store, id)
        } else {
            self.tape.frozen(self.store, id)
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.glorot(format!("{name}.w"), &[out_dim, in_dim], in_dim, out_dim, rng);
        let b = store.zeros(format!("{name}.b"), &[out_dim]);
        Self { w, b, in_dim, out_dim }
    }

    /// `x Wᵀ + b` for `x` of shape `[n, in]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, AutodiffError> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.linear(x, w)?;
        ctx.tape.add(y, b)
    }
}

/// Dense layer whose weight receives a rank-1 update `s·u vᵀ`, with `u` and
/// `v` produced from a conditioning vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraDense {
    pub base: Dense,
    pub u: Dense,
    pub v: Dense,
    pub scale: f64,
}

impl LoraDense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            base: Dense::new(store, name, in_dim, out_dim, rng),
            u: Dense::new(store, &format!("{name}.lora_u"), cond_dim, out_dim, rng),
            v: Dense::new(store, &format!("{name}.lora_v"), cond_dim, in_dim, rng),
            scale: 1.0 / (in_dim as f64).sqrt(),
        }
    }

    /// `(W + s·u vᵀ) x + b` for a single row `x: [1, in]`; without `cond`
    /// the layer is the plain dense map.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<Var, AutodiffError> {
        let y = self.base.forward(ctx, x)?;
        let Some(c) = cond else { return Ok(y) };
        let u = self.u.forward(ctx, c)?;
        let v = self.v.forward(ctx, c)?;
        let vt = ctx.tape.transpose(v)?;
        let xv = ctx.tape.matmul(x, vt)?;
        let r = ctx.tape.mul(u, xv)?;
        let r = ctx.tape.scale(r, self.scale)?;
        ctx.tape.add(y, r)
    }
}

/// Constant tensors describing one graph for attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors {
    /// `ln w` on edges, `−∞` elsewhere.
    pub bias: Tensor,
    pub self_mask: Tensor,
    pub other_mask: Tensor,
}

impl GraphTensors {
    pub fn new(adj: &Adjacency) -> Self {
        let n = adj.node_count();
        let self_mask = Tensor::eye(n);
        let other = self_mask.data().iter().map(|v| 1.0 - v).collect();
        Self { bias: adj.log_weight_bias(), self_mask, other_mask: Tensor::new(vec![n, n], other).expect("square") }
    }

    pub fn node_count(&self) -> usize {
        self.self_mask.shape()[0]
    }
}

pub struct GraphVars {
    pub bias: Var,
    pub self_mask: Var,
    pub other_mask: Var,
}

impl GraphVars {
    pub fn bind(ctx: &mut Ctx, g: &GraphTensors) -> Self {
        Self {
            bias: ctx.constant(g.bias.clone()),
            self_mask: ctx.constant(g.self_mask.clone()),
            other_mask: ctx.constant(g.other_mask.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatDims {
    pub heads: usize,
    pub d_in: usize,
    pub d_head: usize,
}

impl GatDims {
    pub fn out_dim(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Multi-head graph attention with separate self and neighbor transforms.
/// Head `n` projections occupy rows `n·D_h..(n+1)·D_h` of `w` / `w_self`;
/// its attention vectors are row `n` of `a` / `a_self`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatLayer {
    pub dims: GatDims,
    pub w: ParamId,
    pub w_self: ParamId,
    pub a: ParamId,
    pub a_self: ParamId,
}

impl GatLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: GatDims, rng: &mut R) -> Self {
        let GatDims { heads, d_in, d_head } = dims;
        let w = store.glorot(format!("{name}.w"), &[heads * d_head, d_in], d_in, d_head, rng);
        let w_self = store.glorot(format!("{name}.w_self"), &[heads * d_head, d_in], d_in, d_head, rng);
        let a = store.glorot(format!("{name}.a"), &[heads, d_head], d_head, 1, rng);
        let a_self = store.glorot(format!("{name}.a_self"), &[heads, d_head], d_head, 1, rng);
        Self { dims, w, w_self, a, a_self }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, g: &GraphVars) -> Result<Var, AutodiffError> {
        Ok(self.forward_with_attention(ctx, x, g)?.0)
    }

    /// Output `[n, heads·D_h]` and the per-head attention matrices.
    pub fn forward_with_attention(
        &self,
        ctx: &mut Ctx,
        x: Var,
        g: &GraphVars,
    ) -> Result<(Var, Vec<Var>), AutodiffError> {
        let bias = ctx.tape.value(g.bias);
        for i in 0..bias.shape()[0] {
            if bias.row(i).iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gat",
                    detail: format!("node {i} has no incoming edge"),
                });
            }
        }
        let dh = self.dims.d_head;
        let (w, ws, a, a_s) = (ctx.p(self.w), ctx.p(self.w_self), ctx.p(self.a), ctx.p(self.a_self));
        let t = &mut ctx.tape;
        let y = t.linear(x, w)?;
        let ys = t.linear(x, ws)?;
        let mut heads = Vec::with_capacity(self.dims.heads);
        let mut alphas = Vec::with_capacity(self.dims.heads);
        for h in 0..self.dims.heads {
            let yh = t.slice(y, 1, h * dh, (h + 1) * dh)?;
            let ysh = t.slice(ys, 1, h * dh, (h + 1) * dh)?;
            let ah = t.slice(a, 0, h, h + 1)?;
            let ash = t.slice(a_s, 0, h, h + 1)?;
            let src = t.linear(ysh, ash)?;
            let dst = t.linear(ah, yh)?;
            let e = t.add(src, dst)?;
            let e = t.leaky_relu(e, LEAKY_SLOPE)?;
            let e = t.add(e, g.bias)?;
            let alpha = t.softmax(e, 1)?;
            let a_other = t.mul(alpha, g.other_mask)?;
            let a_self = t.mul(alpha, g.self_mask)?;
            let m_other = t.matmul(a_other, yh)?;
            let m_self = t.matmul(a_self, ysh)?;
            let o = t.add(m_other, m_self)?;
            heads.push(t.elu(o)?);
            alphas.push(alpha);
        }
        let out = if heads.len() == 1 { heads[0] } else { t.concat(&heads, 1)? };
        Ok((out, alphas))
    }
}

/// Transposed 1-D convolution with per-channel bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Deconv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.glorot(format!("{name}.w"), &[c_in, c_out, kernel], c_in * kernel, c_out * kernel, rng);
        let b = store.zeros(format!("{name}.b"), &[c_out, 1]);
        Self { w, b, stride, padding }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, AutodiffError> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.conv_transpose1d(x, w, self.stride, self.padding)?;
        ctx.tape.add(y, b)
    }
}

/// Per-bin mean and a single global scale, fitted on training magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let width = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; width];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let var = rows.iter().flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m))).sum::<f64>()
            / (n * width.max(1) as f64);
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], scale: 1.0 }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(v, m)| (v - m) / self.scale).collect()
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.mean.len()], self.mean.clone()).expect("row")
    }

    /// `y·scale + mean` on the tape.
    pub fn denormalize(&self, ctx: &mut Ctx, y: Var) -> Result<Var, AutodiffError> {
        let m = ctx.constant(self.mean_tensor());
        let s = ctx.tape.scale(y, self.scale)?;
        ctx.tape.add(s, m)
    }
}

/// `sqrt(mean((pred − truth)²))` on the tape.
pub fn lsd_loss(ctx: &mut Ctx, pred: Var, truth: &[f64]) -> Result<Var, AutodiffError> {
    let shape = ctx.tape.value(pred).shape().to_vec();
    let t = ctx.constant(Tensor::new(shape, truth.to_vec())?);
    let d = ctx.tape.sub(pred, t)?;
    let sq = ctx.tape.square(d)?;
    let m = ctx.tape.mean(sq)?;
    ctx.tape.sqrt(m)
}

/// Weighted variant: `w · LSD`.
pub fn weighted_lsd_loss(ctx: &mut Ctx, pred: Var, truth: &[f64], weight: f64) -> Result<Var, AutodiffError> {
    let l = lsd_loss(ctx, pred, truth)?;
    if weight == 1.0 {
        Ok(l)
    } else {
        ctx.tape.scale(l, weight)
    }
}

//! Causal pre-norm Transformer used as the conditioner of each flow block.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Backend, Eval};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, SoftmaxMask};
use crate::math;
use crate::params::{ParamId, ParamSet};
use crate::rng::normal_tensor;
use crate::rope::RopeTable;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub width: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn heads(&self) -> usize {
        self.width / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.head_dim == 0 || !self.width.is_multiple_of(self.head_dim) {
            return Err(Error::Config(format!(
                "width {} is not a multiple of head_dim {}",
                self.width, self.head_dim
            )));
        }
        if self.input_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("input_dim and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    in_w: ParamId,
    in_b: ParamId,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
}

/// Keys and values of every token seen so far, one buffer pair per layer.
/// Per batch row and head, keys are stored transposed as `[head_dim, capacity]`
/// and values as `[capacity, head_dim]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
    batch: usize,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize, capacity: usize) -> Self {
        KvCache { layers: vec![(Vec::new(), Vec::new()); layers], capacity, batch: 0, len: 0 }
    }

    /// Number of cached token positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Copies `[B, H, n, dh]` keys into positions `at..at + n` of the
    /// transposed `[dh, capacity]` blocks.
    fn write_keys(buf: &mut [f64], new: &Tensor, capacity: usize, at: usize) {
        let s = new.shape();
        let (n, dh) = (s[2], s[3]);
        for (i, rows) in new.data().chunks(n * dh).enumerate() {
            let block = &mut buf[i * capacity * dh..(i + 1) * capacity * dh];
            for (r, row) in rows.chunks(dh).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    block[c * capacity + at + r] = v;
                }
            }
        }
    }

    /// Copies `[B, H, n, dh]` values into rows `at..at + n` of the
    /// `[capacity, dh]` blocks.
    fn write_values(buf: &mut [f64], new: &Tensor, capacity: usize, at: usize) {
        let s = new.shape();
        let (n, dh) = (s[2], s[3]);
        for (i, rows) in new.data().chunks(n * dh).enumerate() {
            let start = (i * capacity + at) * dh;
            buf[start..start + n * dh].copy_from_slice(rows);
        }
    }
}

fn scaled_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut t = normal_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v *= std);
    t
}

impl Backbone {
    /// Registers parameters under `prefix` and draws their initial values.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let hidden = d * cfg.mlp_ratio;
        let name = |s: &str| -> String { format!("{}.{}", prefix, s) };
        let w_std = 1.0 / math::sqrt(d as f64);
        let out_std = w_std / math::sqrt(2.0 * cfg.layers.max(1) as f64);
        let in_w = ps.add(&name("in_w"), scaled_normal(rng, &[cfg.input_dim, d], 1.0 / math::sqrt(cfg.input_dim as f64)), true);
        let in_b = ps.add(&name("in_b"), Tensor::zeros(&[d]), false);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("{}.l{}.{}", prefix, l, s);
            layers.push(LayerIds {
                attn_norm: ps.add(&n("attn_norm"), Tensor::ones(&[d]), false),
                wq: ps.add(&n("wq"), scaled_normal(rng, &[d, d], w_std), true),
                wk: ps.add(&n("wk"), scaled_normal(rng, &[d, d], w_std), true),
                wv: ps.add(&n("wv"), scaled_normal(rng, &[d, d], w_std), true),
                wo: ps.add(&n("wo"), scaled_normal(rng, &[d, d], out_std), true),
                mlp_norm: ps.add(&n("mlp_norm"), Tensor::ones(&[d]), false),
                w1: ps.add(&n("w1"), scaled_normal(rng, &[d, hidden], w_std), true),
                b1: ps.add(&n("b1"), Tensor::zeros(&[hidden]), false),
                w2: ps.add(&n("w2"), scaled_normal(rng, &[hidden, d], out_std * math::sqrt(d as f64 / hidden as f64)), true),
                b2: ps.add(&n("b2"), Tensor::zeros(&[d]), false),
            });
        }
        let final_norm = ps.add(&name("final_norm"), Tensor::ones(&[d]), false);
        Ok(Backbone { cfg, in_w, in_b, layers, final_norm })
    }

    /// Full causal pass. `tokens` is `[B, S, input_dim]`; an optional
    /// `prefix` of already-embedded `[B, P, width]` tokens is placed in front
    /// and its outputs are dropped. `rope` covers all `P + S` rows.
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::Var],
        tokens: &B::Var,
        prefix: Option<&B::Var>,
        rope: &Rc<RopeTable>,
    ) -> Result<B::Var> {
        let h = self.embed(b, p, tokens, prefix)?;
        let total = b.shape(&h)[1];
        if rope.rows != total {
            return shape_err("backbone", format!("{} positions for {} tokens", rope.rows, total));
        }
        let mask = Rc::new(SoftmaxMask::causal(total));
        let mut h = h;
        for layer in &self.layers {
            h = self.layer(b, p, layer, &h, rope, mask.clone())?;
        }
        let h = b.rmsnorm(&h, &p[self.final_norm.0], NORM_EPS)?;
        let plen = prefix.map_or(0, |x| b.shape(x)[1]);
        if plen == 0 {
            Ok(h)
        } else {
            b.slice(&h, 1, plen, total)
        }
    }

    /// Incremental pass over new tokens, attending to everything already in
    /// `cache`. The prefix may only be given on the first call. Produces the
    /// same values, bit for bit, as the matching rows of a full pass.
    pub fn forward_cached(
        &self,
        e: &mut Eval,
        p: &[Rc<Tensor>],
        tokens: &Rc<Tensor>,
        prefix: Option<&Rc<Tensor>>,
        rope: &Rc<RopeTable>,
        cache: &mut KvCache,
    ) -> Result<Rc<Tensor>> {
        if prefix.is_some() && !cache.is_empty() {
            return Err(Error::Invalid("prefix supplied after decoding started".into()));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Invalid("cache built for a different depth".into()));
        }
        let h = self.embed(e, p, tokens, prefix)?;
        let (batch, n) = (h.shape()[0], h.shape()[1]);
        if rope.rows != n {
            return shape_err("backbone", format!("{} positions for {} new tokens", rope.rows, n));
        }
        let past = cache.len;
        if past + n > cache.capacity {
            return Err(Error::Invalid(format!("cache holds {} positions, {} requested", cache.capacity, past + n)));
        }
        if cache.is_empty() {
            let size = batch * self.cfg.heads() * cache.capacity * self.cfg.head_dim;
            cache.batch = batch;
            cache.layers.iter_mut().for_each(|(k, v)| {
                *k = vec![0.0; size];
                *v = vec![0.0; size];
            });
        } else if cache.batch != batch {
            return Err(Error::Invalid(format!("cache built for batch {}, got {}", cache.batch, batch)));
        }
        let mask = (n > 1).then(|| {
            let cols = past + n;
            let mut bias = vec![0.0; n * cols];
            for r in 0..n {
                for c in past + r + 1..cols {
                    bias[r * cols + c] = f64::NEG_INFINITY;
                }
            }
            SoftmaxMask { rows: n, cols, bias }
        });
        let capacity = cache.capacity;
        let mut h = h;
        for (layer, (keys, values)) in self.layers.iter().zip(cache.layers.iter_mut()) {
            let (q, k, v) = self.qkv(e, p, layer, &h, rope)?;
            KvCache::write_keys(keys, &k, capacity, past);
            KvCache::write_values(values, &v, capacity, past);
            let scale = 1.0 / math::sqrt(self.cfg.head_dim as f64);
            let ctx = Rc::new(kernels::cached_attention(&q, keys, values, capacity, past + n, scale, mask.as_ref())?);
            h = self.finish_layer(e, p, layer, &h, &ctx)?;
        }
        cache.len += n;
        let h = e.rmsnorm(&h, &p[self.final_norm.0], NORM_EPS)?;
        let plen = prefix.map_or(0, |x| x.shape()[1]);
        if plen == 0 {
            Ok(h)
        } else {
            e.slice(&h, 1, plen, n)
        }
    }

    fn embed<B: Backend>(&self, b: &mut B, p: &[B::Var], tokens: &B::Var, prefix: Option<&B::Var>) -> Result<B::Var> {
        let ts = b.shape(tokens);
        if ts.len() != 3 || ts[2] != self.cfg.input_dim {
            return shape_err("backbone", format!("tokens {:?}, input_dim {}", ts, self.cfg.input_dim));
        }
        let h = b.matmul(tokens, &p[self.in_w.0])?;
        let h = b.add(&h, &p[self.in_b.0])?;
        match prefix {
            Some(pre) if b.shape(pre)[1] > 0 => b.concat(&[pre, &h], 1),
            _ => Ok(h),
        }
    }

    /// Rotated queries and keys and plain values, each `[B, H, S, dh]`.
    fn qkv<B: Backend>(&self, b: &mut B, p: &[B::Var], ids: &LayerIds, h: &B::Var, rope: &Rc<RopeTable>) -> Result<(B::Var, B::Var, B::Var)> {
        let shape = b.shape(h).to_vec();
        let (batch, seq) = (shape[0], shape[1]);
        let heads = self.cfg.heads();
        let dh = self.cfg.head_dim;
        let x = b.rmsnorm(h, &p[ids.attn_norm.0], NORM_EPS)?;
        let split = |b: &mut B, w: ParamId, rotate: bool| -> Result<B::Var> {
            let y = b.matmul(&x, &p[w.0])?;
            let y = b.reshape(&y, &[batch, seq, heads, dh])?;
            let y = b.permute(&y, &[0, 2, 1, 3])?;
            if rotate {
                b.rope(&y, rope.clone())
            } else {
                Ok(y)
            }
        };
        let q = split(b, ids.wq, true)?;
        let k = split(b, ids.wk, true)?;
        let v = split(b, ids.wv, false)?;
        Ok((q, k, v))
    }

    /// Output projection of the attention context, residual, and the MLP.
    fn finish_layer<B: Backend>(&self, b: &mut B, p: &[B::Var], ids: &LayerIds, h: &B::Var, ctx: &B::Var) -> Result<B::Var> {
        let shape = b.shape(h).to_vec();
        let ctx = b.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = b.reshape(&ctx, &shape)?;
        let out = b.matmul(&ctx, &p[ids.wo.0])?;
        let h = b.add(h, &out)?;

        let x = b.rmsnorm(&h, &p[ids.mlp_norm.0], NORM_EPS)?;
        let y = b.matmul(&x, &p[ids.w1.0])?;
        let y = b.add(&y, &p[ids.b1.0])?;
        let y = b.gelu(&y)?;
        let y = b.matmul(&y, &p[ids.w2.0])?;
        let y = b.add(&y, &p[ids.b2.0])?;
        b.add(&h, &y)
    }

    fn layer<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::Var],
        ids: &LayerIds,
        h: &B::Var,
        rope: &Rc<RopeTable>,
        mask: Rc<SoftmaxMask>,
    ) -> Result<B::Var> {
        let (q, k, v) = self.qkv(b, p, ids, h, rope)?;
        let scores = b.matmul_nt(&q, &k)?;
        let scores = b.scale(&scores, 1.0 / math::sqrt(self.cfg.head_dim as f64))?;
        let attn = b.softmax(&scores, Some(mask))?;
        let ctx = b.matmul(&attn, &v)?;
        self.finish_layer(b, p, ids, h, &ctx)
    }
}

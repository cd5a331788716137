//! Affine autoregressive flow blocks and the deep-shallow stack.
//!
//! Blocks are indexed in generation order: block 0 sits next to the prior
//! and is the deep, conditioned one; block `T-1` touches the data. Going
//! from data to noise therefore applies block `T-1` first.
//!
//! Inside a block, position `π(i)` is transformed as
//! `z = (x − μ) / σ` where `(μ, σ)` come from a causal Transformer that has
//! seen a learned start token followed by `x_{π(0)} … x_{π(i−1)}`.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::arch::ArchSpec;
use crate::autodiff::{Backend, Eval};
use crate::backbone::{Backbone, BackboneConfig, KvCache};
use crate::error::{shape_err, Error, Result};
use crate::guidance::{self, GuidanceMode, GuidanceSpec, GuidanceStats};
use crate::math;
use crate::params::{ParamId, ParamSet};
use crate::rng::{self, normal_tensor};
use crate::rope::{RopeSplit, RopeTable, TokenPosition};
use crate::tensor::Tensor;

pub const SOFT_CLIP: f64 = 5.0;
pub const SIGMA_FLOOR: f64 = 1e-4;
pub const NORM_PENALTY: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Layers per block in generation order.
    pub layers: Vec<usize>,
    pub width: usize,
    pub head_dim: usize,
    /// Token grid; the flow models `grid_height * grid_width` positions.
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    /// Number of classes; 0 for an unconditional model. Index
    /// `num_classes` is the null class used for guidance.
    pub num_classes: usize,
    pub soft_clip: f64,
    pub sigma_floor: f64,
    pub norm_penalty: f64,
    pub rope_scale: f64,
    pub mlp_ratio: usize,
    /// Give every block the class prefix instead of only the deep one.
    pub condition_all_blocks: bool,
    /// Reverse the ordering from one block to the next. Turning this off
    /// is only useful to show why alternation matters.
    pub alternate_orderings: bool,
}

impl FlowConfig {
    /// Defaults around an `l(T)-d` spec: two heads per layer.
    pub fn new(arch: ArchSpec, grid_height: usize, grid_width: usize, channels: usize) -> Self {
        FlowConfig {
            layers: arch.layers(),
            width: arch.width,
            head_dim: (arch.width / 2).max(1),
            grid_height,
            grid_width,
            channels,
            num_classes: 0,
            soft_clip: SOFT_CLIP,
            sigma_floor: SIGMA_FLOOR,
            norm_penalty: NORM_PENALTY,
            rope_scale: 1.0,
            mlp_ratio: 4,
            condition_all_blocks: false,
            alternate_orderings: true,
        }
    }

    pub fn blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn positions(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Scalars per sample.
    pub fn dims(&self) -> usize {
        self.positions() * self.channels
    }

    pub fn arch(&self) -> Option<ArchSpec> {
        ArchSpec::from_layers(&self.layers, self.width)
    }

    pub fn is_conditioned(&self, block: usize) -> bool {
        self.num_classes > 0 && (block == 0 || self.condition_all_blocks)
    }

    /// Sequence order of block `k`: the data-side block reads positions in
    /// natural order and each block towards the prior reverses it.
    pub fn ordering(&self, block: usize) -> Vec<usize> {
        let d = self.positions();
        let flips = if self.alternate_orderings { self.blocks() - 1 - block } else { 0 };
        if flips % 2 == 0 {
            (0..d).collect()
        } else {
            (0..d).rev().collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.into()));
        if self.layers.is_empty() {
            return cfg("at least one block is required");
        }
        if self.layers[1..].iter().any(|&l| l > self.layers[0]) {
            return cfg("the first block must be the deepest");
        }
        if self.positions() == 0 || self.channels == 0 {
            return cfg("empty token grid");
        }
        if !(self.soft_clip > 0.0 && self.sigma_floor > 0.0 && self.norm_penalty >= 0.0) {
            return cfg("soft_clip and sigma_floor must be positive, norm_penalty nonnegative");
        }
        if !self.rope_scale.is_finite() || self.rope_scale <= 0.0 {
            return cfg("rope_scale must be positive");
        }
        BackboneConfig {
            layers: 0,
            input_dim: self.channels,
            width: self.width,
            head_dim: self.head_dim,
            mlp_ratio: self.mlp_ratio,
        }
        .validate()?;
        RopeSplit::for_head_dim(self.head_dim)?;
        Ok(())
    }
}

/// How the output projection starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// `μ = 0, σ = 1`: the untrained flow is the identity.
    Identity,
    /// All-zero weights and bias, so `σ = softplus(0) + floor`.
    Zero,
    /// Gaussian weights and bias with this standard deviation.
    Random(f64),
}

#[derive(Debug, Clone)]
struct Block {
    backbone: Backbone,
    sos: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    class_emb: Option<ParamId>,
    ordering: Rc<[usize]>,
    inverse: Rc<[usize]>,
    prefix_len: usize,
    rope: Rc<RopeTable>,
}

/// Per-position affine parameters in a block's sequence order, `[B, D, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub struct StackOutput<V> {
    pub z: V,
    /// `Σ log|det ∂z/∂x|` per sample, `[B]`.
    pub logdet: V,
    /// Outputs of every block but the last, data side first.
    pub latents: Vec<V>,
}

pub struct Objective<V> {
    /// Training loss: `nll` plus the latent norm penalty.
    pub loss: V,
    /// Mean negative log-likelihood in nats per dimension.
    pub nll: V,
    /// Exact log-density per sample, `[B]`.
    pub log_prob: V,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: FlowConfig,
    pub params: ParamSet,
    blocks: Vec<Block>,
}

impl FlowModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        Self::with_init(cfg, seed, OutputInit::Identity)
    }

    pub fn with_init(cfg: FlowConfig, seed: u64, init: OutputInit) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(cfg.blocks());
        let (c, d) = (cfg.channels, cfg.width);
        for (k, &layers) in cfg.layers.iter().enumerate() {
            let bcfg = BackboneConfig {
                layers,
                input_dim: c,
                width: d,
                head_dim: cfg.head_dim,
                mlp_ratio: cfg.mlp_ratio,
            };
            let backbone = Backbone::new(&mut params, &format!("b{}.bb", k), bcfg, &mut rng)?;
            let sos = params.add(&format!("b{}.sos", k), normal_tensor(&mut rng, &[c]), false);
            let (w, bias) = output_init(init, d, c, &mut rng);
            let out_w = params.add(&format!("b{}.out_w", k), w, true);
            let out_b = params.add(&format!("b{}.out_b", k), bias, false);
            let class_emb = cfg.is_conditioned(k).then(|| {
                params.add(&format!("b{}.class_emb", k), normal_tensor(&mut rng, &[cfg.num_classes + 1, d]), false)
            });
            let ordering: Vec<usize> = cfg.ordering(k);
            let mut inverse = vec![0; ordering.len()];
            for (slot, &pos) in ordering.iter().enumerate() {
                inverse[pos] = slot;
            }
            let prefix_len = class_emb.is_some() as usize;
            let mut positions: Vec<TokenPosition> = (1..=prefix_len as u32).map(TokenPosition::prefix).collect();
            positions.extend(ordering.iter().map(|&o| {
                TokenPosition::grid((o % cfg.grid_width) as u32, (o / cfg.grid_width) as u32)
            }));
            let rope = RopeTable::new(RopeSplit::for_head_dim(cfg.head_dim)?, &positions, cfg.rope_scale)?;
            blocks.push(Block {
                backbone,
                sos,
                out_w,
                out_b,
                class_emb,
                ordering: ordering.into(),
                inverse: inverse.into(),
                prefix_len,
                rope: Rc::new(rope),
            });
        }
        Ok(FlowModel { cfg, params, blocks })
    }

    pub fn ordering(&self, block: usize) -> &[usize] {
        &self.blocks[block].ordering
    }

    /// Number of scalar parameters owned by block `k`.
    pub fn block_param_count(&self, k: usize) -> usize {
        let prefix = format!("b{}.", k);
        self.params.iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.value.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let (d, c) = (self.cfg.positions(), self.cfg.channels);
        if shape.len() != 3 || shape[1] != d || shape[2] != c {
            return shape_err("flow", format!("expected [B, {}, {}], got {:?}", d, c, shape));
        }
        Ok(shape[0])
    }

    fn class_indices(&self, labels: Option<&[usize]>, batch: usize) -> Result<Rc<[usize]>> {
        let null = self.cfg.num_classes;
        match labels {
            None => Ok(vec![null; batch].into()),
            Some(l) if l.len() != batch => shape_err("flow", format!("{} labels for batch {}", l.len(), batch)),
            Some(l) => {
                if let Some(&bad) = l.iter().find(|&&c| c > null) {
                    return Err(Error::Invalid(format!("class {} out of range 0..{}", bad, null)));
                }
                Ok(l.into())
            }
        }
    }

    /// Class prefix `[B, 1, width]` for a conditioned block.
    fn prefix<B: Backend>(&self, b: &mut B, p: &[B::Var], k: usize, labels: Option<&[usize]>, batch: usize) -> Result<Option<B::Var>> {
        let block = &self.blocks[k];
        let Some(emb) = block.class_emb else {
            if labels.is_some() {
                return Err(Error::Invalid(format!("block {} does not take a condition", k)));
            }
            return Ok(None);
        };
        let idx = self.class_indices(labels, batch)?;
        let rows = b.index_select(&p[emb.0], 0, idx)?;
        Ok(Some(b.reshape(&rows, &[batch, 1, self.cfg.width])?))
    }

    fn head<B: Backend>(&self, b: &mut B, p: &[B::Var], k: usize, h: &B::Var) -> Result<(B::Var, B::Var)> {
        let block = &self.blocks[k];
        let c = self.cfg.channels;
        let a = self.cfg.soft_clip;
        let raw = b.matmul(h, &p[block.out_w.0])?;
        let raw = b.add(&raw, &p[block.out_b.0])?;
        let raw_mu = b.slice(&raw, 2, 0, c)?;
        let raw_sigma = b.slice(&raw, 2, c, 2 * c)?;
        let mu = b.scale(&raw_mu, 1.0 / a)?;
        let mu = b.tanh(&mu)?;
        let mu = b.scale(&mu, a)?;
        let sigma = b.softplus(&raw_sigma)?;
        let sigma = b.add_scalar(&sigma, self.cfg.sigma_floor)?;
        Ok((mu, sigma))
    }

    fn sos_tokens<B: Backend>(&self, b: &mut B, p: &[B::Var], k: usize, batch: usize) -> Result<B::Var> {
        let c = self.cfg.channels;
        let s = b.reshape(&p[self.blocks[k].sos.0], &[1, 1, c])?;
        b.broadcast_to(&s, &[batch, 1, c])
    }

    /// `(μ, σ)` for every slot given inputs already in sequence order.
    fn params_in_order<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::Var],
        k: usize,
        x_seq: &B::Var,
        labels: Option<&[usize]>,
    ) -> Result<(B::Var, B::Var)> {
        let batch = b.shape(x_seq)[0];
        let d = self.cfg.positions();
        let sos = self.sos_tokens(b, p, k, batch)?;
        let tokens = if d > 1 {
            let shifted = b.slice(x_seq, 1, 0, d - 1)?;
            b.concat(&[&sos, &shifted], 1)?
        } else {
            sos
        };
        let prefix = self.prefix(b, p, k, labels, batch)?;
        let block = &self.blocks[k];
        let h = block.backbone.forward(b, p, &tokens, prefix.as_ref(), &block.rope)?;
        self.head(b, p, k, &h)
    }

    /// Affine parameters of block `k` at input `x` (`[B, D, C]`, data
    /// order), returned in the block's sequence order.
    pub fn block_params<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::Var],
        k: usize,
        x: &B::Var,
        labels: Option<&[usize]>,
    ) -> Result<(B::Var, B::Var)> {
        self.check_input(b.shape(x))?;
        let x_seq = b.index_select(x, 1, self.blocks[k].ordering.clone())?;
        self.params_in_order(b, p, k, &x_seq, labels)
    }

    /// Evaluates [`FlowModel::block_params`] without recording gradients.
    pub fn gaussian_params(&self, k: usize, x: &Tensor, labels: Option<&[usize]>) -> Result<GaussianParams> {
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        let (mu, sigma) = self.block_params(&mut e, &p, k, &Rc::new(x.clone()), labels)?;
        Ok(GaussianParams { mu: (*mu).clone(), sigma: (*sigma).clone() })
    }

    /// One block from data towards noise: `(z, log|det|)` with `z` in data
    /// order and the log-determinant per sample.
    pub fn block_forward<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::Var],
        k: usize,
        x: &B::Var,
        labels: Option<&[usize]>,
    ) -> Result<(B::Var, B::Var)> {
        let batch = self.check_input(b.shape(x))?;
        let block = &self.blocks[k];
        let x_seq = b.index_select(x, 1, block.ordering.clone())?;
        let (mu, sigma) = self.params_in_order(b, p, k, &x_seq, labels)?;
        let centered = b.sub(&x_seq, &mu)?;
        let z_seq = b.div(&centered, &sigma)?;
        let z = b.index_select(&z_seq, 1, block.inverse.clone())?;
        let log_sigma = b.log(&sigma)?;
        let flat = b.reshape(&log_sigma, &[batch, self.cfg.dims()])?;
        let total = b.sum_axis(&flat, 1)?;
        let logdet = b.neg(&total)?;
        Ok((z, logdet))
    }

    /// The whole stack from data to noise.
    pub fn forward<B: Backend>(&self, b: &mut B, p: &[B::Var], x: &B::Var, labels: Option<&[usize]>) -> Result<StackOutput<B::Var>> {
        self.check_input(b.shape(x))?;
        let mut h = x.clone();
        let mut logdet: Option<B::Var> = None;
        let mut latents = Vec::with_capacity(self.cfg.blocks().saturating_sub(1));
        for k in (0..self.cfg.blocks()).rev() {
            let cond = if self.cfg.is_conditioned(k) { labels } else { None };
            let (z, ld) = self.block_forward(b, p, k, &h, cond)?;
            logdet = Some(match logdet {
                Some(acc) => b.add(&acc, &ld)?,
                None => ld,
            });
            if k > 0 {
                latents.push(z.clone());
            }
            h = z;
        }
        Ok(StackOutput { z: h, logdet: logdet.expect("at least one block"), latents })
    }

    /// Exact log-density per sample and the training objective.
    pub fn objective<B: Backend>(&self, b: &mut B, p: &[B::Var], x: &B::Var, labels: Option<&[usize]>) -> Result<Objective<B::Var>> {
        let out = self.forward(b, p, x, labels)?;
        let batch = b.shape(x)[0];
        let dims = self.cfg.dims();
        let zz = b.square(&out.z)?;
        let zz = b.reshape(&zz, &[batch, dims])?;
        let zz = b.sum_axis(&zz, 1)?;
        let prior = b.scale(&zz, -0.5)?;
        let prior = b.add_scalar(&prior, -(dims as f64) * math::HALF_LN_2PI)?;
        let log_prob = b.add(&prior, &out.logdet)?;
        let mean_lp = b.mean(&log_prob)?;
        let nll = b.scale(&mean_lp, -1.0 / dims as f64)?;
        let mut loss = nll.clone();
        if self.cfg.norm_penalty > 0.0 {
            for lat in &out.latents {
                let sq = b.square(lat)?;
                let m = b.mean(&sq)?;
                let m = b.scale(&m, self.cfg.norm_penalty)?;
                loss = b.add(&loss, &m)?;
            }
        }
        if !b.value(&loss).item().is_finite() {
            return Err(Error::NonFinite { op: "objective" });
        }
        Ok(Objective { loss, nll, log_prob })
    }

    /// Log-density of each sample in `x` (`[B, D, C]`).
    pub fn log_prob(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        let obj = self.objective(&mut e, &p, &Rc::new(x.clone()), labels)?;
        Ok(obj.log_prob.data().to_vec())
    }

    /// Data to noise without gradients: `(z, logdet per sample)`.
    pub fn encode(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<(Tensor, Vec<f64>)> {
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        let out = self.forward(&mut e, &p, &Rc::new(x.clone()), labels)?;
        Ok(((*out.z).clone(), out.logdet.data().to_vec()))
    }

    fn guided_mode(&self, k: usize, spec: &GuidanceSpec) -> Result<Option<(GuidanceMode, f64)>> {
        spec.validate()?;
        if !spec.is_active() {
            return Ok(None);
        }
        let wanted = match &spec.blocks {
            Some(list) => list.contains(&k),
            None => self.cfg.is_conditioned(k),
        };
        if !wanted {
            return Ok(None);
        }
        if !self.cfg.is_conditioned(k) {
            return Err(Error::Invalid(format!("block {} has no unconditional pathway to guide with", k)));
        }
        Ok(Some((spec.mode, spec.omega)))
    }

    /// Noise to data: inverts every block, deep block first.
    pub fn inverse(&self, z: &Tensor, labels: Option<&[usize]>, guidance: &GuidanceSpec) -> Result<(Tensor, GuidanceStats)> {
        self.check_input(z.shape())?;
        let mut stats = GuidanceStats::default();
        let mut h = z.clone();
        for k in 0..self.cfg.blocks() {
            let cond = if self.cfg.is_conditioned(k) { labels } else { None };
            let guide = self.guided_mode(k, guidance)?;
            h = self.block_inverse(k, &h, cond, guide, &mut stats)?;
        }
        Ok((h, stats))
    }

    /// Draws `n` samples from the prior and inverts them.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        labels: Option<&[usize]>,
        guidance: &GuidanceSpec,
        rng: &mut R,
    ) -> Result<(Tensor, GuidanceStats)> {
        let z = normal_tensor(rng, &[n, self.cfg.positions(), self.cfg.channels]);
        self.inverse(&z, labels, guidance)
    }

    /// Sequential inverse of block `k` with a key/value cache per pass.
    /// With guidance a second, unconditional pass runs alongside.
    pub fn block_inverse(
        &self,
        k: usize,
        z: &Tensor,
        labels: Option<&[usize]>,
        guide: Option<(GuidanceMode, f64)>,
        stats: &mut GuidanceStats,
    ) -> Result<Tensor> {
        let batch = self.check_input(z.shape())?;
        let (d, c) = (self.cfg.positions(), self.cfg.channels);
        let block = &self.blocks[k];
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        let z_seq = permute_positions(z, &block.ordering);

        struct Pass {
            prefix: Option<Rc<Tensor>>,
            cache: KvCache,
        }
        let mut passes = vec![Pass {
            prefix: self.prefix(&mut e, &p, k, labels, batch)?,
            cache: KvCache::new(block.backbone.cfg.layers, block.prefix_len + d),
        }];
        if guide.is_some() {
            passes.push(Pass {
                prefix: self.prefix(&mut e, &p, k, None, batch)?,
                cache: KvCache::new(block.backbone.cfg.layers, block.prefix_len + d),
            });
        }
        let sos = self.sos_tokens(&mut e, &p, k, batch)?;
        let mut x_seq = vec![0.0; batch * d * c];
        for i in 0..d {
            let token = if i == 0 {
                sos.clone()
            } else {
                let mut t = Vec::with_capacity(batch * c);
                for bi in 0..batch {
                    let at = (bi * d + i - 1) * c;
                    t.extend_from_slice(&x_seq[at..at + c]);
                }
                Rc::new(Tensor::from_parts(vec![batch, 1, c], t))
            };
            let rows = if i == 0 {
                block.rope.rows(0, block.prefix_len + 1)
            } else {
                block.rope.rows(block.prefix_len + i, block.prefix_len + i + 1)
            };
            let rows = Rc::new(rows);
            let mut outs = Vec::with_capacity(passes.len());
            for pass in passes.iter_mut() {
                let prefix = if i == 0 { pass.prefix.as_ref() } else { None };
                let h = block.backbone.forward_cached(&mut e, &p, &token, prefix, &rows, &mut pass.cache)?;
                let (mu, sigma) = self.head(&mut e, &p, k, &h)?;
                stats.passes += 1;
                outs.push((mu, sigma));
            }
            let (mu, sigma) = match guide {
                Some((mode, omega)) => {
                    let (cm, cs) = &outs[0];
                    let (um, us) = &outs[1];
                    guidance::combine(mode, omega, (cm.data(), cs.data()), (um.data(), us.data()), stats)?
                }
                None => {
                    let (mu, sigma) = &outs[0];
                    (mu.data().to_vec(), sigma.data().to_vec())
                }
            };
            for bi in 0..batch {
                for ch in 0..c {
                    let at = (bi * d + i) * c + ch;
                    let j = bi * c + ch;
                    x_seq[at] = mu[j] + sigma[j] * z_seq[at];
                }
            }
        }
        if x_seq.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "inverse" });
        }
        Ok(unpermute_positions(&Tensor::from_parts(vec![batch, d, c], x_seq), &block.ordering))
    }

    /// Cache-free inverse that re-runs the full block once per position.
    /// Quadratic in the sequence length; kept as a reference.
    pub fn block_inverse_naive(&self, k: usize, z: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let batch = self.check_input(z.shape())?;
        let (d, c) = (self.cfg.positions(), self.cfg.channels);
        let block = &self.blocks[k];
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        let z_seq = permute_positions(z, &block.ordering);
        let mut x_seq = Tensor::zeros(&[batch, d, c]);
        for i in 0..d {
            let (mu, sigma) = self.params_in_order(&mut e, &p, k, &Rc::new(x_seq.clone()), labels)?;
            for bi in 0..batch {
                for ch in 0..c {
                    let at = (bi * d + i) * c + ch;
                    x_seq.data_mut()[at] = mu.data()[at] + sigma.data()[at] * z_seq[at];
                }
            }
        }
        Ok(unpermute_positions(&x_seq, &block.ordering))
    }
}

fn output_init<R: Rng + ?Sized>(init: OutputInit, d: usize, c: usize, rng: &mut R) -> (Tensor, Tensor) {
    match init {
        OutputInit::Identity => {
            let mut bias = Tensor::zeros(&[2 * c]);
            let s = math::softplus_inv(1.0 - SIGMA_FLOOR);
            bias.data_mut()[c..].iter_mut().for_each(|v| *v = s);
            (Tensor::zeros(&[d, 2 * c]), bias)
        }
        OutputInit::Zero => (Tensor::zeros(&[d, 2 * c]), Tensor::zeros(&[2 * c])),
        OutputInit::Random(std) => {
            let mut w = normal_tensor(rng, &[d, 2 * c]);
            let mut b = normal_tensor(rng, &[2 * c]);
            w.data_mut().iter_mut().chain(b.data_mut()).for_each(|v| *v *= std);
            (w, b)
        }
    }
}

/// Reorders axis 1 of `[B, D, C]` so slot `i` holds position `order[i]`.
fn permute_positions(x: &Tensor, order: &[usize]) -> Vec<f64> {
    let (batch, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..batch {
        for &pos in order {
            let at = (bi * d + pos) * c;
            out.extend_from_slice(&x.data()[at..at + c]);
        }
    }
    out
}

fn unpermute_positions(x: &Tensor, order: &[usize]) -> Tensor {
    let (batch, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        for (slot, &pos) in order.iter().enumerate() {
            let src = (bi * d + slot) * c;
            let dst = (bi * d + pos) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    pub(crate) fn small_cfg(blocks: usize, classes: usize) -> FlowConfig {
        let mut cfg = FlowConfig::new(ArchSpec { deep_layers: 2, blocks, width: 16 }, 2, 2, 2);
        cfg.head_dim = 8;
        cfg.num_classes = classes;
        cfg
    }

    fn input(batch: usize, salt: f64) -> Tensor {
        Tensor::from_fn(&[batch, 4, 2], |i| math::sin(i as f64 * 1.37 + salt) * 1.5).unwrap()
    }

    #[test]
    fn orderings_alternate_from_the_data_side() {
        let cfg = small_cfg(3, 0);
        assert_eq!(cfg.ordering(2), vec![0, 1, 2, 3]);
        assert_eq!(cfg.ordering(1), vec![3, 2, 1, 0]);
        assert_eq!(cfg.ordering(0), vec![0, 1, 2, 3]);
        let mut same = cfg.clone();
        same.alternate_orderings = false;
        assert_eq!(same.ordering(1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_output_projection() {
        let m = FlowModel::with_init(small_cfg(2, 0), 1, OutputInit::Zero).unwrap();
        let gp = m.gaussian_params(0, &input(2, 0.0), None).unwrap();
        assert!(gp.mu.data().iter().all(|&v| v == 0.0));
        let expect = core::f64::consts::LN_2 + SIGMA_FLOOR;
        assert!(gp.sigma.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn mean_saturates_at_the_clip() {
        let mut m = FlowModel::with_init(small_cfg(1, 0), 1, OutputInit::Zero).unwrap();
        let id = m.params.id("b0.out_b").unwrap();
        m.params.value_mut(id).data_mut()[0] = 1e6;
        let gp = m.gaussian_params(0, &input(1, 0.0), None).unwrap();
        assert_eq!(gp.mu.data()[0], SOFT_CLIP);
    }

    #[test]
    fn identity_init_is_the_identity() {
        let m = FlowModel::new(small_cfg(3, 0), 4).unwrap();
        let x = input(3, 0.5);
        let (z, ld) = m.encode(&x, None).unwrap();
        assert!(z.max_abs_diff(&x) < 1e-12);
        assert!(ld.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn params_are_causal_in_sequence_order() {
        let m = FlowModel::with_init(small_cfg(2, 0), 2, OutputInit::Random(0.3)).unwrap();
        for k in 0..2 {
            let x = input(2, 0.1);
            let base = m.gaussian_params(k, &x, None).unwrap();
            let order = m.ordering(k).to_vec();
            for (slot, &pos) in order.iter().enumerate() {
                let mut y = x.clone();
                y.data_mut()[pos * 2] += 0.7;
                let moved = m.gaussian_params(k, &y, None).unwrap();
                for s in 0..4 {
                    let same = (0..2).all(|c| {
                        base.mu.data()[s * 2 + c] == moved.mu.data()[s * 2 + c]
                            && base.sigma.data()[s * 2 + c] == moved.sigma.data()[s * 2 + c]
                    });
                    if s <= slot {
                        assert!(same, "block {} slot {} moved by slot {}", k, s, slot);
                    }
                }
            }
        }
    }

    #[test]
    fn cached_inverse_matches_naive_bitwise() {
        let m = FlowModel::with_init(small_cfg(2, 3), 5, OutputInit::Random(0.3)).unwrap();
        let z = input(3, 0.9);
        let labels = [0, 2, 3];
        let mut stats = GuidanceStats::default();
        let a = m.block_inverse(0, &z, Some(&labels), None, &mut stats).unwrap();
        let b = m.block_inverse_naive(0, &z, Some(&labels)).unwrap();
        assert_eq!(a, b);
        let a = m.block_inverse(1, &z, None, None, &mut stats).unwrap();
        let b = m.block_inverse_naive(1, &z, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip() {
        let m = FlowModel::with_init(small_cfg(3, 2), 6, OutputInit::Random(0.3)).unwrap();
        let x = input(4, 0.2);
        let labels = [0, 1, 2, 1];
        let (z, _) = m.encode(&x, Some(&labels)).unwrap();
        let (back, _) = m.inverse(&z, Some(&labels), &GuidanceSpec::none()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn shallow_blocks_ignore_the_condition() {
        let m = FlowModel::with_init(small_cfg(2, 3), 7, OutputInit::Random(0.3)).unwrap();
        let x = input(2, 0.4);
        let a = m.gaussian_params(0, &x, Some(&[0, 0])).unwrap();
        let b = m.gaussian_params(0, &x, Some(&[1, 2])).unwrap();
        assert_ne!(a, b);
        assert!(m.gaussian_params(1, &x, Some(&[0, 0])).is_err());
        let mut e = Eval;
        let p = m.params.bind(&mut e);
        let xv = Rc::new(x);
        let (z1, _) = m.block_forward(&mut e, &p, 1, &xv, None).unwrap();
        let (z2, _) = m.block_forward(&mut e, &p, 1, &xv, None).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn guidance_on_an_unconditioned_block_is_rejected() {
        let m = FlowModel::new(small_cfg(2, 3), 7).unwrap();
        let spec = GuidanceSpec { omega: 1.0, mode: GuidanceMode::Proposed, blocks: Some(vec![1]) };
        assert!(m.inverse(&input(1, 0.0), Some(&[0]), &spec).is_err());
        let spec = GuidanceSpec::new(GuidanceMode::Proposed, 1.0).unwrap();
        let unconditional = FlowModel::new(small_cfg(2, 0), 7).unwrap();
        let (_, stats) = unconditional.inverse(&input(1, 0.0), None, &spec).unwrap();
        assert_eq!(stats.passes, 8);
    }

    #[test]
    fn zero_weight_guidance_matches_plain_sampling() {
        let m = FlowModel::with_init(small_cfg(2, 3), 8, OutputInit::Random(0.3)).unwrap();
        let z = input(2, 0.3);
        let labels = [1, 2];
        let (plain, s0) = m.inverse(&z, Some(&labels), &GuidanceSpec::none()).unwrap();
        let spec = GuidanceSpec::new(GuidanceMode::Proposed, 0.0).unwrap();
        let (guided, s1) = m.inverse(&z, Some(&labels), &spec).unwrap();
        assert_eq!(plain, guided);
        assert_eq!(s0.passes, 8);
        assert_eq!(s1.passes, 12);
    }

    #[test]
    fn objective_of_identity_flow() {
        let m = FlowModel::new(small_cfg(2, 0), 9).unwrap();
        let x = input(3, 0.0);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let obj = m.objective(&mut g, &p, &xv, None).unwrap();
        let sq: f64 = x.data().iter().map(|v| v * v).sum();
        let expect = 0.5 * sq / x.len() as f64 + math::HALF_LN_2PI;
        assert!((g.value(&obj.nll).item() - expect).abs() < 1e-12);
        let penalty = NORM_PENALTY * sq / x.len() as f64;
        assert!((g.value(&obj.loss).item() - expect - penalty).abs() < 1e-12);
        g.backward(obj.loss).unwrap();
    }
}

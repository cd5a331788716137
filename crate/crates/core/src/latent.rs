//! Noisy latents from a frozen encoder, the decoder that maps them back to
//! pixels, and one-step score denoising with the flow itself.
//!
//! The encoder is a fixed random orthogonal map from each `p × p` pixel
//! patch to `p²` latent channels, so the clean latent is a lossless
//! rotation of the image. The flow is trained on `E(x) + σ_L ε`.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Backend, Eval, Graph};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::math;
use crate::optim::AdamW;
use crate::params::{ParamId, ParamSet};
use crate::rng::{self, normal_tensor};
use crate::tensor::Tensor;

pub const LATENT_NOISE: f64 = 0.3;
pub const DECODER_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub hidden: usize,
}

impl AutoencoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn channels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }
}

/// Frozen patch encoder plus trainable decoder, sharing one parameter set
/// so both travel in checkpoints.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub params: ParamSet,
    enc_w: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

/// Random orthogonal `n × n` matrix from Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let g = normal_tensor(rng, &[n, n]);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g.data()[i * n + j]).collect();
            for _ in 0..2 {
                for u in &q {
                    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = math::sqrt(v.iter().map(|x| x * x).sum());
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if ok {
            return Tensor::from_fn(&[n, n], |k| q[k % n][k / n]).expect("finite");
        }
    }
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 7);
        let c = cfg.channels();
        let enc = random_orthogonal(c, &mut rng);
        let mut params = ParamSet::new();
        let enc_w = params.add_frozen("enc.w", enc.clone());
        let mut dec = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                dec.data_mut()[i * c + j] = enc.data()[j * c + i];
            }
        }
        let flat = cfg.grid() * cfg.grid() * c;
        let dec_w = params.add("dec.w", dec, true);
        let dec_b = params.add("dec.b", Tensor::zeros(&[c]), false);
        let mut w1 = normal_tensor(&mut rng, &[flat, cfg.hidden]);
        let s = 1.0 / math::sqrt(flat as f64);
        w1.data_mut().iter_mut().for_each(|v| *v *= s);
        let mlp_w1 = params.add("dec.mlp_w1", w1, true);
        let mlp_b1 = params.add("dec.mlp_b1", Tensor::zeros(&[cfg.hidden]), false);
        let mlp_w2 = params.add("dec.mlp_w2", Tensor::zeros(&[cfg.hidden, cfg.pixels()]), true);
        let mlp_b2 = params.add("dec.mlp_b2", Tensor::zeros(&[cfg.pixels()]), false);
        Ok(Autoencoder { cfg, params, enc_w, dec_w, dec_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2 })
    }

    pub fn encoder_weight(&self) -> &Tensor {
        self.params.value(self.enc_w)
    }

    fn check_pixels(&self, shape: &[usize]) -> Result<usize> {
        let px = self.cfg.pixels();
        if shape.len() != 3 || shape[1] != px || shape[2] != 1 {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("expected [B, {}, 1] pixels for {}×{} images, got {:?}", px, self.cfg.image_size, self.cfg.image_size, shape),
            });
        }
        Ok(shape[0])
    }

    /// `[B, H·W, 1]` pixels to `[B, grid², p²]` patches.
    fn patchify<B: Backend>(&self, b: &mut B, x: &B::Var, batch: usize) -> Result<B::Var> {
        let (g, p) = (self.cfg.grid(), self.cfg.patch);
        let x = b.reshape(x, &[batch, g, p, g, p])?;
        let x = b.permute(&x, &[0, 1, 3, 2, 4])?;
        b.reshape(&x, &[batch, g * g, p * p])
    }

    fn unpatchify<B: Backend>(&self, b: &mut B, x: &B::Var, batch: usize) -> Result<B::Var> {
        let (g, p) = (self.cfg.grid(), self.cfg.patch);
        let x = b.reshape(x, &[batch, g, g, p, p])?;
        let x = b.permute(&x, &[0, 1, 3, 2, 4])?;
        b.reshape(&x, &[batch, g * p * g * p, 1])
    }

    pub fn encode_var<B: Backend>(&self, b: &mut B, p: &[B::Var], x: &B::Var) -> Result<B::Var> {
        let batch = self.check_pixels(b.shape(x))?;
        let patches = self.patchify(b, x, batch)?;
        b.matmul(&patches, &p[self.enc_w.0])
    }

    pub fn decode_var<B: Backend>(&self, b: &mut B, p: &[B::Var], z: &B::Var) -> Result<B::Var> {
        let batch = b.shape(z)[0];
        let patches = b.matmul(z, &p[self.dec_w.0])?;
        let patches = b.add(&patches, &p[self.dec_b.0])?;
        let linear = self.unpatchify(b, &patches, batch)?;
        let flat = b.reshape(z, &[batch, self.cfg.grid() * self.cfg.grid() * self.cfg.channels()])?;
        let h = b.matmul(&flat, &p[self.mlp_w1.0])?;
        let h = b.add(&h, &p[self.mlp_b1.0])?;
        let h = b.gelu(&h)?;
        let r = b.matmul(&h, &p[self.mlp_w2.0])?;
        let r = b.add(&r, &p[self.mlp_b2.0])?;
        let r = b.reshape(&r, &[batch, self.cfg.pixels(), 1])?;
        b.add(&linear, &r)
    }

    /// Clean latents `E(x)`.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        Ok((*self.encode_var(&mut e, &p, &Rc::new(pixels.clone()))?).clone())
    }

    /// `E(x) + σ ε`.
    pub fn encode_noisy<R: Rng + ?Sized>(&self, pixels: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
        let mut z = self.encode(pixels)?;
        let eps = normal_tensor(rng, z.shape());
        z.data_mut().iter_mut().zip(eps.data()).for_each(|(v, e)| *v += sigma * e);
        Ok(z)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let mut e = Eval;
        let p = self.params.bind(&mut e);
        Ok((*self.decode_var(&mut e, &p, &Rc::new(latents.clone()))?).clone())
    }

    /// Transpose of the encoder, i.e. its exact inverse on clean latents.
    pub fn unpatchify_linear(&self, latents: &Tensor) -> Result<Tensor> {
        let mut e = Eval;
        let batch = latents.shape()[0];
        let w = e.constant(self.encoder_weight().clone());
        let patches = e.matmul_nt(&Rc::new(latents.clone()), &w)?;
        Ok((*self.unpatchify(&mut e, &patches, batch)?).clone())
    }

    /// One optimizer step of the decoder on `‖D(E(x) + σε) − x‖²`. Returns the
    /// batch mean squared error before the update.
    pub fn finetune_step<R: Rng + ?Sized>(
        &mut self,
        opt: &mut AdamW,
        pixels: &Tensor,
        sigma: f64,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let noisy = self.encode_noisy(pixels, sigma, rng)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let z = g.constant(noisy);
        let target = g.constant(pixels.clone());
        let out = self.decode_var(&mut g, &p, &z)?;
        let diff = g.sub(&out, &target)?;
        let sq = g.square(&diff)?;
        let loss = g.mean(&sq)?;
        let mse = g.value(&loss).item();
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = p.iter().map(|&v| g.take_grad(v)).collect();
        opt.step(&mut self.params, &grads, lr)?;
        Ok(mse)
    }
}

/// Gaussian reconstruction term per pixel with the fixed decoder scale:
/// `mean_b Σ_i [½((x̂ − x)/σ)² + log σ + ½ log 2π] / N`.
pub fn recon_nll<B: Backend>(b: &mut B, decoded: &B::Var, pixels: &B::Var) -> Result<B::Var> {
    let diff = b.sub(decoded, pixels)?;
    let sq = b.square(&diff)?;
    let m = b.mean(&sq)?;
    let m = b.scale(&m, 0.5 / (DECODER_SIGMA * DECODER_SIGMA))?;
    b.add_scalar(&m, math::ln(DECODER_SIGMA) + math::HALF_LN_2PI)
}

pub struct Elbo<V> {
    pub total: V,
    pub flow: V,
    pub recon: V,
}

/// Negative bound on `log p(x)` up to the constant encoder entropy: the
/// flow's loss on the noisy latent plus the decoder reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn elbo_objective<B: Backend>(
    b: &mut B,
    flow: &FlowModel,
    flow_params: &[B::Var],
    ae: &Autoencoder,
    ae_params: &[B::Var],
    pixels: &B::Var,
    noise: &B::Var,
    labels: Option<&[usize]>,
) -> Result<Elbo<B::Var>> {
    let clean = ae.encode_var(b, ae_params, pixels)?;
    let noisy = b.add(&clean, noise)?;
    let obj = flow.objective(b, flow_params, &noisy, labels)?;
    let decoded = ae.decode_var(b, ae_params, &noisy)?;
    let recon = recon_nll(b, &decoded, pixels)?;
    let total = b.add(&obj.loss, &recon)?;
    if !b.value(&total).item().is_finite() {
        return Err(Error::NonFinite { op: "elbo" });
    }
    Ok(Elbo { total, flow: obj.loss, recon })
}

/// `x̃ + σ² ∇ log p(x̃)` using the flow's exact density.
pub fn score_denoise(flow: &FlowModel, noisy: &Tensor, sigma: f64, labels: Option<&[usize]>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = flow.params.bind(&mut g);
    let x = g.leaf(Rc::new(noisy.clone()), true);
    let obj = flow.objective(&mut g, &p, &x, labels)?;
    let total = g.sum(&obj.log_prob)?;
    g.backward(total)?;
    let score = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(noisy.shape()));
    let s2 = sigma * sigma;
    let out: Vec<f64> = noisy.data().iter().zip(score.data()).map(|(x, s)| x + s2 * s).collect();
    let out = Tensor::new(noisy.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: "score_denoise" })?;
    Ok(out)
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::flow::FlowConfig;
    use crate::optim::AdamWConfig;

    fn ae() -> Autoencoder {
        Autoencoder::new(AutoencoderConfig { image_size: 4, patch: 2, hidden: 8 }, 1).unwrap()
    }

    fn pixels(batch: usize) -> Tensor {
        Tensor::from_fn(&[batch, 16, 1], |i| math::sin(i as f64 * 0.9)).unwrap()
    }

    #[test]
    fn encoder_is_orthogonal_and_lossless() {
        let a = ae();
        let w = a.encoder_weight();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| w.data()[k * 4 + i] * w.data()[k * 4 + j]).sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
        let x = pixels(2);
        let z = a.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4]);
        assert!(a.unpatchify_linear(&z).unwrap().max_abs_diff(&x) < 1e-12);
        assert!(a.decode(&z).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn zero_noise_limit_and_seeds() {
        let a = ae();
        let x = pixels(1);
        let clean = a.encode(&x).unwrap();
        assert_eq!(a.encode_noisy(&x, 0.0, &mut rng::stream(1, 0)).unwrap(), clean);
        let n1 = a.encode_noisy(&x, 0.3, &mut rng::stream(1, 0)).unwrap();
        let n2 = a.encode_noisy(&x, 0.3, &mut rng::stream(2, 0)).unwrap();
        assert_ne!(n1, n2);
    }

    #[test]
    fn indivisible_images_are_rejected() {
        assert!(Autoencoder::new(AutoencoderConfig { image_size: 5, patch: 2, hidden: 4 }, 0).is_err());
        assert!(ae().encode(&Tensor::zeros(&[1, 15, 1])).is_err());
    }

    #[test]
    fn recon_term() {
        let mut e = Eval;
        let x = Rc::new(pixels(2));
        let perfect = recon_nll(&mut e, &x, &x).unwrap().item();
        assert!((perfect - (math::ln(DECODER_SIGMA) + math::HALF_LN_2PI)).abs() < 1e-15);
        let off = |k: f64| {
            let y = Rc::new(Tensor::from_fn(&[2, 16, 1], |i| x.data()[i] + k * 0.01 * (i % 3) as f64).unwrap());
            recon_nll(&mut Eval, &y, &x).unwrap().item() - perfect
        };
        assert!((off(2.0) / off(1.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn elbo_splits_into_terms_and_spares_the_encoder() {
        let a = ae();
        let mut cfg = FlowConfig::new(ArchSpec { deep_layers: 2, blocks: 2, width: 16 }, 2, 2, 4);
        cfg.head_dim = 8;
        let flow = FlowModel::with_init(cfg, 3, crate::flow::OutputInit::Random(0.1)).unwrap();
        let mut g = Graph::new();
        let fp = flow.params.bind(&mut g);
        let ap = a.params.bind(&mut g);
        let x = g.constant(pixels(3));
        let noise = g.constant(normal_tensor(&mut rng::stream(4, 0), &[3, 4, 4]));
        let elbo = elbo_objective(&mut g, &flow, &fp, &a, &ap, &x, &noise, None).unwrap();
        let sum = g.value(&elbo.flow).item() + g.value(&elbo.recon).item();
        assert!((g.value(&elbo.total).item() - sum).abs() < 1e-12);
        g.backward(elbo.total).unwrap();
        let enc = a.params.id("enc.w").unwrap();
        assert!(g.grad(ap[enc.0]).is_none());
        assert!(g.grad(ap[a.params.id("dec.w").unwrap().0]).is_some());
        assert!(fp.iter().any(|&v| g.grad(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0))));
    }

    #[test]
    fn finetuning_keeps_the_encoder_frozen() {
        let mut a = ae();
        let before = a.encoder_weight().clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }, &a.params);
        let mut rng = rng::stream(0, 0);
        let x = pixels(4);
        let first = a.finetune_step(&mut opt, &x, 0.3, 1e-2, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = a.finetune_step(&mut opt, &x, 0.3, 1e-2, &mut rng).unwrap();
        }
        assert!(last < first);
        assert_eq!(&before, a.encoder_weight());
    }

    #[test]
    fn exact_decoder_at_zero_noise() {
        let mut a = ae();
        let mut opt = AdamW::new(AdamWConfig::default(), &a.params);
        let mse = a.finetune_step(&mut opt, &pixels(2), 0.0, 0.0, &mut rng::stream(0, 0)).unwrap();
        assert!(mse < 1e-24);
    }

    #[test]
    fn score_step_on_standard_normal_prior() {
        let mut cfg = FlowConfig::new(ArchSpec { deep_layers: 2, blocks: 2, width: 16 }, 2, 2, 4);
        cfg.head_dim = 8;
        let flow = FlowModel::new(cfg, 3).unwrap();
        let x = Tensor::from_fn(&[2, 4, 4], |i| math::cos(i as f64)).unwrap();
        let out = score_denoise(&flow, &x, 0.3, None).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v * (1.0 - 0.09)).abs() < 1e-12);
        }
        assert_eq!(score_denoise(&flow, &x, 0.0, None).unwrap(), x);
    }
}

//! One optimisation step of the flow, plus dataset-level likelihood.
//!
//! Every step draws from its own random stream derived from the run seed
//! and the step index, and parameters and moments are rounded to `f32`
//! after each update. Together these make a run resumed from a checkpoint
//! bitwise identical to an uninterrupted one.

use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Backend, Eval, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::latent::Autoencoder;
use crate::math;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{self, normal_tensor, FlowRng};
use crate::tensor::Tensor;

/// Random streams `0..STEP_STREAM` are left for initialisation.
const STEP_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub optimizer: AdamWConfig,
    pub lr_min: f64,
    /// Probability of replacing a label with the null class.
    pub cond_dropout: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Standard deviation of the noise added to inputs, or to encoder
    /// latents when an autoencoder is used.
    pub input_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            total_steps: 1000,
            optimizer: AdamWConfig::default(),
            lr_min: 1e-6,
            cond_dropout: 0.1,
            grad_clip: 0.0,
            input_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub bits_per_dim: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FlowModel,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: FlowModel, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.optimizer.validate()?;
        if cfg.batch_size == 0 || cfg.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        let opt = AdamW::new(cfg.optimizer, &model.params);
        Ok(Trainer { model, opt, cfg, seed })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// Draws a batch, applies noise and condition dropout, and returns the
    /// inputs and labels of the next step.
    pub fn next_batch(&self, data: &Dataset, encoder: Option<&Autoencoder>, rng: &mut FlowRng) -> Result<(Tensor, Option<Vec<usize>>)> {
        if data.n == 0 {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.random_range(0..data.n)).collect();
        let x = data.batch(&idx);
        let x = match encoder {
            Some(ae) => ae.encode_noisy(&x, self.cfg.input_noise, rng)?,
            None => add_noise(x, self.cfg.input_noise, rng),
        };
        let null = self.model.cfg.num_classes;
        let labels = match (null, data.batch_labels(&idx)) {
            (0, _) | (_, None) => None,
            (_, Some(l)) => Some(l.into_iter().map(|c| if rng.random::<f64>() < self.cfg.cond_dropout { null } else { c }).collect()),
        };
        Ok((x, labels))
    }

    pub fn step(&mut self, data: &Dataset, encoder: Option<&Autoencoder>) -> Result<StepMetrics> {
        let step = self.opt.step;
        let mut rng = rng::stream(self.seed, STEP_STREAM + step);
        let (x, labels) = self.next_batch(data, encoder, &mut rng)?;
        self.step_on(&x, labels.as_deref())
    }

    /// One update on an explicit batch.
    pub fn step_on(&mut self, x: &Tensor, labels: Option<&[usize]>) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let obj = self.model.objective(&mut g, &p, &xv, labels)?;
        let loss = g.value(&obj.loss).item();
        let nll = g.value(&obj.nll).item();
        g.backward(obj.loss)?;
        let mut grads: Vec<Option<Tensor>> = p.iter().map(|&v| g.take_grad(v)).collect();
        let grad_norm = math::sqrt(grads.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum());
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / grad_norm;
            grads.iter_mut().flatten().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let lr = cosine_lr(self.opt.step, self.cfg.total_steps, self.cfg.optimizer.lr, self.cfg.lr_min)?;
        self.opt.step(&mut self.model.params, &grads, lr)?;
        self.model.params.round_to_f32();
        self.opt.round_to_f32();
        Ok(StepMetrics { step: self.opt.step, loss, nll, bits_per_dim: nll / math::LN_2, lr, grad_norm })
    }
}

fn add_noise(mut x: Tensor, sigma: f64, rng: &mut FlowRng) -> Tensor {
    if sigma > 0.0 {
        let e = normal_tensor(rng, x.shape());
        x.data_mut().iter_mut().zip(e.data()).for_each(|(v, e)| *v += sigma * e);
    }
    x
}

/// Mean negative log-likelihood in nats per dimension over a dataset.
/// Sample `i` gets fresh noise from stream `i` of `seed`.
pub fn dataset_nll(
    model: &FlowModel,
    data: &Dataset,
    encoder: Option<&Autoencoder>,
    noise: f64,
    seed: u64,
    batch: usize,
) -> Result<f64> {
    if data.n == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut total = 0.0;
    let p = model.params.bind(&mut Eval);
    for start in (0..data.n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(data.n)).collect();
        let mut rows = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut rng = rng::stream(seed, i as u64);
            let x = data.batch(&[i]);
            let x = match encoder {
                Some(ae) => ae.encode_noisy(&x, noise, &mut rng)?,
                None => add_noise(x, noise, &mut rng),
            };
            rows.push(x);
        }
        let refs: Vec<Rc<Tensor>> = rows.into_iter().map(Rc::new).collect();
        let refs: Vec<&Rc<Tensor>> = refs.iter().collect();
        let x = Eval.concat(&refs, 0)?;
        let labels = data.batch_labels(&idx);
        let obj = model.objective(&mut Eval, &p, &x, labels.as_deref())?;
        total += obj.log_prob.data().iter().sum::<f64>();
    }
    Ok(-total / (data.n * model.cfg.dims()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::{canonical_modes, gen_2d_mixture};
    use crate::flow::FlowConfig;

    fn toy() -> (FlowModel, Dataset) {
        let mut cfg = FlowConfig::new(ArchSpec { deep_layers: 2, blocks: 2, width: 16 }, 1, 2, 1);
        cfg.head_dim = 8;
        (FlowModel::new(cfg, 0).unwrap(), gen_2d_mixture(&canonical_modes(), 256, 1).unwrap())
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let (model, data) = toy();
        let cfg = TrainConfig { batch_size: 16, total_steps: 10, ..Default::default() };
        let mut a = Trainer::new(model, cfg, 5).unwrap();
        a.step(&data, None).unwrap();
        let mut b = a.clone();
        let ma = a.step(&data, None).unwrap();
        let mb = b.step(&data, None).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
    }

    #[test]
    fn first_loss_is_the_identity_nll() {
        let (model, data) = toy();
        let cfg = TrainConfig { batch_size: 32, total_steps: 10, ..Default::default() };
        let mut t = Trainer::new(model, cfg, 5).unwrap();
        let (x, _) = t.next_batch(&data, None, &mut rng::stream(5, STEP_STREAM)).unwrap();
        let expect = 0.5 * x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + math::HALF_LN_2PI;
        let m = t.step(&data, None).unwrap();
        assert!((m.nll - expect).abs() < 1e-12);
        assert!((m.bits_per_dim - m.nll / math::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_is_reproducible() {
        let (model, data) = toy();
        let a = dataset_nll(&model, &data, None, 0.0, 3, 100).unwrap();
        let b = dataset_nll(&model, &data, None, 0.0, 3, 64).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

//! Training-free inpainting with a Metropolis-Hastings chain in latent space.
//!
//! Missing coordinates start as Gaussian noise. Each round perturbs the
//! masked coordinates of the flow latent, maps back to data, restores the
//! observed values and accepts with the Metropolis ratio of exact
//! log-densities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::guidance::GuidanceSpec;
use crate::math;
use crate::rng::{self, normal_vec, FlowRng};
use crate::tensor::Tensor;

const INIT_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintTask {
    /// `true` marks a missing coordinate; one entry per position and channel.
    pub mask: Vec<bool>,
    /// Observed sample `[D, C]`; values under the mask are ignored.
    pub observed: Tensor,
    pub init_sigma: f64,
    pub prop_sigma: f64,
    pub iters: usize,
}

impl InpaintTask {
    pub fn new(observed: Tensor, mask: Vec<bool>) -> Result<Self> {
        if observed.rank() != 2 || mask.len() != observed.len() {
            return Err(Error::Shape {
                op: "inpaint",
                detail: format!("mask of {} for observation {:?}", mask.len(), observed.shape()),
            });
        }
        Ok(InpaintTask { mask, observed, init_sigma: 1.0, prop_sigma: 1.0, iters: 20 })
    }

    /// Keeps observed coordinates and takes masked ones from `fill`.
    fn restore(&self, fill: &[f64]) -> Vec<f64> {
        self.observed
            .data()
            .iter()
            .zip(&self.mask)
            .zip(fill)
            .map(|((&o, &m), &f)| if m { f } else { o })
            .collect()
    }
}

/// One chain position: data-space sample, its latent and log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub logp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub chain: usize,
    pub iter: usize,
    pub logp: f64,
    pub accepted: bool,
    pub acceptance_rate_cum: f64,
}

#[derive(Debug, Clone)]
pub struct InpaintOutcome {
    /// Final sample of every chain, `[chains, D, C]`.
    pub samples: Tensor,
    pub acceptance: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Metropolis rule for a symmetric proposal.
pub fn mh_accept(logp_new: f64, logp_old: f64, u: f64) -> bool {
    u < math::exp((logp_new - logp_old).min(0.0))
}

fn log_density(z: &[f64], logdet: f64) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - z.len() as f64 * math::HALF_LN_2PI + logdet
}

/// Latents and log-densities of a batch of data points. Rows the flow
/// cannot evaluate come back as `None`.
fn evaluate(flow: &FlowModel, xs: &[Vec<f64>], labels: Option<&[usize]>) -> Vec<Option<(Vec<f64>, f64)>> {
    let (d, c) = (flow.cfg.positions(), flow.cfg.channels);
    let n = xs.len();
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let batched = Tensor::new(vec![n, d, c], flat).and_then(|t| flow.encode(&t, labels));
    match batched {
        Ok((z, ld)) => (0..n)
            .map(|i| {
                let zi = z.data()[i * d * c..(i + 1) * d * c].to_vec();
                let lp = log_density(&zi, ld[i]);
                lp.is_finite().then_some((zi, lp))
            })
            .collect(),
        Err(_) if n > 1 => (0..n)
            .map(|i| evaluate(flow, &xs[i..i + 1], labels.map(|l| &l[i..i + 1])).pop().flatten())
            .collect(),
        Err(_) => vec![None],
    }
}

fn invert(flow: &FlowModel, zs: &[Vec<f64>], labels: Option<&[usize]>) -> Vec<Option<Vec<f64>>> {
    let (d, c) = (flow.cfg.positions(), flow.cfg.channels);
    let n = zs.len();
    let flat: Vec<f64> = zs.iter().flatten().copied().collect();
    let batched = Tensor::new(vec![n, d, c], flat).and_then(|t| flow.inverse(&t, labels, &GuidanceSpec::none()));
    match batched {
        Ok((x, _)) => (0..n).map(|i| Some(x.data()[i * d * c..(i + 1) * d * c].to_vec())).collect(),
        Err(_) if n > 1 => (0..n)
            .map(|i| invert(flow, &zs[i..i + 1], labels.map(|l| &l[i..i + 1])).pop().flatten())
            .collect(),
        Err(_) => vec![None],
    }
}

fn check_task(task: &InpaintTask, flow: &FlowModel) -> Result<()> {
    let (d, c) = (flow.cfg.positions(), flow.cfg.channels);
    if task.observed.shape() != [d, c] {
        return Err(Error::Shape { op: "inpaint", detail: format!("observation {:?} for a [{}, {}] flow", task.observed.shape(), d, c) });
    }
    if !(task.init_sigma >= 0.0 && task.prop_sigma >= 0.0) {
        return Err(Error::Invalid("proposal scales must be nonnegative".into()));
    }
    Ok(())
}

fn masked_noise(task: &InpaintTask, rng: &mut FlowRng, scale: f64) -> Vec<f64> {
    let e = normal_vec(rng, task.mask.len());
    e.iter().zip(&task.mask).map(|(&v, &m)| if m { scale * v } else { 0.0 }).collect()
}

/// Fills the masked region with noise and evaluates the flow there.
pub fn mh_init(task: &InpaintTask, flow: &FlowModel, labels: Option<&[usize]>, rng: &mut FlowRng) -> Result<ChainState> {
    check_task(task, flow)?;
    for _ in 0..INIT_RETRIES {
        let eps = masked_noise(task, rng, task.init_sigma);
        let fill: Vec<f64> = task.observed.data().iter().zip(&eps).map(|(o, e)| o + e).collect();
        let x = task.restore(&fill);
        if let Some((z, logp)) = evaluate(flow, core::slice::from_ref(&x), labels).pop().flatten() {
            return Ok(ChainState { x, z, logp });
        }
    }
    Err(Error::NonFinite { op: "mh_init" })
}

/// Candidate from a latent random walk on the masked coordinates. A
/// candidate the flow cannot evaluate has `logp = -inf`.
pub fn mh_propose(state: &ChainState, task: &InpaintTask, flow: &FlowModel, labels: Option<&[usize]>, rng: &mut FlowRng) -> Result<ChainState> {
    check_task(task, flow)?;
    let gamma = masked_noise(task, rng, task.prop_sigma);
    Ok(propose_batch(core::slice::from_ref(state), &[gamma], task, flow, labels).pop().expect("one candidate"))
}

fn propose_batch(
    states: &[ChainState],
    gammas: &[Vec<f64>],
    task: &InpaintTask,
    flow: &FlowModel,
    labels: Option<&[usize]>,
) -> Vec<ChainState> {
    let zs: Vec<Vec<f64>> = states
        .iter()
        .zip(gammas)
        .map(|(s, g)| s.z.iter().zip(g).map(|(z, g)| z + g).collect())
        .collect();
    let xs = invert(flow, &zs, labels);
    let restored: Vec<Option<Vec<f64>>> = xs.into_iter().map(|x| x.map(|x| task.restore(&x))).collect();
    let valid: Vec<Vec<f64>> = restored.iter().flatten().cloned().collect();
    let valid_labels: Option<Vec<usize>> =
        labels.map(|l| restored.iter().enumerate().filter(|(_, x)| x.is_some()).map(|(i, _)| l[i]).collect());
    let mut evals = evaluate(flow, &valid, valid_labels.as_deref()).into_iter();
    restored
        .into_iter()
        .zip(states)
        .map(|(x, s)| match x {
            Some(x) => match evals.next().flatten() {
                Some((z, logp)) => ChainState { x, z, logp },
                None => ChainState { x, z: s.z.clone(), logp: f64::NEG_INFINITY },
            },
            None => ChainState { x: s.x.clone(), z: s.z.clone(), logp: f64::NEG_INFINITY },
        })
        .collect()
}

/// Runs `chains` independent chains; chain `i` draws from the stream seeded
/// with `base_seed + i`. Chains are advanced together as one batch.
pub fn inpaint(task: &InpaintTask, flow: &FlowModel, class: Option<usize>, base_seed: u64, chains: usize) -> Result<InpaintOutcome> {
    check_task(task, flow)?;
    let labels: Option<Vec<usize>> = class.map(|c| vec![c; chains]);
    let mut rngs: Vec<FlowRng> = (0..chains as u64).map(|i| rng::stream(base_seed.wrapping_add(i), 0)).collect();
    let mut states = Vec::with_capacity(chains);
    for (i, r) in rngs.iter_mut().enumerate() {
        states.push(mh_init(task, flow, labels.as_ref().map(|l| &l[i..i + 1]), r)?);
    }
    let mut accepted = vec![0usize; chains];
    let mut trace = Vec::with_capacity(chains * task.iters);
    for iter in 1..=task.iters {
        let gammas: Vec<Vec<f64>> = rngs.iter_mut().map(|r| masked_noise(task, r, task.prop_sigma)).collect();
        let candidates = propose_batch(&states, &gammas, task, flow, labels.as_deref());
        for (i, cand) in candidates.into_iter().enumerate() {
            let u = rng::uniform(&mut rngs[i]);
            let ok = cand.logp.is_finite() && mh_accept(cand.logp, states[i].logp, u);
            if ok {
                states[i] = cand;
                accepted[i] += 1;
            }
            trace.push(TraceRow {
                chain: i,
                iter,
                logp: states[i].logp,
                accepted: ok,
                acceptance_rate_cum: accepted[i] as f64 / iter as f64,
            });
        }
    }
    let (d, c) = (flow.cfg.positions(), flow.cfg.channels);
    let samples = Tensor::new(vec![chains, d, c], states.iter().flat_map(|s| s.x.iter().copied()).collect())?;
    let acceptance = accepted.iter().map(|&a| if task.iters == 0 { 0.0 } else { a as f64 / task.iters as f64 }).collect();
    Ok(InpaintOutcome { samples, acceptance, trace })
}

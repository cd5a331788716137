//! Dataset generation, training, sampling, likelihood and inpainting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use afflow_core::data::{canonical_modes, correlated_modes, gen_2d_mixture, gen_synthetic_images, Dataset, ImageKind};
use afflow_core::guidance::{GuidanceSpec, GuidanceStats};
use afflow_core::inpaint::{inpaint as run_inpaint, InpaintOutcome, InpaintTask};
use afflow_core::optim::cosine_lr;
use afflow_core::rng;
use afflow_core::train::{dataset_nll, StepMetrics};
use afflow_core::Tensor;
use rand::Rng;

use crate::config::{DataShape, RunConfig};
use crate::error::{CliError, CliResult};
use crate::format::{encode_dataset, encode_pgm, load_checkpoint, save_checkpoint, save_dataset};
use crate::state::RunState;

pub const CHECKPOINT_FILE: &str = "checkpoint.afck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const DECODER_FILE: &str = "decoder.csv";
const METRICS_HEADER: &str = "step,nll_nats_per_dim,bits_per_dim,lr,grad_norm\n";

/// Random streams of decoder finetuning, clear of the flow's step streams.
const DECODER_STREAM: u64 = 1 << 48;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn append(path: &Path, header: &str, rows: &str) -> CliResult<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
    }
    text.push_str(rows);
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The two-coordinate target with an independent bimodal coordinate.
    Canonical,
    /// Standard bivariate normal with the given correlation.
    Correlated(f64),
    Images { kind: ImageKind, size: usize, classes: usize },
}

impl std::str::FromStr for DataSource {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "canonical" {
            return Ok(DataSource::Canonical);
        }
        if let Some(rho) = s.strip_prefix("correlated:") {
            let rho: f64 = rho.parse().map_err(|_| CliError::Validation(format!("bad correlation in {s:?}")))?;
            return Ok(DataSource::Correlated(rho));
        }
        let kind: ImageKind = s.parse().map_err(|e: afflow_core::Error| CliError::Validation(e.to_string()))?;
        Ok(DataSource::Images { kind, size: 8, classes: 2 })
    }
}

pub fn gen_data(source: &DataSource, n: usize, seed: u64) -> CliResult<Dataset> {
    Ok(match source {
        DataSource::Canonical => gen_2d_mixture(&canonical_modes(), n, seed)?,
        DataSource::Correlated(rho) => gen_2d_mixture(&correlated_modes(*rho), n, seed)?,
        DataSource::Images { kind, size, classes } => gen_synthetic_images(*kind, *size, n, *classes, seed)?,
    })
}

pub fn data_shape(data: &Dataset) -> DataShape {
    DataShape { positions: data.positions, channels: data.channels, num_classes: data.num_classes() }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: RunState,
    pub metrics: Vec<StepMetrics>,
    pub decoder_mse: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains from scratch, or from `resume`, writing metrics and checkpoints
/// into `opts.out`. On a numerical failure the last written checkpoint is
/// left in place.
pub fn train(config: RunConfig, data: &Dataset, resume: Option<&Path>, opts: &TrainOptions) -> CliResult<TrainReport> {
    let shape = data_shape(data);
    let mut state = match resume {
        Some(path) => {
            let s = RunState::from_checkpoint(&load_checkpoint(path)?)?;
            if s.shape.positions != shape.positions || s.shape.channels != shape.channels {
                return Err(CliError::Validation(format!("checkpoint was trained on D={} C={}, data has D={} C={}", s.shape.positions, s.shape.channels, shape.positions, shape.channels)));
            }
            s
        }
        None => RunState::new(config, shape)?,
    };
    create_dir(&opts.out)?;
    let ckpt = opts.out.join(CHECKPOINT_FILE);
    let metrics_path = opts.out.join(METRICS_FILE);
    if state.trainer.step_count() == 0 && metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
        let _ = fs::remove_file(opts.out.join(TIMING_FILE));
    }
    let total = state.trainer.cfg.total_steps;
    let every = state.config.train.checkpoint_every;
    let mut budget = opts.max_steps.unwrap_or(u64::MAX);
    let mut metrics = Vec::new();
    let (mut rows, mut timing) = (String::new(), String::new());
    let start = Instant::now();
    let flush = |rows: &mut String, timing: &mut String| -> CliResult<()> {
        append(&metrics_path, METRICS_HEADER, rows)?;
        append(&opts.out.join(TIMING_FILE), "step,wall_ms\n", timing)?;
        rows.clear();
        timing.clear();
        Ok(())
    };
    while state.trainer.step_count() < total && budget > 0 {
        let m = match state.trainer.step(data, state.decoder.as_ref().map(|(ae, _)| ae)) {
            Ok(m) => m,
            Err(e) => {
                flush(&mut rows, &mut timing)?;
                return Err(e.into());
            }
        };
        budget -= 1;
        let _ = writeln!(rows, "{},{},{},{},{}", m.step, m.nll, m.bits_per_dim, m.lr, m.grad_norm);
        let _ = writeln!(timing, "{},{}", m.step, start.elapsed().as_millis());
        metrics.push(m);
        if every > 0 && m.step % every == 0 {
            flush(&mut rows, &mut timing)?;
            save_checkpoint(&state.to_checkpoint()?, &ckpt)?;
        }
    }
    flush(&mut rows, &mut timing)?;
    let decoder_mse = if state.trainer.step_count() >= total { finetune_decoder(&mut state, data, &opts.out, &mut budget)? } else { Vec::new() };
    save_checkpoint(&state.to_checkpoint()?, &ckpt)?;
    Ok(TrainReport { state, metrics, decoder_mse, checkpoint: ckpt })
}

/// L2 finetuning of the decoder on noisy latents of the training images.
fn finetune_decoder(state: &mut RunState, data: &Dataset, out: &Path, budget: &mut u64) -> CliResult<Vec<f64>> {
    let Some(latent) = state.config.latent.clone() else { return Ok(Vec::new()) };
    let Some((ae, opt)) = state.decoder.as_mut() else { return Ok(Vec::new()) };
    let (seed, batch) = (state.config.seed, state.config.train.batch_size);
    let mut out_rows = String::new();
    let mut mses = Vec::new();
    while state.decoder_steps < latent.finetune_steps && *budget > 0 {
        let step = state.decoder_steps;
        let mut r = rng::stream(seed, DECODER_STREAM + step);
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..data.n)).collect();
        let lr = cosine_lr(step, latent.finetune_steps, latent.finetune_lr, state.config.train.lr_min)?;
        let mse = ae.finetune_step(opt, &data.batch(&idx), latent.noise, lr, &mut r)?;
        ae.params.round_to_f32();
        opt.round_to_f32();
        state.decoder_steps += 1;
        *budget -= 1;
        let _ = writeln!(out_rows, "{},{}", state.decoder_steps, mse);
        mses.push(mse);
    }
    append(&out.join(DECODER_FILE), "step,mse\n", &out_rows)?;
    Ok(mses)
}

pub fn load_state(ckpt: &Path) -> CliResult<RunState> {
    RunState::from_checkpoint(&load_checkpoint(ckpt)?)
}

fn class_labels(state: &RunState, class: Option<usize>, n: usize) -> CliResult<Option<Vec<usize>>> {
    let classes = state.model().cfg.num_classes;
    match class {
        None if classes > 0 => Ok(Some(vec![classes; n])),
        None => Ok(None),
        Some(_) if classes == 0 => Err(CliError::Validation("model is unconditional; drop --class".into())),
        Some(c) if c >= classes => Err(CliError::Validation(format!("class {c} out of range for {classes} classes"))),
        Some(c) => Ok(Some(vec![c; n])),
    }
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    /// Flow-space samples `[n, D, C]`.
    pub samples: Tensor,
    /// Decoded images `[n, H·W, 1]` for latent models.
    pub images: Option<Tensor>,
    pub stats: GuidanceStats,
}

/// Draws `n` samples. With no class, a conditional model samples the null
/// class. Writes `samples.afds` and, for latent models, one PGM per sample.
pub fn sample(state: &RunState, n: usize, class: Option<usize>, guidance: &GuidanceSpec, seed: u64, out: Option<&Path>) -> CliResult<SampleReport> {
    guidance.validate()?;
    let labels = class_labels(state, class, n)?;
    let mut r = rng::stream(seed, 0);
    let (samples, stats) = state.model().sample(n, labels.as_deref(), guidance, &mut r)?;
    let images = state.autoencoder().map(|ae| ae.decode(&samples)).transpose()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let stored = class.map(|c| vec![c as u32; n]);
        write(&dir.join("samples.afds"), encode_dataset(&Dataset::from_tensor(&samples, stored)?)?)?;
        if let (Some(img), Some(ae)) = (&images, state.autoencoder()) {
            let size = ae.cfg.image_size;
            for i in 0..n {
                write(&dir.join(format!("sample_{i:04}.pgm")), encode_pgm(img.row(i), size, size))?;
            }
        }
    }
    Ok(SampleReport { samples, images, stats })
}

/// Mean NLL in nats per dimension, with fresh noise per sample.
pub fn nll(state: &RunState, data: &Dataset, seed: u64) -> CliResult<f64> {
    let shape = data_shape(data);
    if shape.positions != state.shape.positions || shape.channels != state.shape.channels {
        return Err(CliError::Validation(format!("data has D={} C={}, model expects D={} C={}", shape.positions, shape.channels, state.shape.positions, state.shape.channels)));
    }
    let noise = state.trainer.cfg.input_noise;
    Ok(dataset_nll(state.model(), data, state.autoencoder(), noise, seed, 256)?)
}

/// Parses a mask such as `"0,3-5"` into per-position flags.
pub fn parse_mask(spec: &str, positions: usize) -> CliResult<Vec<bool>> {
    let mut mask = vec![false; positions];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CliError::Validation(format!("bad mask entry {part:?}"));
        let (a, b) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let i: usize = part.parse().map_err(|_| bad())?;
                (i, i)
            }
        };
        if a > b || b >= positions {
            return Err(CliError::Validation(format!("mask entry {part:?} outside 0..{positions}")));
        }
        mask[a..=b].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct InpaintOptions {
    pub index: usize,
    pub mask: String,
    pub chains: usize,
    pub iters: usize,
    pub init_sigma: f64,
    pub prop_sigma: f64,
    pub class: Option<usize>,
    pub seed: u64,
}

/// Inpaints the masked positions of `data[index]` in flow space. For latent
/// models the image is encoded first and the mask addresses latent tokens.
pub fn inpaint(state: &RunState, data: &Dataset, opts: &InpaintOptions, out: Option<&Path>) -> CliResult<InpaintOutcome> {
    if opts.index >= data.n {
        return Err(CliError::Validation(format!("index {} out of range for {} samples", opts.index, data.n)));
    }
    let cfg = &state.model().cfg;
    let x = data.batch(&[opts.index]);
    let x = match state.autoencoder() {
        Some(ae) => ae.encode(&x)?,
        None => x,
    };
    let (d, c) = (cfg.positions(), cfg.channels);
    let observed = x.reshape(&[d, c])?;
    let mask: Vec<bool> = parse_mask(&opts.mask, d)?.into_iter().flat_map(|m| std::iter::repeat_n(m, c)).collect();
    let mut task = InpaintTask::new(observed, mask)?;
    task.iters = opts.iters;
    task.init_sigma = opts.init_sigma;
    task.prop_sigma = opts.prop_sigma;
    let class = class_labels(state, opts.class, 1)?.map(|l| l[0]);
    let outcome = run_inpaint(&task, state.model(), class, opts.seed, opts.chains)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("inpaint.afds"), encode_dataset(&Dataset::from_tensor(&outcome.samples, None)?)?)?;
        let mut csv = String::from("chain,iter,logp,accepted,acceptance_rate_cum\n");
        for t in &outcome.trace {
            let _ = writeln!(csv, "{},{},{},{},{}", t.chain, t.iter, t.logp, t.accepted as u8, t.acceptance_rate_cum);
        }
        write(&dir.join("trace.csv"), csv)?;
    }
    Ok(outcome)
}

/// Saves a generated dataset.
pub fn write_dataset(data: &Dataset, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(data, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_parsing() {
        assert_eq!(parse_mask("0, 2-3", 5).unwrap(), vec![true, false, true, true, false]);
        assert_eq!(parse_mask("", 2).unwrap(), vec![false, false]);
        assert!(parse_mask("4", 4).is_err());
        assert!(parse_mask("3-1", 4).is_err());
        assert!(parse_mask("x", 4).is_err());
    }

    #[test]
    fn data_sources_parse() {
        assert_eq!("canonical".parse::<DataSource>().unwrap(), DataSource::Canonical);
        assert_eq!("correlated:0.8".parse::<DataSource>().unwrap(), DataSource::Correlated(0.8));
        assert!(matches!("bars".parse::<DataSource>().unwrap(), DataSource::Images { kind: ImageKind::Bars, .. }));
        assert!("stripes".parse::<DataSource>().is_err());
    }
}

//! The universality lab, the guidance verifier and the deep-shallow timing
//! benchmark.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use afflow_core::arch::ArchSpec;
use afflow_core::data::{canonical_modes, correlated_modes, gen_2d_mixture, gen_synthetic_images, mixture_log_pdf, Dataset, GaussianMode, ImageKind};
use afflow_core::guidance::{guided_gaussian, standard_cfg, GuidanceMode, GuidanceSpec, GuidanceStats};
use afflow_core::inpaint::{inpaint, InpaintTask};
use afflow_core::latent::{mse, score_denoise, Autoencoder, AutoencoderConfig, LATENT_NOISE};
use afflow_core::math;
use afflow_core::optim::{AdamW, AdamWConfig};
use afflow_core::rng::{self, normal_tensor};
use afflow_core::train::{dataset_nll, TrainConfig, Trainer};
use afflow_core::{FlowConfig, FlowModel, Tensor};
use rand::Rng;

use crate::error::{CliError, CliResult};

const DENOISE_STREAM: u64 = 1 << 40;

/// Differential entropy per dimension of a 2D mixture, by trapezoid
/// quadrature over a box of ±`span` standard deviations around every mode.
pub fn mixture_entropy_per_dim(modes: &[GaussianMode], span: f64) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let mut finest = f64::INFINITY;
    for m in modes {
        for a in 0..2 {
            let sd = m.cov[a][a].sqrt();
            lo[a] = lo[a].min(m.mean[a] - span * sd);
            hi[a] = hi[a].max(m.mean[a] + span * sd);
            finest = finest.min(sd);
        }
    }
    let h = finest / 16.0;
    let n: [usize; 2] = [0, 1].map(|a| ((hi[a] - lo[a]) / h).ceil() as usize + 1);
    let step = [0, 1].map(|a| (hi[a] - lo[a]) / (n[a] - 1) as f64);
    let mut total = 0.0;
    for i in 0..n[0] {
        let x = lo[0] + i as f64 * step[0];
        let wi = if i == 0 || i == n[0] - 1 { 0.5 } else { 1.0 };
        for j in 0..n[1] {
            let y = lo[1] + j as f64 * step[1];
            let wj = if j == 0 || j == n[1] - 1 { 0.5 } else { 1.0 };
            let lp = mixture_log_pdf(modes, [x, y]);
            total -= wi * wj * lp.exp() * lp;
        }
    }
    total * step[0] * step[1] / 2.0
}

/// Excess NLL of the best single Gaussian fit to a two-mode 1D mixture of
/// equal weights, means `±m` and standard deviation `s`.
pub fn single_gaussian_excess(m: f64, s: f64) -> f64 {
    let var = m * m + s * s;
    let gaussian = 0.5 * (2.0 * PI * E * var).ln();
    let (lo, hi, steps) = (-m - 12.0 * s, m + 12.0 * s, 200_000usize);
    let h = (hi - lo) / steps as f64;
    let pdf = |x: f64| 0.5 * (math::norm_pdf((x - m) / s) + math::norm_pdf((x + m) / s)) / s;
    let entropy: f64 = (0..=steps)
        .map(|i| {
            let p = pdf(lo + i as f64 * h);
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            if p > 0.0 {
                -w * p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        * h;
    gaussian - entropy
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalityBudget {
    pub steps: u64,
    pub batch: usize,
    pub width: usize,
    /// Total layers shared out over the blocks of every stack.
    pub layers: usize,
    pub lr: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Wall-clock cap per stack.
    pub time_limit: Duration,
}

impl Default for UniversalityBudget {
    fn default() -> Self {
        UniversalityBudget {
            steps: 1500,
            batch: 256,
            width: 32,
            layers: 6,
            lr: 1e-3,
            train_size: 100_000,
            test_size: 10_000,
            time_limit: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalityRow {
    pub blocks: usize,
    pub layers: Vec<usize>,
    pub params: usize,
    pub steps: u64,
    pub test_nll: f64,
    pub gap: f64,
    pub seconds: f64,
    /// Set when training stopped on a numerical failure.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalityReport {
    pub truth: f64,
    pub rows: Vec<UniversalityRow>,
}

/// Expected gap bound for a stack of `blocks`: `(true, b)` means gap > b.
pub fn universality_expectation(blocks: usize) -> (bool, f64) {
    match blocks {
        1 => (true, 1.0),
        2 => (true, 0.75),
        _ => (false, 0.25),
    }
}

impl UniversalityReport {
    pub fn row(&self, blocks: usize) -> Option<&UniversalityRow> {
        self.rows.iter().find(|r| r.blocks == blocks)
    }

    pub fn meets(&self, blocks: usize) -> bool {
        let (above, bound) = universality_expectation(blocks);
        self.row(blocks).is_some_and(|r| r.failure.is_none() && if above { r.gap > bound } else { r.gap < bound })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("blocks,layers,params,steps,test_nll,truth,gap,expected,pass,seconds\n");
        for r in &self.rows {
            let (above, bound) = universality_expectation(r.blocks);
            let layers: Vec<String> = r.layers.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}{},{},{:.1}",
                r.blocks,
                layers.join("-"),
                r.params,
                r.steps,
                r.test_nll,
                self.truth,
                r.gap,
                if above { ">" } else { "<" },
                bound,
                self.meets(r.blocks),
                r.seconds
            );
        }
        s
    }
}

/// Layers per block for a stack of `blocks` with `total` layers: a deep
/// block followed by two-layer shallow blocks.
pub fn stack_layers(blocks: usize, total: usize) -> CliResult<Vec<usize>> {
    let shallow = 2 * blocks.saturating_sub(1);
    if blocks == 0 || total <= shallow {
        return Err(CliError::Validation(format!("{total} layers cannot fill {blocks} blocks")));
    }
    let mut l = vec![total - shallow];
    l.extend(std::iter::repeat_n(2, blocks - 1));
    Ok(l)
}

fn universality_model(blocks: usize, budget: &UniversalityBudget, seed: u64) -> CliResult<FlowModel> {
    let layers = stack_layers(blocks, budget.layers)?;
    let arch = ArchSpec { deep_layers: layers[0], blocks, width: budget.width };
    let mut cfg = FlowConfig::new(arch, 1, 2, 1);
    cfg.layers = layers;
    Ok(FlowModel::new(cfg, seed)?)
}

/// Trains T = 1, 2, 3 stacks with equal layer budgets on the canonical
/// target and measures their held-out NLL gap to the exact entropy.
pub fn universality(budget: &UniversalityBudget, seed: u64, out: Option<&Path>) -> CliResult<UniversalityReport> {
    let modes = canonical_modes();
    let truth = mixture_entropy_per_dim(&modes, 12.0);
    let train = gen_2d_mixture(&modes, budget.train_size, seed)?;
    let test = gen_2d_mixture(&modes, budget.test_size, seed.wrapping_add(1))?;
    let mut rows = Vec::new();
    for blocks in 1..=3 {
        let model = universality_model(blocks, budget, seed)?;
        let params = model.params.trainable_count();
        let layers = model.cfg.layers.clone();
        let cfg = TrainConfig {
            batch_size: budget.batch,
            total_steps: budget.steps,
            optimizer: AdamWConfig { lr: budget.lr, weight_decay: 0.0, ..AdamWConfig::default() },
            lr_min: 1e-6,
            cond_dropout: 0.0,
            grad_clip: 10.0,
            input_noise: 0.0,
        };
        let mut trainer = Trainer::new(model, cfg, seed)?;
        let start = Instant::now();
        let mut failure = None;
        while trainer.step_count() < budget.steps && start.elapsed() < budget.time_limit {
            if let Err(e) = trainer.step(&train, None) {
                failure = Some(e.to_string());
                break;
            }
        }
        let test_nll = match failure {
            None => dataset_nll(&trainer.model, &test, None, 0.0, 0, 1000).unwrap_or_else(|e| {
                failure = Some(e.to_string());
                f64::NAN
            }),
            Some(_) => f64::NAN,
        };
        rows.push(UniversalityRow {
            blocks,
            layers,
            params,
            steps: trainer.step_count(),
            test_nll,
            gap: test_nll - truth,
            seconds: start.elapsed().as_secs_f64(),
            failure,
        });
    }
    let report = UniversalityReport { truth, rows };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("universality.csv");
        fs::write(&path, report.to_csv()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfgCase {
    pub mu_c: f64,
    pub sigma_c: f64,
    pub mu_u: f64,
    pub sigma_u: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgReport {
    pub trials: usize,
    /// Largest pointwise relative error of the closed form against the
    /// grid-normalised tilt.
    pub max_rel_err: f64,
    /// Largest residual of the precision identity, relative to the
    /// precisions involved.
    pub max_precision_residual: f64,
    pub s_one_exact: bool,
    pub sigma_never_grows: bool,
    pub worst: Option<CfgCase>,
}

impl CfgReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < 1e-6 && self.max_precision_residual < 1e-12 && self.s_one_exact && self.sigma_never_grows
    }
}

/// Random case with `σc ≤ σu`, i.e. an unclipped variance ratio.
pub fn random_cfg_case<R: Rng + ?Sized>(rng: &mut R) -> CfgCase {
    let sigma_c = rng.random_range(0.2..2.0);
    let s: f64 = rng.random_range(0.05..=1.0);
    CfgCase {
        mu_c: rng.random_range(-3.0..3.0),
        sigma_c,
        mu_u: rng.random_range(-3.0..3.0),
        sigma_u: sigma_c / s.sqrt(),
        omega: rng.random_range(0.0..8.0),
    }
}

/// Largest relative error between the closed-form guided density and the
/// tilt `p_c^(1+ω) p_u^(-ω)` normalised by trapezoid rule on `points` grid
/// points spanning ±`span` guided standard deviations.
pub fn tilt_rel_err(case: &CfgCase, points: usize, span: f64) -> CliResult<f64> {
    let (mu, sigma) = guided_gaussian(case.mu_c, case.sigma_c, case.mu_u, case.sigma_u, case.omega)?;
    let (lo, hi) = (mu - span * sigma, mu + span * sigma);
    let h = (hi - lo) / (points - 1) as f64;
    let log_tilt = |x: f64| {
        (1.0 + case.omega) * math::normal_log_pdf(x, case.mu_c, case.sigma_c) - case.omega * math::normal_log_pdf(x, case.mu_u, case.sigma_u)
    };
    let xs: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_tilt(x)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().enumerate().map(|(i, l)| if i == 0 || i == points - 1 { 0.5 } else { 1.0 } * (l - peak).exp()).sum::<f64>() * h;
    let log_z = peak + z.ln();
    Ok(xs.iter().zip(&logs).map(|(&x, &l)| ((l - log_z) - math::normal_log_pdf(x, mu, sigma)).exp_m1().abs()).fold(0.0, f64::max))
}

pub fn verify_cfg(points: usize, trials: usize, seed: u64, out: Option<&Path>) -> CliResult<CfgReport> {
    if points < 3 || trials == 0 {
        return Err(CliError::Validation("need at least 3 grid points and one trial".into()));
    }
    let mut r = rng::stream(seed, 0);
    let mut report = CfgReport { trials, max_rel_err: 0.0, max_precision_residual: 0.0, s_one_exact: true, sigma_never_grows: true, worst: None };
    let mut csv = String::from("trial,mu_c,sigma_c,mu_u,sigma_u,omega,rel_err,precision_residual\n");
    for t in 0..trials {
        let case = random_cfg_case(&mut r);
        let err = tilt_rel_err(&case, points, 10.0)?;
        let (_, sigma) = guided_gaussian(case.mu_c, case.sigma_c, case.mu_u, case.sigma_u, case.omega)?;
        let pc = 1.0 / (case.sigma_c * case.sigma_c);
        let pu = 1.0 / (case.sigma_u * case.sigma_u);
        let expected = (1.0 + case.omega) * pc - case.omega * pu;
        let residual = (1.0 / (sigma * sigma) - expected).abs() / ((1.0 + case.omega) * pc);
        report.max_precision_residual = report.max_precision_residual.max(residual);
        report.sigma_never_grows &= sigma <= case.sigma_c;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(case);
        }
        let equal = guided_gaussian(case.mu_c, case.sigma_c, case.mu_u, case.sigma_c, case.omega)?;
        report.s_one_exact &= equal == standard_cfg(case.mu_c, case.sigma_c, case.mu_u, case.omega);
        let _ = writeln!(csv, "{t},{},{},{},{},{},{err},{residual}", case.mu_c, case.sigma_c, case.mu_u, case.sigma_u, case.omega);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("verify_cfg.csv");
        fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub label: String,
    pub params: usize,
    /// Seconds per block in generation order, summed over repetitions.
    pub block_seconds: Vec<f64>,
    pub guided: Vec<bool>,
    pub passes: u64,
}

impl BenchRun {
    pub fn total(&self) -> f64 {
        self.block_seconds.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub deep_shallow: BenchRun,
    pub equal: BenchRun,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.deep_shallow.total() / self.equal.total()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,block,guided,seconds\n");
        for run in [&self.deep_shallow, &self.equal] {
            for (k, (t, g)) in run.block_seconds.iter().zip(&run.guided).enumerate() {
                let _ = writeln!(s, "{},{k},{g},{t}", run.label);
            }
            let _ = writeln!(s, "{},total,,{}", run.label, run.total());
        }
        s
    }
}

/// Times guided sampling block by block. Every conditioned block is guided
/// with the proposed rule at weight `omega`.
pub fn time_sampling(label: &str, model: &FlowModel, batch: usize, omega: f64, reps: usize, seed: u64) -> CliResult<BenchRun> {
    let blocks = model.cfg.blocks();
    let classes = model.cfg.num_classes;
    let labels: Option<Vec<usize>> = (classes > 0).then(|| (0..batch).map(|i| i % classes).collect());
    let mut r = rng::stream(seed, 0);
    let mut block_seconds = vec![0.0; blocks];
    let mut stats = GuidanceStats::default();
    let guided: Vec<bool> = (0..blocks).map(|k| classes > 0 && model.cfg.is_conditioned(k)).collect();
    for _ in 0..reps {
        let mut h: Tensor = normal_tensor(&mut r, &[batch, model.cfg.positions(), model.cfg.channels]);
        for k in 0..blocks {
            let cond = if model.cfg.is_conditioned(k) { labels.as_deref() } else { None };
            let guide = guided[k].then_some((GuidanceMode::Proposed, omega));
            let t = Instant::now();
            h = model.block_inverse(k, &h, cond, guide, &mut stats)?;
            block_seconds[k] += t.elapsed().as_secs_f64();
        }
    }
    Ok(BenchRun { label: label.into(), params: model.params.trainable_count(), block_seconds, guided, passes: stats.passes })
}

/// Compares deep-shallow sampling against an equal-sized stack whose blocks
/// all see the condition. Parameter counts must agree within 5%.
pub fn bench(deep_shallow: &FlowModel, equal: &FlowModel, batch: usize, reps: usize, seed: u64, out: Option<&Path>) -> CliResult<BenchReport> {
    let (a, b) = (deep_shallow.params.trainable_count() as f64, equal.params.trainable_count() as f64);
    if (a - b).abs() > 0.05 * a.max(b) {
        return Err(CliError::Validation(format!("parameter counts {a} and {b} differ by more than 5%")));
    }
    if batch == 0 || reps == 0 {
        return Err(CliError::Validation("batch and repetitions must be positive".into()));
    }
    // Warm-up so allocator and caches settle before either model is timed.
    time_sampling("warmup", equal, batch, 1.0, 1, seed)?;
    let mut ds = time_sampling("deep-shallow", deep_shallow, batch, 1.0, 0, seed)?;
    let mut eq = time_sampling("equal", equal, batch, 1.0, 0, seed)?;
    // Interleave repetitions so drift in machine load hits both models alike.
    for rep in 0..reps {
        let s = seed.wrapping_add(rep as u64);
        let d = time_sampling("deep-shallow", deep_shallow, batch, 1.0, 1, s)?;
        let e = time_sampling("equal", equal, batch, 1.0, 1, s)?;
        for (acc, run) in [(&mut ds, d), (&mut eq, e)] {
            acc.block_seconds.iter_mut().zip(&run.block_seconds).for_each(|(a, b)| *a += b);
            acc.passes += run.passes;
        }
    }
    let report = BenchReport { deep_shallow: ds, equal: eq };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("bench.csv");
        fs::write(&path, report.to_csv()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

/// Deep-shallow and equal-sized class-conditional stacks with the same
/// total depth and width, for the timing benchmark.
pub fn bench_pair(arch: ArchSpec, grid: usize, channels: usize, classes: usize, seed: u64) -> CliResult<(FlowModel, FlowModel)> {
    let layers = arch.layers();
    let total: usize = layers.iter().sum();
    let blocks = arch.blocks.saturating_sub(1).max(1);
    if !total.is_multiple_of(blocks) {
        return Err(CliError::Validation(format!("{total} layers do not split evenly over {blocks} equal blocks")));
    }
    let mut ds = FlowConfig::new(arch, grid, grid, channels);
    ds.num_classes = classes;
    let mut eq = ds.clone();
    eq.layers = vec![total / blocks; blocks];
    eq.condition_all_blocks = true;
    Ok((FlowModel::new(ds, seed)?, FlowModel::new(eq, seed)?))
}

/// Bars images at 4×4 with two classes: horizontal and vertical stripes.
pub fn toy_images(n: usize, seed: u64) -> CliResult<Dataset> {
    Ok(gen_synthetic_images(ImageKind::Bars, 4, n, 2, seed)?)
}

fn toy_train_config(steps: u64, batch: usize, lr: f64, cond_dropout: f64, input_noise: f64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        total_steps: steps,
        optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
        lr_min: 1e-6,
        cond_dropout,
        grad_clip: 10.0,
        input_noise,
    }
}

/// Class-conditional pixel-space flow trained on [`toy_images`].
pub fn toy_conditional_model(data: &Dataset, steps: u64, seed: u64) -> CliResult<FlowModel> {
    let side = (data.positions as f64).sqrt() as usize;
    let mut cfg = FlowConfig::new(ArchSpec { deep_layers: 4, blocks: 2, width: 32 }, side, side, data.channels);
    cfg.num_classes = data.num_classes();
    let model = FlowModel::new(cfg, seed)?;
    let mut trainer = Trainer::new(model, toy_train_config(steps, 64, 1e-3, 0.1, 0.05), seed)?;
    while trainer.step_count() < steps {
        trainer.step(data, None)?;
    }
    Ok(trainer.model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub mode: GuidanceMode,
    pub floor_hits: u64,
    /// Largest absolute sample coordinate, infinite if sampling failed.
    pub max_abs: f64,
    pub failure: Option<String>,
}

impl SweepRow {
    pub fn finite(&self) -> bool {
        self.failure.is_none() && self.max_abs.is_finite()
    }
}

/// Samples `n` images of `class` under both guidance rules at every weight,
/// from the same prior draws.
pub fn guidance_sweep(model: &FlowModel, class: usize, n: usize, omegas: &[f64], seed: u64) -> CliResult<Vec<SweepRow>> {
    let labels = vec![class; n];
    let mut rows = Vec::new();
    for &omega in omegas {
        for mode in [GuidanceMode::Proposed, GuidanceMode::Legacy] {
            let spec = GuidanceSpec::new(mode, omega)?;
            let mut r = rng::stream(seed, 0);
            let row = match model.sample(n, Some(&labels), &spec, &mut r) {
                Ok((x, stats)) => SweepRow {
                    omega,
                    mode,
                    floor_hits: stats.floor_hits,
                    max_abs: x.data().iter().fold(0.0, |m, v| m.max(v.abs())),
                    failure: None,
                },
                Err(e) if e.is_numerical() => SweepRow { omega, mode, floor_hits: 0, max_abs: f64::INFINITY, failure: Some(e.to_string()) },
                Err(e) => return Err(e.into()),
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseRow {
    pub seed: u64,
    /// Finetuned decoder applied to the noisy latent.
    pub decoder_mse: f64,
    /// One score step with the flow, then the frozen linear decoder.
    pub score_mse: f64,
    /// Frozen linear decoder applied to the noisy latent.
    pub linear_mse: f64,
}

/// Trains a noisy-latent flow and finetunes the decoder on 8×8 bars, then
/// compares two ways of removing the latent noise on held-out images.
pub fn denoise_comparison(flow_steps: u64, decoder_steps: u64, seed: u64) -> CliResult<DenoiseRow> {
    let noise = LATENT_NOISE;
    let train = gen_synthetic_images(ImageKind::Bars, 8, 4096, 4, seed)?;
    let test = gen_synthetic_images(ImageKind::Bars, 8, 256, 4, seed.wrapping_add(1))?;
    let ae_cfg = AutoencoderConfig { image_size: 8, patch: 2, hidden: 64 };
    let mut ae = Autoencoder::new(ae_cfg, seed)?;
    let frozen = ae.clone();
    let flow_cfg = FlowConfig::new(ArchSpec { deep_layers: 4, blocks: 2, width: 64 }, ae_cfg.grid(), ae_cfg.grid(), ae_cfg.channels());
    let mut trainer = Trainer::new(FlowModel::new(flow_cfg, seed)?, toy_train_config(flow_steps, 64, 1e-3, 0.0, noise), seed)?;
    while trainer.step_count() < flow_steps {
        trainer.step(&train, Some(&ae))?;
    }
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..AdamWConfig::default() }, &ae.params);
    let mut r = rng::stream(seed, DENOISE_STREAM);
    for step in 0..decoder_steps {
        let idx: Vec<usize> = (0..64).map(|_| r.random_range(0..train.n)).collect();
        let lr = afflow_core::optim::cosine_lr(step, decoder_steps, 1e-3, 1e-6)?;
        ae.finetune_step(&mut opt, &train.batch(&idx), noise, lr, &mut r)?;
    }
    let pixels = test.all();
    let noisy = ae.encode_noisy(&pixels, noise, &mut rng::stream(seed, DENOISE_STREAM + 1))?;
    let denoised = score_denoise(&trainer.model, &noisy, noise, None)?;
    Ok(DenoiseRow {
        seed,
        decoder_mse: mse(&ae.decode(&noisy)?, &pixels),
        score_mse: mse(&frozen.unpatchify_linear(&denoised)?, &pixels),
        linear_mse: mse(&frozen.unpatchify_linear(&noisy)?, &pixels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhReport {
    /// Mean and standard deviation of the inpainted coordinate over chains.
    pub mean: f64,
    pub std: f64,
    pub acceptance: f64,
    /// Held-out NLL per dimension of the trained flow and of the true density.
    pub flow_nll: f64,
    pub true_nll: f64,
}

/// Trains a flow on a standard bivariate normal with correlation `rho`,
/// observes the first coordinate and inpaints the second.
pub fn mh_correlated(rho: f64, observed: f64, chains: usize, train_steps: u64, seed: u64) -> CliResult<MhReport> {
    let modes = correlated_modes(rho);
    let train = gen_2d_mixture(&modes, 50_000, seed)?;
    let test = gen_2d_mixture(&modes, 10_000, seed.wrapping_add(1))?;
    let cfg = FlowConfig::new(ArchSpec { deep_layers: 2, blocks: 1, width: 32 }, 1, 2, 1);
    let mut trainer = Trainer::new(FlowModel::new(cfg, seed)?, toy_train_config(train_steps, 256, 1e-3, 0.0, 0.0), seed)?;
    while trainer.step_count() < train_steps {
        trainer.step(&train, None)?;
    }
    let flow_nll = dataset_nll(&trainer.model, &test, None, 0.0, 0, 1000)?;
    let true_nll = (0..test.n)
        .map(|i| {
            let s = test.sample(i);
            -mixture_log_pdf(&modes, [s[0] as f64, s[1] as f64])
        })
        .sum::<f64>()
        / (2 * test.n) as f64;
    let task = InpaintTask::new(Tensor::new(vec![2, 1], vec![observed, 0.0])?, vec![false, true])?;
    let outcome = inpaint(&task, &trainer.model, None, seed, chains)?;
    let filled: Vec<f64> = (0..chains).map(|i| outcome.samples.data()[2 * i + 1]).collect();
    let mean = filled.iter().sum::<f64>() / chains as f64;
    let var = filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (chains as f64 - 1.0).max(1.0);
    let acceptance = outcome.acceptance.iter().sum::<f64>() / chains.max(1) as f64;
    Ok(MhReport { mean, std: var.sqrt(), acceptance, flow_nll, true_nll })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn entropy_of_a_standard_normal_pair() {
        let modes = vec![GaussianMode { weight: 1.0, mean: [0.0, 0.0], cov: [[1.0, 0.0], [0.0, 1.0]] }];
        let h = mixture_entropy_per_dim(&modes, 10.0);
        assert!((h - 0.5 * (2.0 * PI * E).ln()).abs() < 1e-9, "{h}");
    }

    #[test]
    fn canonical_entropy_factorises() {
        // Independent coordinates: standard normal plus a two-mode mixture
        // whose modes are 40 standard deviations apart.
        let normal = 0.5 * (2.0 * PI * E).ln();
        let bimodal = normal + 0.1f64.ln() + LN_2;
        let h = mixture_entropy_per_dim(&canonical_modes(), 12.0);
        assert!((h - (normal + bimodal) / 2.0).abs() < 1e-8, "{h}");
    }

    #[test]
    fn single_gaussian_bound_is_about_2_3_nats() {
        let gap = single_gaussian_excess(2.0, 0.1);
        assert!((gap - 2.303).abs() < 5e-3, "{gap}");
    }

    #[test]
    fn stack_layers_keep_the_budget() {
        assert_eq!(stack_layers(1, 6).unwrap(), vec![6]);
        assert_eq!(stack_layers(3, 6).unwrap(), vec![2, 2, 2]);
        assert!(stack_layers(4, 6).is_err());
    }

    #[test]
    fn guided_density_matches_grid_tilt() {
        let mut r = rng::stream(3, 0);
        for _ in 0..50 {
            let case = random_cfg_case(&mut r);
            assert!(tilt_rel_err(&case, 2001, 10.0).unwrap() < 1e-6);
        }
    }

    #[test]
    fn verifier_passes_small_run() {
        let rep = verify_cfg(2001, 100, 1, None).unwrap();
        assert!(rep.passes(), "{rep:?}");
    }

    #[test]
    fn bench_pair_matches_parameters() {
        let arch: ArchSpec = "6(4)-32".parse().unwrap();
        let (ds, eq) = bench_pair(arch, 2, 2, 3, 0).unwrap();
        assert_eq!(eq.cfg.layers, vec![4, 4, 4]);
        let (a, b) = (ds.params.trainable_count() as f64, eq.params.trainable_count() as f64);
        assert!((a - b).abs() < 0.05 * a, "{a} vs {b}");
        let rep = bench(&ds, &eq, 2, 1, 0, None).unwrap();
        assert_eq!(rep.deep_shallow.guided, vec![true, false, false, false]);
        assert_eq!(rep.equal.guided, vec![true, true, true]);
    }
}

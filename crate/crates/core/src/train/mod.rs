//! Desk-scale supervised training: deterministic synthetic data with
//! multi-scale structure, L1 loss, Adam, PSNR evaluation, and the ablation
//! harness.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{checkpoint, forward, GRLConfig, Model, ModelNodes, ParamSet, Task};
use crate::tensor::{Graph, PoolMode, Scalar, Tensor};
use crate::util::{atomic_write, derive_seed};

const TAG_TRAIN_IMG: u64 = 1;
const TAG_TRAIN_NOISE: u64 = 2;
const TAG_EVAL_IMG: u64 = 3;
const TAG_EVAL_NOISE: u64 = 4;

/// Patches per validation pass.
pub const EVAL_PATCHES: usize = 16;
/// Cap used when writing PSNR of identical images to CSV.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Training hyperparameters (defaults follow the desk-scale protocol:
/// Adam at 2e-4, L1 loss, batch 4, 2000 iterations, 32×32 patches, σ=25).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub iters: usize,
    pub patch: usize,
    /// Gaussian noise std on the 0–255 scale; applied as σ/255.
    pub sigma: f64,
    pub seed: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            iters: 2000,
            patch: 32,
            sigma: 25.0,
            seed: 0,
            task: Task::Denoise,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 8 {
            return Err(Error::Config(format!("patch {} must be >= 8", self.patch)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        match self.task {
            Task::Denoise => {}
            Task::SrX2 => {
                if self.patch % 2 != 0 {
                    return Err(Error::Config("sr_x2 needs an even patch size".into()));
                }
            }
            Task::SrX4 => {
                return Err(Error::Config(
                    "training supports denoise and sr_x2 tasks".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One metrics log entry.
#[derive(Clone, Copy, Debug)]
pub struct MetricPoint {
    pub iter: usize,
    pub loss: f64,
    pub psnr_val: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub points: Vec<MetricPoint>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,psnr\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:.8},{:.4}\n",
                p.iter,
                p.loss,
                p.psnr_val.min(PSNR_CAP_DB)
            ));
        }
        s
    }
}

/// Deterministic synthetic image in `[0,1]` with cross-scale structure:
/// nested rectangles, sinusoidal gratings at octave scales, and a small
/// motif repeated at two scales.
pub fn synth_image<T: Scalar>(seed: u64, h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("synth_image needs h,w >= 8, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.5_f64; h * w];

    let n_rects = rng.random_range(2..5usize);
    for _ in 0..n_rects {
        let r0 = rng.random_range(0..h - 2);
        let c0 = rng.random_range(0..w - 2);
        let r1 = rng.random_range(r0 + 1..h);
        let c1 = rng.random_range(c0 + 1..w);
        let v = rng.random_range(0.1..0.9);
        for r in r0..r1 {
            for c in c0..c1 {
                img[r * w + c] = v;
            }
        }
    }

    let base_f = rng.random_range(0.02..0.05);
    let n_waves = rng.random_range(2..4usize);
    for k in 0..n_waves {
        let f = base_f * (1 << k) as f64;
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.04..0.12);
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let (ct, st) = (th.cos(), th.sin());
        for r in 0..h {
            for c in 0..w {
                img[r * w + c] += amp
                    * (2.0 * std::f64::consts::PI * f * (ct * c as f64 + st * r as f64) + phase)
                        .sin();
            }
        }
    }

    // repeated motif, lightly smoothed, stamped at scales 1 and 2
    const MH: usize = 6;
    const MW: usize = 6;
    let mut motif = [[0.0_f64; MW]; MH];
    for row in motif.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-0.15..0.15);
        }
    }
    let mut smooth = [[0.0_f64; MW]; MH];
    for i in 0..MH {
        for j in 0..MW {
            smooth[i][j] = (motif[i][j]
                + motif[(i + MH - 1) % MH][j]
                + motif[i][(j + MW - 1) % MW]
                + motif[(i + MH - 1) % MH][(j + MW - 1) % MW])
                / 4.0;
        }
    }
    for scale in [1usize, 2] {
        let (sh, sw) = (MH * scale, MW * scale);
        if sh >= h || sw >= w {
            continue;
        }
        for _ in 0..3 {
            let r0 = rng.random_range(0..h - sh);
            let c0 = rng.random_range(0..w - sw);
            for i in 0..sh {
                for j in 0..sw {
                    img[(r0 + i) * w + (c0 + j)] += smooth[i / scale][j / scale];
                }
            }
        }
    }

    let data = img
        .into_iter()
        .map(|v| T::from_f64c(v.clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(vec![1, h, w], data)
}

/// `img + σ/255 · N(0,1)`, unclamped (standard for denoising training).
pub fn add_noise<T: Scalar>(img: &Tensor<T>, sigma: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sigma / 255.0;
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + T::from_f64c(z * s)
        })
        .collect();
    Tensor::from_vec(img.shape().to_vec(), data).expect("shape preserved")
}

/// Mean absolute error between same-shaped tensors.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "l1_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut s = 0.0_f64;
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        s += (a - b).abs().to_f64c();
    }
    Ok(s / pred.numel() as f64)
}

/// `10·log10(peak²/MSE)`; +∞ for identical inputs (capped at 100 dB when
/// written to CSV).
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0_f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y).to_f64c();
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn clamp01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// Average-pool downsampling used as the SR degradation.
pub fn downsample<T: Scalar>(img: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    crate::tensor::kernels::pool2d(img, factor, false)
}

/// Adam state: bias-corrected first/second moments per parameter.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            m: params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One standard Adam update from the gradients staged in `params`.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64c(cfg.beta1);
    let b2 = T::from_f64c(cfg.beta2);
    let lr = T::from_f64c(cfg.lr);
    let eps = T::from_f64c(cfg.eps);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for (i, p) in params.entries_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.gradient.data();
        let w = p.value.data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] = w[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// A training sample: model input and target.
fn sample<T: Scalar>(
    cfg: &TrainConfig,
    img_seed: u64,
    noise_seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let clean = synth_image::<T>(img_seed, cfg.patch, cfg.patch)?;
    match cfg.task {
        Task::Denoise => {
            let noisy = add_noise(&clean, cfg.sigma, noise_seed);
            Ok((noisy, clean))
        }
        Task::SrX2 => Ok((downsample(&clean, 2)?, clean)),
        Task::SrX4 => unreachable!("rejected by validate"),
    }
}

/// Held-out evaluation report.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub std_psnr: f64,
    /// PSNR of the degraded input itself (clamped), same protocol.
    pub baseline_psnr: f64,
}

/// Evaluate on a deterministic held-out set (seed streams disjoint from
/// training by construction). Model output is clamped to `[0,1]` before
/// PSNR. Patches fan out in parallel with an order-preserving collect, so
/// the aggregate is thread-count independent.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    n_patches: usize,
    seed: u64,
) -> Result<EvalReport> {
    if model.config.task != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint task {:?} does not match requested task {:?}",
            model.config.task, cfg.task
        )));
    }
    let reports: Vec<(f64, f64)> = (0..n_patches)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let img_seed = derive_seed(seed, TAG_EVAL_IMG, i as u64, 0);
            let noise_seed = derive_seed(seed, TAG_EVAL_NOISE, i as u64, 0);
            let clean = synth_image::<T>(img_seed, cfg.patch, cfg.patch)?;
            let (input, target) = match cfg.task {
                Task::Denoise => (add_noise(&clean, cfg.sigma, noise_seed), clean),
                Task::SrX2 => (downsample(&clean, 2)?, clean),
                Task::SrX4 => unreachable!("rejected by validate"),
            };
            let out = clamp01(&model.forward_value(&input)?);
            let p = psnr(&out, &target, 1.0)?;
            let baseline = match cfg.task {
                Task::Denoise => psnr(&clamp01(&input), &target, 1.0)?,
                _ => {
                    // nearest-neighbor upscale of the LR input
                    let (c, h, w) = input.dims3()?;
                    let s = cfg.task.scale();
                    let mut up = Tensor::<T>::zeros(&[c, h * s, w * s]);
                    for ch in 0..c {
                        for r in 0..h * s {
                            for cc in 0..w * s {
                                let v = input.at3(ch, r / s, cc / s);
                                up.data_mut()[(ch * h * s + r) * w * s + cc] = v;
                            }
                        }
                    }
                    psnr(&clamp01(&up), &target, 1.0)?
                }
            };
            Ok((p, baseline))
        })
        .collect::<Result<_>>()?;
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.0.min(PSNR_CAP_DB)).sum::<f64>() / n;
    let var = reports
        .iter()
        .map(|r| (r.0.min(PSNR_CAP_DB) - mean).powi(2))
        .sum::<f64>()
        / n;
    let baseline = reports.iter().map(|r| r.1.min(PSNR_CAP_DB)).sum::<f64>() / n;
    Ok(EvalReport {
        mean_psnr: mean,
        std_psnr: var.sqrt(),
        baseline_psnr: baseline,
    })
}

/// Result of a training run. `best_params` snapshots the parameters at the
/// best validation PSNR (what the saved checkpoint holds).
pub struct TrainOutcome<T> {
    pub metrics: Metrics,
    pub best_psnr: f64,
    pub best_iter: usize,
    pub best_params: Vec<Tensor<T>>,
    pub checkpoint_path: Option<PathBuf>,
}

fn train_sidecar_extra(cfg: &TrainConfig) -> serde_json::Map<String, serde_json::Value> {
    let mut extra = serde_json::Map::new();
    extra.insert(
        "train".to_string(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    extra
}

/// Deterministic training loop: fixed data order, fixed init, metrics every
/// 100 iterations, best-PSNR checkpoint. Aborts with
/// [`Error::Divergence`] on a non-finite loss.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.config.task != cfg.task {
        return Err(Error::Config(format!(
            "model task {:?} does not match training task {:?}",
            model.config.task, cfg.task
        )));
    }
    let mut state = AdamState::new(&model.params);
    let mut metrics = Metrics::default();
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_iter = 0usize;
    let mut best_params: Vec<Tensor<T>> =
        model.params.entries().iter().map(|p| p.value.clone()).collect();
    let ckpt_path = out_dir.map(|d| d.join("best.grlw"));

    let record = |model: &Model<T>,
                      metrics: &mut Metrics,
                      best_psnr: &mut f64,
                      best_iter: &mut usize,
                      best_params: &mut Vec<Tensor<T>>,
                      iter: usize,
                      loss: f64|
     -> Result<()> {
        let report = evaluate(model, cfg, EVAL_PATCHES, cfg.seed)?;
        metrics.points.push(MetricPoint {
            iter,
            loss,
            psnr_val: report.mean_psnr,
        });
        if report.mean_psnr > *best_psnr {
            *best_psnr = report.mean_psnr;
            *best_iter = iter;
            *best_params = model.params.entries().iter().map(|p| p.value.clone()).collect();
            if let Some(path) = &ckpt_path {
                checkpoint::save(model, path, train_sidecar_extra(cfg))?;
            }
        }
        Ok(())
    };

    let inv_batch = T::from_f64c(1.0 / cfg.batch as f64);
    let mut last_loss = if cfg.iters == 0 {
        // no training batches; log the initial batch loss for the record
        let (input, target) = sample::<T>(
            cfg,
            derive_seed(cfg.seed, TAG_TRAIN_IMG, 0, 0),
            derive_seed(cfg.seed, TAG_TRAIN_NOISE, 0, 0),
        )?;
        let out = model.forward_value(&input)?;
        l1_loss(&out, &target)?
    } else {
        f64::NAN
    };
    for iter in 0..cfg.iters {
        let mut g = Graph::<T>::new();
        let nodes = ModelNodes::insert(&mut g, model)?;
        let mut item_losses = Vec::with_capacity(cfg.batch);
        for slot in 0..cfg.batch {
            let img_seed = derive_seed(cfg.seed, TAG_TRAIN_IMG, iter as u64, slot as u64);
            let noise_seed = derive_seed(cfg.seed, TAG_TRAIN_NOISE, iter as u64, slot as u64);
            let (input, target) = sample::<T>(cfg, img_seed, noise_seed)?;
            let inp = g.leaf(input)?;
            let tgt = g.leaf(target)?;
            let out = forward(&mut g, model, &nodes, inp, None)?;
            item_losses.push(g.l1_loss(out, tgt)?);
        }
        let mut total = item_losses[0];
        for &l in &item_losses[1..] {
            total = g.add(total, l)?;
        }
        let loss_node = g.scale(total, inv_batch)?;
        let loss = g.value(loss_node).data()[0].to_f64c();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at iteration {iter}")));
        }
        last_loss = loss;

        if iter % 100 == 0 {
            record(
                model,
                &mut metrics,
                &mut best_psnr,
                &mut best_iter,
                &mut best_params,
                iter,
                loss,
            )?;
        }

        let grads = g.backward(loss_node)?;
        model.params.zero_grads();
        g.accumulate_param_grads(&grads, model.params.entries_mut(), T::one());
        adam_step(&mut model.params, &mut state, cfg);
    }

    // closing eval (also the only one when iters == 0)
    record(
        model,
        &mut metrics,
        &mut best_psnr,
        &mut best_iter,
        &mut best_params,
        cfg.iters,
        last_loss,
    )?;

    if let Some(dir) = out_dir {
        atomic_write(&dir.join("metrics.csv"), metrics.to_csv().as_bytes())?;
    }
    Ok(TrainOutcome {
        metrics,
        best_psnr,
        best_iter,
        best_params,
        checkpoint_path: ckpt_path,
    })
}

/// Ablation axes mirroring the similarity-measure and anchor-projection
/// studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Measure,
    AnchorProj,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub option: String,
    pub final_psnr: f64,
    pub param_count: usize,
}

pub const ABLATE_CSV_HEADER: &str = "option,final_psnr,param_count";

/// Train the base configuration once per option value on the given axis.
pub fn ablate<T: Scalar>(
    axis: AblationAxis,
    base: GRLConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, GRLConfig)> = match axis {
        AblationAxis::Measure => [
            crate::attention::SimilarityMeasure::Dot,
            crate::attention::SimilarityMeasure::NegativeSqEuclidean,
        ]
        .into_iter()
        .map(|m| {
            let mut c = base;
            c.measure = m;
            (
                serde_json::to_value(m).unwrap().as_str().unwrap().to_string(),
                c,
            )
        })
        .collect(),
        AblationAxis::AnchorProj => [(PoolMode::Avg, "avgpool_linear"), (PoolMode::Max, "maxpool_linear")]
            .into_iter()
            .map(|(p, name)| {
                let mut c = base;
                c.anchor.pool = p;
                (name.to_string(), c)
            })
            .collect(),
    };
    let mut rows = Vec::new();
    for (name, mcfg) in variants {
        let mut model = Model::<T>::init(mcfg, cfg.seed)?;
        let outcome = train(&mut model, cfg, None)?;
        rows.push(AblationRow {
            option: name,
            final_psnr: outcome.best_psnr,
            param_count: model.param_count(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{}\n",
            r.option,
            r.final_psnr.min(PSNR_CAP_DB),
            r.param_count
        ));
    }
    s
}

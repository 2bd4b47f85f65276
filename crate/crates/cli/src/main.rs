//! `grl` — batch front end for benchmarks, oracle diagnostics, training,
//! evaluation, and attention-map dumps. Built for scripts and CI: every
//! subcommand is deterministic given its flags (wall-clock columns
//! excepted), file outputs are atomic, and exit codes are stable:
//! 0 = ok, 2 = usage/config error, 3 = numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grl_core::attention::{kernels as akern, SimilarityMeasure};
use grl_core::model::{checkpoint, GRLConfig, Model, Task};
use grl_core::oracle;
use grl_core::tensor::flops;
use grl_core::train::{
    ablate, ablation_csv, evaluate, train, AblationAxis, TrainConfig, EVAL_PATCHES,
};
use grl_core::util::atomic_write;
use grl_core::{Error, Tensor, Tensor64};

#[derive(Parser)]
#[command(name = "grl", version, about = "anchored stripe attention toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MeasureArg {
    Dot,
    NegativeSqEuclidean,
}

impl From<MeasureArg> for SimilarityMeasure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Dot => SimilarityMeasure::Dot,
            MeasureArg::NegativeSqEuclidean => SimilarityMeasure::NegativeSqEuclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Measure,
    AnchorProj,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Denoise,
    SrX2,
    SrX4,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::SrX2 => Task::SrX2,
            TaskArg::SrX4 => Task::SrX4,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Count flops and time exact vs. anchored attention.
    Bench {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        na: usize,
        #[arg(long)]
        d: usize,
        /// Wall-time repetitions (median reported).
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the exact attention map against the anchored approximation.
    Oracle {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        na: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MeasureArg::Dot)]
        measure: MeasureArg,
        /// Directory for exact.pgm / approx.pgm heat maps.
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
        /// Diagnostics CSV path (header + one row).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from a JSON config ({"model": {...}, "train": {...}}).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out synthetic set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = EVAL_PATCHES)]
        n: usize,
        /// Expected task; rejected if the checkpoint sidecar disagrees.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Dump per-block exact/approx attention maps of a trained model.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch size (defaults to the training patch in the sidecar).
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Train once per option value on an ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("GRL_THREADS") {
        if let Ok(t) = threads.parse::<usize>() {
            if t >= 1 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .ok();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(3),
            }
        }
    }
}

fn emit(out: Option<&Path>, content: &str) -> grl_core::Result<()> {
    match out {
        Some(path) => atomic_write(path, content.as_bytes()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> grl_core::Result<()> {
    match cmd {
        Cmd::Bench {
            n,
            na,
            d,
            repeats,
            out,
        } => bench(n, na, d, repeats, out.as_deref()),
        Cmd::Oracle {
            n,
            na,
            d,
            seed,
            measure,
            heatmap_dir,
            out,
        } => oracle_cmd(n, na, d, seed, measure.into(), heatmap_dir.as_deref(), out.as_deref()),
        Cmd::Train { config, out } => train_cmd(&config, &out),
        Cmd::Eval {
            checkpoint,
            seed,
            n,
            task,
        } => eval_cmd(&checkpoint, seed, n, task.map(Into::into)),
        Cmd::DumpAttn {
            checkpoint,
            out,
            seed,
            patch,
        } => dump_attn(&checkpoint, &out, seed, patch),
        Cmd::Ablate { axis, out, iters } => {
            let axis = match axis {
                AxisArg::Measure => AblationAxis::Measure,
                AxisArg::AnchorProj => AblationAxis::AnchorProj,
            };
            let cfg = TrainConfig {
                iters,
                ..Default::default()
            };
            let rows = ablate::<f32>(axis, GRLConfig::default(), &cfg)?;
            emit(out.as_deref(), &ablation_csv(&rows))
        }
    }
}

fn bench(n: usize, na: usize, d: usize, repeats: usize, out: Option<&Path>) -> grl_core::Result<()> {
    if na == 0 || na > n || d == 0 {
        return Err(Error::Config(format!(
            "bench requires n >= na >= 1 and d >= 1 (got n={n}, na={na}, d={d})"
        )));
    }
    let repeats = repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE5C);
    let q = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
    let a = Tensor::<f32>::randn(&[na, d], 1.0, &mut rng);

    let mut wall_exact = Vec::with_capacity(repeats);
    let mut wall_anchored = Vec::with_capacity(repeats);
    let mut flops_exact = 0u64;
    let mut flops_anchored = 0u64;
    for _ in 0..repeats {
        flops::reset();
        let t0 = Instant::now();
        let _ = akern::exact_attention(&q, &k, &v, SimilarityMeasure::Dot)?;
        wall_exact.push(t0.elapsed().as_secs_f64() * 1e3);
        flops_exact = flops::total();

        flops::reset();
        let t0 = Instant::now();
        let _ = akern::anchored_attention(&q, &k, &v, &a, SimilarityMeasure::Dot)?;
        wall_anchored.push(t0.elapsed().as_secs_f64() * 1e3);
        flops_anchored = flops::total();
    }
    let rep = oracle::complexity_report(n, na, d, SimilarityMeasure::Dot);
    if flops_exact != rep.flops_exact || flops_anchored != rep.flops_anchored {
        return Err(Error::Internal(format!(
            "instrumented counters ({flops_exact}, {flops_anchored}) do not match the closed form \
             ({}, {})",
            rep.flops_exact, rep.flops_anchored
        )));
    }
    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let csv = format!(
        "n,na,d,flops_exact,flops_anchored,wall_exact_ms,wall_anchored_ms\n\
         {n},{na},{d},{flops_exact},{flops_anchored},{:.3},{:.3}\n",
        median(&mut wall_exact),
        median(&mut wall_anchored),
    );
    emit(out, &csv)
}

fn oracle_cmd(
    n: usize,
    na: usize,
    d: usize,
    seed: u64,
    measure: SimilarityMeasure,
    heatmap_dir: Option<&Path>,
    out: Option<&Path>,
) -> grl_core::Result<()> {
    if na == 0 || na > n || n % na != 0 {
        return Err(Error::Config(format!(
            "oracle requires na dividing n (got n={n}, na={na}); anchors are built by block-averaging keys"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // σ=2 gaussian tokens: sharp enough maps for a meaningful comparison
    let q = Tensor64::randn(&[n, d], 2.0, &mut rng);
    let k = Tensor64::randn(&[n, d], 2.0, &mut rng);
    // anchors summarize the keys: mean over blocks of n/na consecutive rows
    let block = n / na;
    let mut a = Tensor64::zeros(&[na, d]);
    for i in 0..na {
        for t in 0..d {
            let mut s = 0.0;
            for b in 0..block {
                s += k.at2(i * block + b, t);
            }
            a.data_mut()[i * d + t] = s / block as f64;
        }
    }

    let diag = oracle::attention_maps(&q, &k, &a, measure)?;
    let rep = oracle::complexity_report(n, na, d, measure);

    println!(
        "n={n},na={na},d={d},pearson={},flag={},rank_ok={},row_sum_err={:e},flops_exact={},flops_anchored={}",
        if diag.degenerate {
            "nan".to_string()
        } else {
            format!("{:.6}", diag.pearson)
        },
        if diag.degenerate { "degenerate" } else { "ok" },
        diag.rank_bound_ok,
        diag.max_row_sum_err,
        rep.flops_exact,
        rep.flops_anchored
    );

    if let Some(path) = out {
        let csv = format!(
            "{}\n{}\n",
            oracle::DIAG_CSV_HEADER,
            oracle::diag_csv_row(&diag, &rep)
        );
        atomic_write(path, csv.as_bytes())?;
    }
    if let Some(dir) = heatmap_dir {
        std::fs::create_dir_all(dir)?;
        oracle::dump_heatmap(&diag.exact_map, &dir.join("exact.pgm"))?;
        oracle::dump_heatmap(&diag.approx_map, &dir.join("approx.pgm"))?;
    }
    Ok(())
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct TrainFileConfig {
    model: GRLConfig,
    train: TrainConfig,
}

fn train_cmd(config: &Path, out: &Path) -> grl_core::Result<()> {
    let cfg: TrainFileConfig = serde_json::from_slice(&std::fs::read(config)?)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.model.task != cfg.train.task {
        return Err(Error::Config(format!(
            "model task {:?} does not match training task {:?}",
            cfg.model.task, cfg.train.task
        )));
    }
    std::fs::create_dir_all(out)?;
    let mut model = Model::<f32>::init(cfg.model, cfg.train.seed)?;
    let t0 = Instant::now();
    let outcome = train(&mut model, &cfg.train, Some(out))?;
    println!(
        "trained {} iters in {:.1}s; best val PSNR {:.3} dB at iter {}; checkpoint {}",
        cfg.train.iters,
        t0.elapsed().as_secs_f64(),
        outcome.best_psnr,
        outcome.best_iter,
        outcome
            .checkpoint_path
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    Ok(())
}

fn eval_cmd(ckpt: &Path, seed: u64, n: usize, task: Option<Task>) -> grl_core::Result<()> {
    let (model, sidecar) = checkpoint::load::<f32>(ckpt)?;
    if let Some(t) = task {
        if t != model.config.task {
            return Err(Error::Config(format!(
                "requested task {t:?} but checkpoint sidecar says {:?}",
                model.config.task
            )));
        }
    }
    let train_cfg: TrainConfig = match sidecar.extra.get("train") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TrainConfig {
            task: model.config.task,
            ..Default::default()
        },
    };
    let report = evaluate(&model, &train_cfg, n, seed)?;
    println!(
        "psnr_mean={:.4},psnr_std={:.4},baseline={:.4},n={n},seed={seed}",
        report.mean_psnr, report.std_psnr, report.baseline_psnr
    );
    Ok(())
}

fn dump_attn(ckpt: &Path, out: &Path, seed: u64, patch: Option<usize>) -> grl_core::Result<()> {
    let (model, sidecar) = checkpoint::load::<f64>(ckpt)
        .or_else(|_| checkpoint::load::<f32>(ckpt).map(|(m, s)| (widen(&m), s)))?;
    let train_cfg: TrainConfig = match sidecar.extra.get("train") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TrainConfig::default(),
    };
    let patch = patch.unwrap_or(train_cfg.patch);
    let clean = grl_core::train::synth_image::<f64>(seed, patch, patch)?;
    let input = match model.config.task {
        Task::Denoise => grl_core::train::add_noise(&clean, train_cfg.sigma, seed.wrapping_add(1)),
        _ => grl_core::train::downsample(&clean, model.config.task.scale())?,
    };
    let (_, probes) = model.forward_with_probes(&input)?;

    std::fs::create_dir_all(out)?;
    let mut csv = String::from(oracle::DIAG_CSV_HEADER);
    csv.push('\n');
    let mut pearsons = Vec::new();
    for (i, probe) in probes.iter().enumerate() {
        let diag = oracle::attention_maps(&probe.q, &probe.k, &probe.a, probe.measure)?;
        let rep = oracle::complexity_report(
            probe.q.shape()[0],
            probe.a.shape()[0],
            probe.q.shape()[1],
            probe.measure,
        );
        csv.push_str(&oracle::diag_csv_row(&diag, &rep));
        csv.push('\n');
        if !diag.degenerate {
            pearsons.push(diag.pearson);
        }
        oracle::dump_heatmap(&diag.exact_map, &out.join(format!("exact_{i:03}.pgm")))?;
        oracle::dump_heatmap(&diag.approx_map, &out.join(format!("approx_{i:03}.pgm")))?;
    }
    atomic_write(&out.join("diagnostics.csv"), csv.as_bytes())?;
    let mean = if pearsons.is_empty() {
        f64::NAN
    } else {
        pearsons.iter().sum::<f64>() / pearsons.len() as f64
    };
    println!(
        "blocks={},mean_pearson={:.4},min_pearson={:.4}",
        probes.len(),
        mean,
        pearsons.iter().cloned().fold(f64::INFINITY, f64::min)
    );
    Ok(())
}

/// Re-express an f32 checkpoint in f64 for diagnostics.
fn widen(model: &Model<f32>) -> Model<f64> {
    let mut m64 = Model::<f64>::init(model.config, 0).expect("config already validated");
    for (dst, src) in m64
        .params
        .entries_mut()
        .iter_mut()
        .zip(model.params.entries())
    {
        let data: Vec<f64> = src.value.data().iter().map(|&v| v as f64).collect();
        dst.value = Tensor64::from_vec(src.value.shape().to_vec(), data).expect("same shape");
    }
    m64
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lowshot::checkpoint::Checkpoint;
use lowshot::harness::dataset::{load_image, save_png};
use lowshot::harness::gradcheck::{check_objective, suite_options, Objective};
use lowshot::harness::plot::{emit_plot, AxesSpec};
use lowshot::harness::results::{aggregate, aggregates_to_csv, write_atomic};
use lowshot::harness::sweep::{
    run_colorization, run_cs_sweep, workers_from_env, ExperimentSpec, ModelBank, RunManifest, SweepOptions,
    SweepOutcome, Task,
};
use lowshot::harness::synthetic;
use lowshot::invert::{invert, schedule_ratio, solve_untrained, InversionConfig};
use lowshot::operators::{add_noise, gaussian_operator_for_ratio, luma_operator};
use lowshot::pretrain::{fit_latent_gaussian, pretrain, LossKind};
use lowshot::ExecMode;

#[derive(Parser)]
#[command(name = "lowshot", version, about = "Low-shot decoder priors for image inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train decoders on the experiment's shot images.
    Pretrain(PretrainArgs),
    /// Reconstruct a single image from simulated measurements.
    Invert(InvertArgs),
    /// Run a compressed-sensing sweep.
    SweepCs(SweepArgs),
    /// Run the colorization experiment.
    Colorize(SweepArgs),
    /// Plot mean PSNR against compression ratio from a result CSV.
    Plot(PlotArgs),
    /// Finite-difference check of all objective gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic image dataset as PNG files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train only this shot count (default: every count in the config).
    #[arg(long)]
    shots: Option<usize>,
    /// Train only this loss (default: every loss in the config).
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Retrain even when the checkpoint exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InvertArgs {
    /// Pre-trained checkpoint (omit with --untrained).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ground-truth image; measurements are simulated from it.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    /// Use the luma operator instead of Gaussian measurements.
    #[arg(long)]
    colorize: bool,
    /// Run the untrained-network baseline.
    #[arg(long)]
    untrained: bool,
    /// Decoder resolution for --untrained (checkpoints carry their own).
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    stage2_iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    root_seed: Option<u64>,
    #[arg(long)]
    test_images: Option<usize>,
    /// Concurrent cells (default: $LOWSHOT_WORKERS or the core count).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
    /// Plot only rows of this task.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    points: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Blobs,
    Tinted,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    generator: Generator,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Invert(a) => cmd_invert(a),
        Command::SweepCs(a) => cmd_sweep(a, Task::Cs),
        Command::Colorize(a) => cmd_sweep(a, Task::Colorization),
        Command::Plot(a) => cmd_plot(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let spec = ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<bool> {
    let spec = load_spec(&a.config)?;
    let data = spec.load_data()?;
    let shots: Vec<usize> = a.shots.map_or_else(|| spec.shots.clone(), |s| vec![s]);
    let losses: Vec<LossKind> = a.loss.map_or_else(|| spec.losses.clone(), |l| vec![l]);
    let mut cfg = spec.pretrain.clone();
    cfg.descriptor = spec.descriptor;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for &s in &shots {
        for &loss in &losses {
            let path = spec.checkpoint_path(s, loss);
            if path.exists() && !a.force {
                log::info!("{} exists, skipping (use --force to retrain)", path.display());
                continue;
            }
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let set = data.shot_set(s)?;
            let cfg = lowshot::pretrain::PretrainConfig { loss, ..cfg.clone() };
            log::info!("pre-training S={s}, loss={loss} for {} iterations", cfg.iterations);
            match pretrain(&set, &cfg) {
                Ok(r) => {
                    r.to_checkpoint(&cfg, &set).save(&path)?;
                    log::info!(
                        "wrote {} (final loss {:e})",
                        path.display(),
                        r.loss_history.last().copied().unwrap_or(f64::NAN)
                    );
                }
                Err(f) => {
                    let fallback = path.with_extension("failed.ckpt");
                    f.last_good.save(&fallback)?;
                    bail!("{f}; last good state written to {}", fallback.display());
                }
            }
        }
    }
    Ok(true)
}

fn cmd_invert(a: InvertArgs) -> Result<bool> {
    let (params, fit) = match (&a.checkpoint, a.untrained) {
        (Some(path), false) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let fit = fit_latent_gaussian(&ck.latents)?;
            (Some(ck.decoder), Some(fit))
        }
        (None, true) => (None, None),
        _ => bail!("pass exactly one of --checkpoint and --untrained"),
    };
    let descriptor = params.as_ref().map_or(
        lowshot::decoder::Descriptor {
            resolution: a.resolution,
            ..Default::default()
        },
        |p| p.descriptor,
    );
    let truth = load_image(&a.image, descriptor.resolution)?;
    let op = Arc::new(if a.colorize {
        luma_operator(descriptor.resolution, descriptor.resolution)
    } else {
        gaussian_operator_for_ratio(a.ratio, truth.len(), a.seed)?
    });
    let y = add_noise(&op.apply(&truth, ExecMode::default())?, a.noise_std, a.seed ^ 0x6e6f_6973_65)?;
    let result = match (params, fit) {
        (Some(p), Some(fit)) => {
            let mut cfg = InversionConfig {
                seed: a.seed,
                restarts: a.restarts,
                ..Default::default()
            };
            if let Some(n) = a.stage1_iterations {
                cfg.stage1_iterations = n;
            }
            if let Some(n) = a.stage2_iterations {
                cfg.stage2_iterations = n;
            }
            let r = invert(&y, &op, &p, &fit, &cfg)?;
            log::info!(
                "stage 1 loss {:e}, stage 2 loss {:e}",
                r.stage1.final_loss,
                r.stage2.final_loss
            );
            r
        }
        _ => solve_untrained(&y, &op, descriptor, schedule_ratio(&op), a.seed)?,
    }
    .with_truth(&truth)?;
    save_png(&result.reconstruction, &a.out)?;
    println!(
        "{}: PSNR {:.2} dB (m/n = {:.4})",
        a.out.display(),
        result.psnr.unwrap_or(f64::NAN),
        op.compression_ratio()
    );
    Ok(true)
}

fn report(outcome: &SweepOutcome) -> bool {
    for a in aggregate(&outcome.rows) {
        println!(
            "{:<13} ratio {:<8} S={:<3} {:<4} {:<9} n={:<3} PSNR {:.2} ± {:.2} dB",
            a.task,
            a.ratio,
            a.shots,
            a.loss,
            a.method.as_str(),
            a.count,
            a.mean_psnr,
            a.std_psnr
        );
    }
    for f in &outcome.failures {
        eprintln!("failed: {} ({})", f.key, f.message);
    }
    outcome.complete()
}

fn cmd_sweep(a: SweepArgs, task: Task) -> Result<bool> {
    let mut spec = load_spec(&a.config)?;
    if spec.task != task {
        bail!("config task is `{}`, this command runs `{}`", spec.task.as_str(), task.as_str());
    }
    if let Some(d) = a.output_dir {
        spec.output_dir = d;
    }
    if let Some(s) = a.root_seed {
        spec.root_seed = s;
    }
    if let Some(n) = a.test_images {
        spec.test_images = n;
    }
    let data = spec.load_data()?;
    let bank = ModelBank::load(&spec)?;
    fs::create_dir_all(&spec.output_dir)?;
    RunManifest::new(&spec, &bank, Some(&data.manifest), &data.tests).save(spec.output_dir.join("manifest.toml"))?;
    let mut opts = SweepOptions::new(spec.output_dir.join("results.csv"));
    opts.workers = a.workers.unwrap_or_else(workers_from_env);
    let outcome = match task {
        Task::Cs => run_cs_sweep(&spec, &bank, &data.tests, &opts)?,
        Task::Colorization => {
            let c = run_colorization(&spec, &bank, &data.tests, &opts)?;
            if c.sweep.complete() {
                log::info!("wrote {}", c.grid_path.display());
            }
            c.sweep
        }
    };
    write_atomic(spec.output_dir.join("summary.csv"), &aggregates_to_csv(&aggregate(&outcome.rows))?)?;
    Ok(report(&outcome))
}

fn cmd_plot(a: PlotArgs) -> Result<bool> {
    let mut axes = AxesSpec {
        task: a.task,
        ..Default::default()
    };
    if let Some(t) = a.title {
        axes.title = t;
    }
    let curves = emit_plot(&a.csv, &a.out, &axes)?;
    log::info!("wrote {} ({} curves)", a.out.display(), curves.len());
    Ok(true)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let descriptor = lowshot::decoder::Descriptor::desk();
    let mut ok = true;
    for objective in Objective::ALL {
        let mut worst = 0.0f64;
        for p in 0..a.points {
            let r = check_objective(objective, descriptor, a.seed.wrapping_add(p), &suite_options())?;
            worst = worst.max(r.max_rel_error);
        }
        let pass = worst <= a.tolerance;
        ok &= pass;
        println!(
            "{:<13} max relative error {:.3e} {}",
            objective.as_str(),
            worst,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_synth(a: SynthArgs) -> Result<bool> {
    let images = match a.generator {
        Generator::Blobs => synthetic::two_tone_blobs(a.count, a.resolution, a.seed),
        Generator::Tinted => synthetic::tinted(a.count, a.resolution, a.seed),
    };
    fs::create_dir_all(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        save_png(img, a.out.join(format!("{i:05}.png")))?;
    }
    log::info!("wrote {} images to {}", images.len(), a.out.display());
    Ok(true)
}

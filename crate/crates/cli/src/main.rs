//! Command-line driver: train runs, checkpoint evaluation, and the
//! diagnostic sweeps, all emitting CSV (and optional SVG) result bundles.

use clap::{Args, Parser, Subcommand};
use elastopinn::config::{load_run_config, mode_for, preset, ConfigError, RunConfig};
use elastopinn::diagnostics::{cosine_diag, error_surface, model_rel_l2, nu_histogram, EvalGrid, NuBins};
use elastopinn::elasticity::problems::{ex4_family, problem_registry};
use elastopinn::losses::{DecomposedNets, ForceNets};
use elastopinn::network::AnchoredNetwork;
use elastopinn::par::ExecMode;
use elastopinn::report::{
    svg_heatmap, svg_line_chart, write_histogram_csv, write_run_manifest, write_surface_csv,
    write_text, write_timings_csv, RunManifest,
};
use elastopinn::trainer::{
    load_manifest, load_role, train, TrainError, TrainMode, TrainOptions, TrainRecord,
    TrainedModel,
};
use std::path::{Path, PathBuf};

const EXIT_CONFIG: i32 = 2;
const EXIT_NONFINITE: i32 = 3;
const EXIT_IO: i32 = 4;
const EXIT_MISMATCH: i32 = 5;

#[derive(Parser)]
#[command(
    name = "elastopinn",
    about = "Physics-informed networks for nearly incompressible elasticity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigSource {
    /// Full run configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment preset: ex1, ex2, ex3 or ex4.
    #[arg(long)]
    preset: Option<String>,
    /// Training formulation: standard or decomposed.
    #[arg(long, default_value = "decomposed")]
    mode: String,
    /// Override the problem's lambda scale (ex1/ex2/ex3 presets).
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch budget.
    #[arg(long)]
    epochs: Option<u64>,
    /// Force single-threaded evaluation.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the result bundle.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory (defaults to the config's out_dir or ./run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render SVG charts.
        #[arg(long)]
        svg: bool,
        /// Resume from the checkpoint directory inside `--out`.
        #[arg(long)]
        resume: bool,
        /// Write checkpoints every N epochs.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Evaluate a trained checkpoint on its problem's grid.
    Eval {
        /// Run directory produced by `train` (holds config + checkpoints).
        #[arg(long)]
        run: PathBuf,
        /// Expected problem label; mismatch is refused.
        #[arg(long)]
        problem: Option<String>,
    },
    /// Gradient-alignment diagnostic: cosine between the standard-loss and
    /// reduced-loss gradients along a standard training run.
    DiagCosine {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
    },
    /// Relative-error surface of a trained parametric model over (E, nu).
    Sweep {
        /// Run directory of a trained parametric model.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid resolution along E.
        #[arg(long, default_value_t = 11)]
        grid_e: usize,
        /// Grid resolution along nu.
        #[arg(long, default_value_t = 17)]
        grid_nu: usize,
        /// Spatial grid nodes per axis for each error evaluation.
        #[arg(long, default_value_t = 51)]
        spatial_grid: usize,
        #[arg(long)]
        svg: bool,
    },
    /// Per-bin mean errors over Poisson-ratio intervals for a standard and a
    /// decomposed parametric model.
    Histogram {
        /// Run directory of the trained standard parametric model.
        #[arg(long)]
        standard: PathBuf,
        /// Run directory of the trained decomposed parametric model.
        #[arg(long)]
        decomposed: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Samples per bin.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Spatial grid nodes per axis for each error evaluation.
        #[arg(long, default_value_t = 51)]
        spatial_grid: usize,
    },
}

struct CmdError {
    code: i32,
    kind: &'static str,
    msg: String,
}

impl CmdError {
    fn new(code: i32, kind: &'static str, msg: impl Into<String>) -> Self {
        CmdError {
            code,
            kind,
            msg: msg.into(),
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        // An unreadable or unparsable config is a config error either way.
        CmdError::new(EXIT_CONFIG, "config", e.to_string())
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { epoch, .. } => CmdError::new(
                EXIT_NONFINITE,
                "nonfinite",
                format!("non-finite loss at epoch {epoch}"),
            ),
            TrainError::InvalidConfig(msg) => CmdError::new(EXIT_CONFIG, "config", msg),
            TrainError::Io(e) => CmdError::new(EXIT_IO, "io", e.to_string()),
            TrainError::Checkpoint(e) => CmdError::new(EXIT_MISMATCH, "checkpoint", e.to_string()),
            other => CmdError::new(EXIT_CONFIG, "train", other.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::new(EXIT_IO, "io", e.to_string())
    }
}

impl From<elastopinn::report::ReportError> for CmdError {
    fn from(e: elastopinn::report::ReportError) -> Self {
        CmdError::new(EXIT_IO, "report", e.to_string())
    }
}

impl From<elastopinn::diagnostics::DiagError> for CmdError {
    fn from(e: elastopinn::diagnostics::DiagError) -> Self {
        CmdError::new(EXIT_CONFIG, "diagnostics", e.to_string())
    }
}

impl From<elastopinn::trainer::CheckpointError> for CmdError {
    fn from(e: elastopinn::trainer::CheckpointError) -> Self {
        CmdError::new(EXIT_MISMATCH, "checkpoint", e.to_string())
    }
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            source,
            out,
            svg,
            resume,
            checkpoint_every,
        } => cmd_train(source, out, svg, resume, checkpoint_every),
        Command::Eval { run, problem } => cmd_eval(&run, problem.as_deref()),
        Command::DiagCosine { source, out, svg } => cmd_diag_cosine(source, out, svg),
        Command::Sweep {
            run,
            out,
            grid_e,
            grid_nu,
            spatial_grid,
            svg,
        } => cmd_sweep(&run, out, grid_e, grid_nu, spatial_grid, svg),
        Command::Histogram {
            standard,
            decomposed,
            out,
            seed,
            samples,
            spatial_grid,
        } => cmd_histogram(&standard, &decomposed, out, seed, samples, spatial_grid),
    };
    if let Err(e) = result {
        eprintln!("error code={} kind={} msg={:?}", e.code, e.kind, e.msg);
        std::process::exit(e.code);
    }
}

fn init_thread_pool() {
    if let Ok(threads) = std::env::var("ELASTOPINN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn resolve_config(source: &ConfigSource) -> Result<RunConfig, CmdError> {
    let mut run = match (&source.config, &source.preset) {
        (Some(path), None) => load_run_config(path)?,
        (None, Some(name)) => {
            let parametric = name == "ex4";
            let mode = mode_for(&source.mode, parametric)?;
            preset(name, mode)?
        }
        (None, None) => {
            return Err(CmdError::new(
                EXIT_CONFIG,
                "config",
                "either --config or --preset is required",
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(lambda) = source.lambda {
        run.set_scale_param(lambda);
    }
    if let Some(seed) = source.seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = source.epochs {
        run.train.epochs = epochs;
    }
    if source.sequential {
        run.train.exec = ExecMode::Sequential;
    }
    Ok(run)
}

/// Exclusive lock on an output directory: one run at a time.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CmdError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CmdError::new(
                EXIT_IO,
                "lock",
                format!(
                    "output directory is locked by another run: {}",
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_bundle(
    out_dir: &Path,
    run: &RunConfig,
    records: &[TrainRecord],
    stopped_at: u64,
    svg: bool,
) -> Result<(), CmdError> {
    elastopinn::report::write_records_csv(&out_dir.join("records.csv"), records)?;
    write_timings_csv(&out_dir.join("timings.csv"), records)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: format!("{:#018x}", run.train.hash()),
        seed: run.train.seed,
        mode: run.train.mode.label().to_string(),
        problem: run.train.problem.label().to_string(),
        stopped_at,
    };
    write_run_manifest(&out_dir.join("manifest.toml"), &manifest)?;
    if svg || run.emit_svg {
        let curve: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| r.rel_l2.map(|v| (r.epoch as f64, v)))
            .collect();
        if !curve.is_empty() {
            let chart = svg_line_chart(
                &format!("relative L2 error ({})", run.train.mode.label()),
                &[("rel_l2".to_string(), curve)],
                true,
            );
            write_text(&out_dir.join("learning_curve.svg"), &chart)?;
        }
    }
    Ok(())
}

fn cmd_train(
    source: ConfigSource,
    out: Option<PathBuf>,
    svg: bool,
    resume: bool,
    checkpoint_every: Option<u64>,
) -> Result<(), CmdError> {
    let mut run = resolve_config(&source)?;
    if let Some(every) = checkpoint_every {
        run.train.checkpoint_every = Some(every);
    }
    let out_dir = out
        .or_else(|| run.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    let _lock = DirLock::acquire(&out_dir)?;
    run.out_dir = Some(out_dir.clone());

    // Persist the resolved config so eval/sweep can rebuild the model.
    let config_text = toml::to_string(&run).expect("config serializes");
    write_text(&out_dir.join("config.toml"), &config_text)?;

    let ckpt_dir = out_dir.join("checkpoints");
    let opts = TrainOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        resume_from: resume.then(|| ckpt_dir.clone()),
        on_record: Some(Box::new(|r: &TrainRecord| {
            match r.rel_l2 {
                Some(rel) => eprintln!(
                    "epoch {:>7}  loss {:.6e}  rel_l2 {:.6e}",
                    r.epoch, r.breakdown.total, rel
                ),
                None => eprintln!("epoch {:>7}  loss {:.6e}", r.epoch, r.breakdown.total),
            };
        })),
        stop_after: None,
    };

    match train(&run.train, opts) {
        Ok(output) => {
            write_bundle(&out_dir, &run, &output.records, output.stopped_at, svg)?;
            println!("run complete: {}", out_dir.display());
            if let Some(rel) = output.records.last().and_then(|r| r.rel_l2) {
                println!("final rel_l2 = {rel:.6e}");
            }
            Ok(())
        }
        Err(TrainError::NonFinite { epoch, records }) => {
            // Persist what we have for post-mortems, then report.
            let _ = write_bundle(&out_dir, &run, &records, epoch, false);
            Err(TrainError::NonFinite { epoch, records }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Rebuild the trained model recorded in a run directory.
fn load_model(run_dir: &Path) -> Result<(RunConfig, TrainedModel, u64), CmdError> {
    let run = load_run_config(&run_dir.join("config.toml"))?;
    let ckpt = run_dir.join("checkpoints");
    let config_hash = run.train.hash();
    let (manifest_hash, epoch, roles) = load_manifest(&ckpt)?;
    if manifest_hash != config_hash {
        return Err(CmdError::new(
            EXIT_MISMATCH,
            "checkpoint",
            format!(
                "config hash mismatch: checkpoint {manifest_hash:#018x}, config {config_hash:#018x}"
            ),
        ));
    }
    let model = if run.train.mode.is_decomposed() {
        let problem = problem_registry(run.train.problem).map_err(TrainError::from)?;
        let force = problem.body_force.clone();
        let third: elastopinn::network::VectorFn =
            std::sync::Arc::new(move |x: &[f64]| force(x).into_iter().map(|v| v / 3.0).collect());
        let u_hat = load_role(&ckpt, "u_hat", config_hash)?.0;
        let u_tilde = load_role(&ckpt, "u_tilde", config_hash)?.0;
        let force_nets = if roles.iter().any(|r| r == "f_combined") {
            let third2 = third.clone();
            let double: elastopinn::network::VectorFn = std::sync::Arc::new(move |x: &[f64]| {
                let f = third2(x);
                let mut out = f.clone();
                out.extend(f);
                out
            });
            ForceNets::Combined(AnchoredNetwork::from_trained(
                load_role(&ckpt, "f_combined", config_hash)?.0,
                double,
            ))
        } else {
            ForceNets::Split {
                lambda: AnchoredNetwork::from_trained(
                    load_role(&ckpt, "f_lambda", config_hash)?.0,
                    third.clone(),
                ),
                mu: AnchoredNetwork::from_trained(load_role(&ckpt, "f_mu", config_hash)?.0, third),
            }
        };
        TrainedModel::Decomposed(DecomposedNets {
            u_hat,
            u_tilde,
            force: force_nets,
        })
    } else {
        TrainedModel::Single(load_role(&ckpt, "u", config_hash)?.0)
    };
    Ok((run, model, epoch))
}

fn cmd_eval(run_dir: &Path, problem: Option<&str>) -> Result<(), CmdError> {
    let (run, model, epoch) = load_model(run_dir)?;
    if let Some(expected) = problem {
        let actual = run.train.problem.label();
        if expected != actual {
            return Err(CmdError::new(
                EXIT_MISMATCH,
                "problem",
                format!("checkpoint was trained on {actual}, not {expected}"),
            ));
        }
    }
    let instance = problem_registry(run.train.problem).map_err(TrainError::from)?;
    let d = instance.domain.dim;
    let res = vec![if d == 2 { 101 } else { 51 }; d];
    let grid = EvalGrid::new(&instance.domain, &res);
    let exact = instance.exact.as_ref().expect("registry problems");
    let params = if run.train.mode.is_parametric() {
        match run.train.problem {
            elastopinn::elasticity::problems::ProblemChoice::Ex4 { e, nu } => Some((e, nu)),
            _ => unreachable!("parametric implies ex4"),
        }
    } else {
        None
    };
    let rel = model_rel_l2(&model, exact.as_ref(), &grid, params)?;
    println!(
        "problem={} epoch={epoch} rel_l2={}",
        run.train.problem.label(),
        elastopinn::report::format_full(rel)
    );
    Ok(())
}

fn cmd_diag_cosine(source: ConfigSource, out: Option<PathBuf>, svg: bool) -> Result<(), CmdError> {
    let mut run = resolve_config(&source)?;
    run.train.mode = TrainMode::Standard;
    run.train.cosine_diag = true;
    if source.epochs.is_none() {
        run.train.epochs = 2000;
    }
    let out_dir = out
        .or_else(|| run.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("diag-cosine"));
    let _lock = DirLock::acquire(&out_dir)?;

    let records = cosine_diag(&run.train)?;
    elastopinn::report::write_records_csv(&out_dir.join("records.csv"), &records)?;
    let mut cosine_text = String::from("epoch,cosine\n");
    let mut series = Vec::new();
    for r in &records {
        if let Some(c) = r.cosine {
            cosine_text.push_str(&format!(
                "{},{}\n",
                r.epoch,
                elastopinn::report::format_full(c)
            ));
            series.push((r.epoch as f64, c));
        }
    }
    write_text(&out_dir.join("cosine.csv"), &cosine_text)?;
    if svg {
        let chart = svg_line_chart(
            "cosine(grad standard loss, grad reduced loss)",
            &[("cosine".to_string(), series.clone())],
            false,
        );
        write_text(&out_dir.join("cosine.svg"), &chart)?;
    }
    let mean = series.iter().map(|p| p.1).sum::<f64>() / series.len().max(1) as f64;
    println!("epochs={} mean_cosine={mean:.6}", series.len());
    Ok(())
}

fn parametric_model(run_dir: &Path) -> Result<(RunConfig, TrainedModel), CmdError> {
    let (run, model, _) = load_model(run_dir)?;
    if !run.train.mode.is_parametric() {
        return Err(CmdError::new(
            EXIT_MISMATCH,
            "problem",
            format!(
                "{} holds a {} model; a parametric one is required",
                run_dir.display(),
                run.train.mode.label()
            ),
        ));
    }
    Ok((run, model))
}

fn cmd_sweep(
    run_dir: &Path,
    out: Option<PathBuf>,
    grid_e: usize,
    grid_nu: usize,
    spatial_grid: usize,
    svg: bool,
) -> Result<(), CmdError> {
    let (_, model) = parametric_model(run_dir)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from("sweep"));
    let _lock = DirLock::acquire(&out_dir)?;

    let family = ex4_family();
    let grid = EvalGrid::new(&family.domain, &[spatial_grid, spatial_grid]);
    // Cell centers across the parameter box, so every instance stays
    // strictly admissible.
    let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64)
            .collect()
    };
    let es = axis(family.e_range.0, family.e_range.1, grid_e);
    let nus = axis(family.nu_range.0, family.nu_range.1, grid_nu);
    let rows = error_surface(&model, &family, &es, &nus, &grid)?;
    write_surface_csv(&out_dir.join("surface.csv"), &rows)?;
    if svg {
        let values: Vec<Vec<f64>> = es
            .iter()
            .enumerate()
            .map(|(i, _)| {
                nus.iter()
                    .enumerate()
                    .map(|(j, _)| rows[i * nus.len() + j].2)
                    .collect()
            })
            .collect();
        write_text(
            &out_dir.join("surface.svg"),
            &svg_heatmap("relative L2 error over (E, nu)", &es, &nus, &values),
        )?;
    }
    let max = rows.iter().map(|r| r.2).fold(0.0f64, f64::max);
    println!("cells={} max_rel_l2={max:.6e}", rows.len());
    Ok(())
}

fn cmd_histogram(
    standard_dir: &Path,
    decomposed_dir: &Path,
    out: Option<PathBuf>,
    seed: u64,
    samples: usize,
    spatial_grid: usize,
) -> Result<(), CmdError> {
    let (_, standard) = parametric_model(standard_dir)?;
    let (_, decomposed) = parametric_model(decomposed_dir)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from("histogram"));
    let _lock = DirLock::acquire(&out_dir)?;

    let family = ex4_family();
    let grid = EvalGrid::new(&family.domain, &[spatial_grid, spatial_grid]);
    let bins = NuBins {
        samples_per_bin: samples,
        ..Default::default()
    };
    let means = nu_histogram(&[&standard, &decomposed], &family, &bins, &grid, seed)?;
    write_histogram_csv(&out_dir.join("histogram.csv"), &bins, &means[0], &means[1])?;
    for (i, (lo, hi)) in bins.bins.iter().enumerate() {
        println!(
            "nu in ({lo}, {hi}): standard {:.4e}  decomposed {:.4e}",
            means[0][i], means[1][i]
        );
    }
    Ok(())
}

//! wavemo command-line interface: simulation, modulation learning,
//! reconstruction, evaluation sweeps, MTF reports, and gradient self-checks.
//!
//! Every run is driven by a plain-text key=value config file plus CLI flag
//! overrides (flags win), writes all outputs under one run directory, and is
//! byte-reproducible from the same config and seed.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavemo::diversity::{capture_stack, combined_mtf, radial_profile, MeasurementStack, ModulationSet, Provenance};
use wavemo::error::{Result, WavemoError};
use wavemo::field::{Field, GridSpec};
use wavemo::io;
use wavemo::metrics::{aggregate, psnr, ssim};
use wavemo::modopt::{
    end_to_end_loss_grads, generate_baseline, load_modulations, mtf_direct_opt, save_modulations,
    ModMlp, MtfOptOptions, TrainOptions,
};
use wavemo::optics::{pupil_backward, pupil_forward, pupil_mask, Image, PupilMask};
use wavemo::proxy::{
    fit_proxy, load_proxy, proxy_forward, proxy_loss_grads, save_proxy, ProxyParams,
    ProxyTrainOptions,
};
use wavemo::recon::{default_init, pdi_gradients, pdi_loss, reconstruct, ReconOptions};
use wavemo::scene::SceneSource;
use wavemo::zernike::{build_basis, compose_phase, sample_aberration, ZernikeBasis};

const MODE_COUNT: usize = 28;

#[derive(Parser)]
#[command(name = "wavemo", version, about = "Phase-diversity imaging simulation and modulation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement stack for one scene and aberration draw.
    Simulate(SimulateArgs),
    /// Jointly learn modulation patterns and the proxy reconstructor.
    Learn(LearnArgs),
    /// Iterative phase-diversity reconstruction of a simulated stack.
    Reconstruct(ReconstructArgs),
    /// Compare modulation kinds (or a K sweep) over held-out scenes.
    Evaluate(EvaluateArgs),
    /// Radial combined-MTF profiles per modulation kind.
    MtfReport(MtfReportArgs),
    /// Finite-difference self-check of every gradient chain.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every subcommand; unset flags fall back to the config
/// file, then to documented defaults.
#[derive(Args, Clone)]
struct CommonArgs {
    /// key=value config file; CLI flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// run output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// grid side length (power of two, >= 8)
    #[arg(long)]
    n: Option<usize>,
    /// pupil radius as a fraction of the half grid
    #[arg(long)]
    frac: Option<f64>,
    /// number of modulations K
    #[arg(long)]
    k: Option<usize>,
    /// base RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// measurement noise sigma
    #[arg(long)]
    sigma_noise: Option<f64>,
    /// aberration sigma range lower edge
    #[arg(long)]
    sigma_lo: Option<f64>,
    /// aberration sigma range upper edge
    #[arg(long)]
    sigma_hi: Option<f64>,
    /// directory of .pfm/.pgm scenes (default: procedural generator)
    #[arg(long)]
    scene_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// modulation kind: none|random_zernike|random_gaussian|focus_sweep|mtf_opt|learned
    #[arg(long)]
    mods: Option<String>,
    /// load modulations from a saved directory instead of generating
    #[arg(long)]
    mods_dir: Option<PathBuf>,
    /// defocus amplitude for focus_sweep
    #[arg(long)]
    focus_amp: Option<f64>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// training iterations
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// MLP hidden width
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// stack directory written by `simulate`
    #[arg(long)]
    stack: Option<PathBuf>,
    /// maximum optimizer iterations
    #[arg(long)]
    max_iters: Option<usize>,
    /// Adam step size for the scene estimate
    #[arg(long)]
    step_scene: Option<f64>,
    /// Adam step size for the aberration coefficients
    #[arg(long)]
    step_coeffs: Option<f64>,
    /// total-variation regularization weight
    #[arg(long)]
    tv: Option<f64>,
    /// relative loss-change stopping tolerance (0 disables)
    #[arg(long)]
    tolerance: Option<f64>,
    /// keep the aberration estimate frozen at zero
    #[arg(long)]
    freeze_aberration: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// comma-separated modulation kinds to compare
    #[arg(long)]
    kinds: Option<String>,
    /// number of held-out evaluation scenes
    #[arg(long)]
    scenes: Option<usize>,
    /// reconstruction path: proxy|iterative|both
    #[arg(long)]
    recon: Option<String>,
    /// training budget for per-kind proxy fitting
    #[arg(long)]
    proxy_iters: Option<usize>,
    /// iteration budget for iterative reconstruction
    #[arg(long)]
    recon_iters: Option<usize>,
    /// comma-separated K values; switches to K-sweep mode over one kind
    #[arg(long)]
    k_sweep: Option<String>,
    /// number of seeds averaged in K-sweep mode
    #[arg(long)]
    seeds: Option<usize>,
    /// artifacts directory from `learn` (required for kind `learned`)
    #[arg(long)]
    learned_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MtfReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// comma-separated modulation kinds to profile
    #[arg(long)]
    kinds: Option<String>,
    /// aberration draws averaged per kind
    #[arg(long)]
    aberration_samples: Option<usize>,
    /// radial frequency bins
    #[arg(long)]
    bins: Option<usize>,
    /// artifacts directory from `learn` (required for kind `learned`)
    #[arg(long)]
    learned_dir: Option<PathBuf>,
    /// defocus amplitude for focus_sweep
    #[arg(long)]
    focus_amp: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// negative control: corrupt one gradient chain and verify detection
    #[arg(long, hide = true)]
    inject_bug: bool,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own exit convention uses 2 for usage errors; the
            // documented contract here is 1
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Learn(a) => cmd_learn(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::MtfReport(a) => cmd_mtf_report(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                WavemoError::Config(_) | WavemoError::Argument(_) => 1,
                WavemoError::Numerical(_) | WavemoError::Contract(_) => 2,
                WavemoError::Io(_) => 3,
            }
        }
    }
}

/// Values loaded from the key=value config file.
struct Cfg {
    pairs: Vec<(String, String)>,
}

impl Cfg {
    fn load(path: Option<&Path>) -> Result<Self> {
        let pairs = match path {
            Some(p) => io::read_manifest(p)?,
            None => Vec::new(),
        };
        Ok(Cfg { pairs })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match io::manifest_get(&self.pairs, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| WavemoError::Config(format!("config key '{key}': bad value '{v}'"))),
        }
    }
}

/// flag value, else config value, else default.
fn resolve<T: FromStr + Clone>(flag: &Option<T>, cfg: &Cfg, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    Ok(cfg.get(key)?.unwrap_or(default))
}

/// Fully resolved run configuration shared by the subcommands.
#[derive(Clone)]
struct RunConfig {
    grid: GridSpec,
    k: usize,
    seed: u64,
    sigma_noise: f64,
    sigma_lo: f64,
    sigma_hi: f64,
    out: PathBuf,
    scene_source: SceneSource,
}

fn resolve_common(common: &CommonArgs, cfg: &Cfg, default_out: &str, default_n: usize, default_k: usize) -> Result<RunConfig> {
    let n = resolve(&common.n, cfg, "n", default_n)?;
    let frac = resolve(&common.frac, cfg, "aperture_radius_frac", 0.5)?;
    let grid = GridSpec::new(n, frac)?;
    let scene_source = match common
        .scene_dir
        .clone()
        .or(cfg.get::<PathBuf>("scene_dir")?)
    {
        Some(dir) => SceneSource::from_dir(&dir)?,
        None => SceneSource::Procedural,
    };
    Ok(RunConfig {
        grid,
        k: resolve(&common.k, cfg, "k", default_k)?,
        seed: resolve(&common.seed, cfg, "seed", 0)?,
        sigma_noise: resolve(&common.sigma_noise, cfg, "sigma_noise", 0.01)?,
        sigma_lo: resolve(&common.sigma_lo, cfg, "sigma_lo", 5.0)?,
        sigma_hi: resolve(&common.sigma_hi, cfg, "sigma_hi", 6.0)?,
        out: resolve(&common.out, cfg, "out", PathBuf::from(default_out))?,
        scene_source,
    })
}

fn worker_count() -> usize {
    std::env::var("WAVEMO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-stable parallel map over independent jobs, capped by
/// WAVEMO_THREADS.
fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let workers = worker_count().min(items.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot poisoned").expect("job not run"))
        .collect()
}

/// Generate (or load) a modulation set for a named kind.
fn modulations_for_kind(
    kind: Provenance,
    basis: &ZernikeBasis,
    mask: &PupilMask,
    k: usize,
    sigma_lo: f64,
    sigma_hi: f64,
    focus_amp: f64,
    seed: u64,
    learned_dir: Option<&Path>,
) -> Result<ModulationSet> {
    match kind {
        Provenance::Learned => {
            let dir = learned_dir.ok_or_else(|| {
                WavemoError::Argument(
                    "kind 'learned' needs --learned-dir pointing at a `learn` run".into(),
                )
            })?;
            load_modulations(&dir.join("modulations"), basis)
        }
        Provenance::MtfOpt => {
            let opts = MtfOptOptions { sigma_lo, sigma_hi, seed, ..MtfOptOptions::default() };
            Ok(mtf_direct_opt(basis, mask, k, &opts)?.0)
        }
        Provenance::None => generate_baseline(kind, basis, 1, sigma_lo, sigma_hi, focus_amp, seed),
        _ => generate_baseline(kind, basis, k, sigma_lo, sigma_hi, focus_amp, seed),
    }
}

fn parse_kinds(spec: &str) -> Result<Vec<Provenance>> {
    spec.split(',')
        .map(|t| Provenance::parse(t.trim()))
        .collect()
}

fn coeffs_csv_rows(coeffs: &[Vec<f64>]) -> Vec<Vec<String>> {
    coeffs
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:.17e}")).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let rc = resolve_common(&args.common, &cfg, "run_simulate", 64, 8)?;
    let kind = Provenance::parse(&resolve(&args.mods, &cfg, "mods", "random_zernike".to_string())?)?;
    let focus_amp = resolve(&args.focus_amp, &cfg, "focus_amp", 6.0)?;
    let mods_dir = args.mods_dir.clone().or(cfg.get::<PathBuf>("mods_dir")?);

    let basis = build_basis(rc.grid, MODE_COUNT)?;
    let mask = pupil_mask(rc.grid);
    let mods = match &mods_dir {
        Some(dir) => {
            let m = load_modulations(dir, &basis)?;
            if m.provenance != kind {
                return Err(WavemoError::Argument(format!(
                    "modulations in {} are '{}', requested '{}'",
                    dir.display(),
                    m.provenance.as_str(),
                    kind.as_str()
                )));
            }
            m
        }
        None => modulations_for_kind(
            kind, &basis, &mask, rc.k, rc.sigma_lo, rc.sigma_hi, focus_amp, rc.seed, None,
        )?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let scene = rc.scene_source.sample(rc.grid, &mut rng)?;
    let ab = sample_aberration(&mut rng, &basis, rc.sigma_lo, rc.sigma_hi)?;
    let phase = compose_phase(&basis, &ab.coeffs)?;
    let stack = capture_stack(&scene, &phase, &mods, &mask, rc.sigma_noise, &mut rng)?;

    std::fs::create_dir_all(&rc.out)?;
    io::write_pfm(&rc.out.join("scene.pfm"), &scene)?;
    for (i, frame) in stack.frames.iter().enumerate() {
        io::write_pfm(&rc.out.join(format!("frame_{i:03}.pfm")), frame)?;
    }
    let header: Vec<String> = (1..=MODE_COUNT).map(|j| format!("z{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    io::write_csv(
        &rc.out.join("truth_aberration.csv"),
        &header_refs,
        &coeffs_csv_rows(std::slice::from_ref(&ab.coeffs)),
    )?;
    save_modulations(&rc.out.join("modulations"), &mods)?;
    io::write_manifest(
        &rc.out.join("manifest.txt"),
        &[
            ("command", "simulate".to_string()),
            ("n", rc.grid.n.to_string()),
            ("aperture_radius_frac", format!("{}", rc.grid.aperture_radius_frac)),
            ("k", mods.k().to_string()),
            ("mods", kind.as_str().to_string()),
            ("sigma_noise", format!("{}", rc.sigma_noise)),
            ("sigma_lo", format!("{}", rc.sigma_lo)),
            ("sigma_hi", format!("{}", rc.sigma_hi)),
            ("seed", rc.seed.to_string()),
            ("frames", mods.k().to_string()),
        ],
    )?;
    println!(
        "simulated {} frames ({}x{}, mods={}) into {}",
        mods.k(),
        rc.grid.n,
        rc.grid.n,
        kind.as_str(),
        rc.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// learn
// ---------------------------------------------------------------------------

fn cmd_learn(args: LearnArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let rc = resolve_common(&args.common, &cfg, "run_learn", 32, 4)?;
    let opts = TrainOptions {
        iterations: resolve(&args.iters, &cfg, "iters", 3000)?,
        learning_rate: resolve(&args.lr, &cfg, "learning_rate", 1e-2)?,
        hidden_dim: resolve(&args.hidden, &cfg, "hidden", 64)?,
        noise_sigma: rc.sigma_noise,
        sigma_lo: rc.sigma_lo,
        sigma_hi: rc.sigma_hi,
        seed: rc.seed,
        log_every: 50,
    };

    let basis = build_basis(rc.grid, MODE_COUNT)?;
    let mask = pupil_mask(rc.grid);
    let source = rc.scene_source.clone();
    let grid = rc.grid;
    let mut sampler = move |rng: &mut ChaCha8Rng| source.sample(grid, rng);
    let (mods, proxy, _mlp, history) =
        wavemo::modopt::train_modulations(&mut sampler, &mask, &basis, rc.k, &opts)?;

    std::fs::create_dir_all(&rc.out)?;
    save_modulations(&rc.out.join("modulations"), &mods)?;
    save_proxy(&rc.out.join("proxy"), &proxy)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|(it, loss, p)| vec![it.to_string(), format!("{loss:.17e}"), format!("{p:.6}")])
        .collect();
    io::write_csv(&rc.out.join("history.csv"), &["iter", "loss", "eval_psnr"], &rows)?;
    io::write_manifest(
        &rc.out.join("manifest.txt"),
        &[
            ("command", "learn".to_string()),
            ("n", rc.grid.n.to_string()),
            ("aperture_radius_frac", format!("{}", rc.grid.aperture_radius_frac)),
            ("k", rc.k.to_string()),
            ("iters", opts.iterations.to_string()),
            ("learning_rate", format!("{}", opts.learning_rate)),
            ("hidden", opts.hidden_dim.to_string()),
            ("sigma_noise", format!("{}", rc.sigma_noise)),
            ("sigma_lo", format!("{}", rc.sigma_lo)),
            ("sigma_hi", format!("{}", rc.sigma_hi)),
            ("seed", rc.seed.to_string()),
        ],
    )?;

    if !history.is_empty() {
        let window = history.len().min(500);
        let head: f64 = history[..window].iter().map(|h| h.1).sum::<f64>() / window as f64;
        let tail: f64 =
            history[history.len() - window..].iter().map(|h| h.1).sum::<f64>() / window as f64;
        println!("moving-average loss: first {window} iters {head:.6e}, last {window} iters {tail:.6e}");
    } else {
        println!("no training iterations requested; wrote initialization artifacts");
    }
    println!("artifacts in {}", rc.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn load_stack(dir: &Path, basis: &ZernikeBasis) -> Result<(MeasurementStack, Option<Image>, GridSpec)> {
    let pairs = io::read_manifest(&dir.join("manifest.txt"))?;
    let get = |key: &str| -> Result<&str> {
        io::manifest_get(&pairs, key)
            .ok_or_else(|| WavemoError::Io(format!("stack manifest missing '{key}'")))
    };
    let n: usize =
        get("n")?.parse().map_err(|_| WavemoError::Io("bad n in stack manifest".into()))?;
    let frac: f64 = get("aperture_radius_frac")?
        .parse()
        .map_err(|_| WavemoError::Io("bad aperture_radius_frac in stack manifest".into()))?;
    let k: usize =
        get("k")?.parse().map_err(|_| WavemoError::Io("bad k in stack manifest".into()))?;
    let sigma: f64 = get("sigma_noise")?
        .parse()
        .map_err(|_| WavemoError::Io("bad sigma_noise in stack manifest".into()))?;
    let grid = GridSpec::new(n, frac)?;
    if grid != basis.grid {
        return Err(WavemoError::Argument("stack grid does not match basis grid".into()));
    }
    let mods = load_modulations(&dir.join("modulations"), basis)?;
    if mods.k() != k {
        return Err(WavemoError::Argument(format!(
            "stack manifest says K = {k} but the modulation set has {}",
            mods.k()
        )));
    }
    let mut frames = Vec::with_capacity(k);
    for i in 0..k {
        let f = io::read_pfm(&dir.join(format!("frame_{i:03}.pfm")))?;
        if f.grid.n != n {
            return Err(WavemoError::Io(format!("frame {i} has wrong size")));
        }
        frames.push(Field { grid, values: f.values });
    }
    let truth = dir.join("scene.pfm");
    let scene = if truth.exists() {
        let s = io::read_pfm(&truth)?;
        Some(Field { grid, values: s.values })
    } else {
        None
    };
    Ok((
        MeasurementStack { frames, modulations: mods, noise_sigma: sigma, aberration_truth: None },
        scene,
        grid,
    ))
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let stack_dir = args
        .stack
        .clone()
        .or(cfg.get::<PathBuf>("stack")?)
        .ok_or_else(|| WavemoError::Argument("reconstruct needs --stack <dir>".into()))?;
    // read the grid from the stack manifest before resolving anything else
    let pairs = io::read_manifest(&stack_dir.join("manifest.txt"))?;
    let n: usize = io::manifest_get(&pairs, "n")
        .ok_or_else(|| WavemoError::Io("stack manifest missing 'n'".into()))?
        .parse()
        .map_err(|_| WavemoError::Io("bad n in stack manifest".into()))?;
    let frac: f64 = io::manifest_get(&pairs, "aperture_radius_frac")
        .ok_or_else(|| WavemoError::Io("stack manifest missing 'aperture_radius_frac'".into()))?
        .parse()
        .map_err(|_| WavemoError::Io("bad aperture_radius_frac".into()))?;
    let grid = GridSpec::new(n, frac)?;
    let out = resolve(&args.common.out, &cfg, "out", PathBuf::from("run_reconstruct"))?;

    let opts = ReconOptions {
        max_iters: resolve(&args.max_iters, &cfg, "max_iters", 2000)?,
        step_scene: resolve(&args.step_scene, &cfg, "step_scene", 1e-2)?,
        step_coeffs: resolve(&args.step_coeffs, &cfg, "step_coeffs", 1e-2)?,
        tv_weight: resolve(&args.tv, &cfg, "tv_weight", 0.0)?,
        tolerance: resolve(&args.tolerance, &cfg, "tolerance", 0.0)?,
        freeze_aberration: args.freeze_aberration
            || cfg.get::<bool>("freeze_aberration")?.unwrap_or(false),
        ..ReconOptions::default()
    };

    let basis = build_basis(grid, MODE_COUNT)?;
    let mask = pupil_mask(grid);
    let (stack, truth, _) = load_stack(&stack_dir, &basis)?;
    let state = reconstruct(&stack, &mask, &basis, &opts, None)?;

    std::fs::create_dir_all(&out)?;
    io::write_pfm(&out.join("xhat.pfm"), &state.scene_est)?;
    let header: Vec<String> = (1..=MODE_COUNT).map(|j| format!("z{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    io::write_csv(
        &out.join("phi_hat.csv"),
        &header_refs,
        &coeffs_csv_rows(std::slice::from_ref(&state.aber_coeffs)),
    )?;
    let rows: Vec<Vec<String>> = state
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), format!("{l:.17e}")])
        .collect();
    io::write_csv(&out.join("loss.csv"), &["iter", "loss"], &rows)?;
    io::write_manifest(
        &out.join("manifest.txt"),
        &[
            ("command", "reconstruct".to_string()),
            ("stack", stack_dir.display().to_string()),
            ("iterations", state.iteration.to_string()),
            ("max_iters", opts.max_iters.to_string()),
            ("tv_weight", format!("{}", opts.tv_weight)),
            ("freeze_aberration", opts.freeze_aberration.to_string()),
        ],
    )?;

    println!(
        "reconstruction finished after {} iterations, final loss {:.6e}",
        state.iteration,
        state.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(truth) = truth {
        println!(
            "psnr_db={:.3} ssim={:.4}",
            psnr(&truth, &state.scene_est, 1.0)?,
            ssim(&truth, &state.scene_est)?
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Per-kind artifacts needed for evaluation.
struct EvalKind {
    label: String,
    mods: ModulationSet,
    proxy: ProxyParams,
}

fn prepare_kind(
    kind: Provenance,
    k: usize,
    rc: &RunConfig,
    basis: &ZernikeBasis,
    mask: &PupilMask,
    proxy_iters: usize,
    learned_dir: Option<&Path>,
    label: String,
) -> Result<EvalKind> {
    if kind == Provenance::Learned {
        let dir = learned_dir.ok_or_else(|| {
            WavemoError::Argument("kind 'learned' needs --learned-dir from a `learn` run".into())
        })?;
        let mods = load_modulations(&dir.join("modulations"), basis)?;
        let proxy = load_proxy(&dir.join("proxy"))?;
        if proxy.k() != mods.k() {
            return Err(WavemoError::Argument(
                "learned proxy and modulations disagree on K".into(),
            ));
        }
        return Ok(EvalKind { label, mods, proxy });
    }
    let mods = modulations_for_kind(
        kind, basis, mask, k, rc.sigma_lo, rc.sigma_hi, 6.0, rc.seed, None,
    )?;
    // baselines get a proxy trained with the same budget but frozen
    // modulations, so the comparison isolates the modulation choice
    let source = rc.scene_source.clone();
    let grid = rc.grid;
    let mut sampler = move |rng: &mut ChaCha8Rng| source.sample(grid, rng);
    let popts = ProxyTrainOptions {
        iterations: proxy_iters,
        learning_rate: 1e-2,
        noise_sigma: rc.sigma_noise,
        sigma_lo: rc.sigma_lo,
        sigma_hi: rc.sigma_hi,
        seed: rc.seed,
    };
    let (proxy, _) = fit_proxy(&mut sampler, &mods, mask, basis, &popts)?;
    Ok(EvalKind { label, mods, proxy })
}

/// Proxy (and optionally iterative) metrics for one kind over held-out
/// scenes with fresh aberrations.
#[allow(clippy::too_many_arguments)]
fn evaluate_kind(
    ek: &EvalKind,
    rc: &RunConfig,
    basis: &ZernikeBasis,
    mask: &PupilMask,
    scenes: usize,
    eval_seed: u64,
    do_iterative: bool,
    recon_iters: usize,
) -> Result<Vec<(f64, f64, Option<(f64, f64)>)>> {
    let jobs: Vec<usize> = (0..scenes).collect();
    parallel_map(&jobs, |&idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed ^ (0x9e3779b9 + idx as u64));
        let scene = rc.scene_source.sample(rc.grid, &mut rng)?;
        let ab = sample_aberration(&mut rng, basis, rc.sigma_lo, rc.sigma_hi)?;
        let phase = compose_phase(basis, &ab.coeffs)?;
        let stack = capture_stack(&scene, &phase, &ek.mods, mask, rc.sigma_noise, &mut rng)?;
        let est = proxy_forward(&stack, &ek.proxy)?;
        let p = psnr(&scene, &est, 1.0)?;
        let s = ssim(&scene, &est)?;
        let iterative = if do_iterative && stack.k() > 1 {
            let opts = ReconOptions { max_iters: recon_iters, ..ReconOptions::default() };
            let st = reconstruct(&stack, mask, basis, &opts, None)?;
            Some((psnr(&scene, &st.scene_est, 1.0)?, ssim(&scene, &st.scene_est)?))
        } else {
            None
        };
        Ok((p, s, iterative))
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let rc = resolve_common(&args.common, &cfg, "run_evaluate", 32, 4)?;
    let kinds_spec = resolve(&args.kinds, &cfg, "kinds", "none,random_zernike".to_string())?;
    let kinds = parse_kinds(&kinds_spec)?;
    let scenes = resolve(&args.scenes, &cfg, "scenes", 20)?;
    if scenes < 1 {
        return Err(WavemoError::Config("evaluate needs at least one scene".into()));
    }
    let recon_mode = resolve(&args.recon, &cfg, "recon", "proxy".to_string())?;
    let (do_proxy, do_iterative) = match recon_mode.as_str() {
        "proxy" => (true, false),
        "iterative" => (true, true),
        "both" => (true, true),
        other => {
            return Err(WavemoError::Config(format!(
                "recon mode '{other}' is not proxy|iterative|both"
            )))
        }
    };
    let _ = do_proxy;
    let proxy_iters = resolve(&args.proxy_iters, &cfg, "proxy_iters", 2000)?;
    let recon_iters = resolve(&args.recon_iters, &cfg, "recon_iters", 800)?;
    let k_sweep: Option<String> = args.k_sweep.clone().or(cfg.get("k_sweep")?);
    let n_seeds = resolve(&args.seeds, &cfg, "seeds", 3)?;
    let learned_dir = args.learned_dir.clone().or(cfg.get::<PathBuf>("learned_dir")?);

    let basis = build_basis(rc.grid, MODE_COUNT)?;
    let mask = pupil_mask(rc.grid);
    std::fs::create_dir_all(&rc.out)?;

    let mut summary_rows: Vec<Vec<String>> = Vec::new();

    if let Some(sweep) = k_sweep {
        // K-sweep ablation: one kind, several K, averaged over seeds
        let ks: Vec<usize> = sweep
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| WavemoError::Config(format!("bad K value '{t}' in k_sweep")))
            })
            .collect::<Result<_>>()?;
        let kind = if kinds.len() == 1 { kinds[0] } else { Provenance::RandomZernike };
        for &k in &ks {
            let mut seed_means = Vec::new();
            for s in 0..n_seeds {
                let rc_s = RunConfig { seed: rc.seed + s as u64, ..rc.clone() };
                let ek = prepare_kind(
                    kind, k, &rc_s, &basis, &mask, proxy_iters, learned_dir.as_deref(),
                    format!("{}_k{}_seed{}", kind.as_str(), k, rc_s.seed),
                )?;
                let items = evaluate_kind(
                    &ek, &rc_s, &basis, &mask, scenes, rc_s.seed + 7777, false, recon_iters,
                )?;
                let (mean, _) = aggregate(&items.iter().map(|i| i.0).collect::<Vec<_>>())?;
                seed_means.push(mean);
            }
            let (mean, sd) = aggregate(&seed_means)?;
            println!("K={k}: mean proxy PSNR {mean:.3} dB (sd {sd:.3}) over {n_seeds} seeds");
            summary_rows.push(vec![
                format!("k{k}"),
                "proxy".to_string(),
                format!("{mean:.6}"),
                format!("{sd:.6}"),
                String::new(),
                String::new(),
            ]);
        }
    } else {
        for kind in &kinds {
            let ek = prepare_kind(
                *kind, rc.k, &rc, &basis, &mask, proxy_iters, learned_dir.as_deref(),
                kind.as_str().to_string(),
            )?;
            let items = evaluate_kind(
                &ek, &rc, &basis, &mask, scenes, rc.seed + 7777, do_iterative, recon_iters,
            )?;
            let psnrs: Vec<f64> = items.iter().map(|i| i.0).collect();
            let ssims: Vec<f64> = items.iter().map(|i| i.1).collect();
            let (mp, sp) = aggregate(&psnrs)?;
            let (ms, ss) = aggregate(&ssims)?;
            println!(
                "{}: proxy PSNR {mp:.3} ({sp:.3}) dB, SSIM {ms:.4} ({ss:.4}) over {scenes} scenes",
                ek.label
            );
            summary_rows.push(vec![
                ek.label.clone(),
                "proxy".to_string(),
                format!("{mp:.6}"),
                format!("{sp:.6}"),
                format!("{ms:.6}"),
                format!("{ss:.6}"),
            ]);
            let item_rows: Vec<Vec<String>> = items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    vec![i.to_string(), format!("{:.6}", it.0), format!("{:.6}", it.1)]
                })
                .collect();
            io::write_csv(
                &rc.out.join(format!("items_{}.csv", ek.label)),
                &["scene", "psnr_db", "ssim"],
                &item_rows,
            )?;
            if do_iterative {
                let it_items: Vec<(f64, f64)> = items.iter().filter_map(|i| i.2).collect();
                if !it_items.is_empty() {
                    let (mp, sp) =
                        aggregate(&it_items.iter().map(|i| i.0).collect::<Vec<_>>())?;
                    let (ms, ss) =
                        aggregate(&it_items.iter().map(|i| i.1).collect::<Vec<_>>())?;
                    println!(
                        "{}: iterative PSNR {mp:.3} ({sp:.3}) dB, SSIM {ms:.4} ({ss:.4})",
                        ek.label
                    );
                    summary_rows.push(vec![
                        ek.label.clone(),
                        "iterative".to_string(),
                        format!("{mp:.6}"),
                        format!("{sp:.6}"),
                        format!("{ms:.6}"),
                        format!("{ss:.6}"),
                    ]);
                }
            }
        }
    }

    io::write_csv(
        &rc.out.join("results.csv"),
        &["kind", "recon", "mean_psnr_db", "sd_psnr_db", "mean_ssim", "sd_ssim"],
        &summary_rows,
    )?;
    println!("results in {}", rc.out.join("results.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// mtf-report
// ---------------------------------------------------------------------------

fn cmd_mtf_report(args: MtfReportArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let rc = resolve_common(&args.common, &cfg, "run_mtf_report", 32, 4)?;
    let kinds_spec =
        resolve(&args.kinds, &cfg, "kinds", "none,random_zernike".to_string())?;
    let kinds = parse_kinds(&kinds_spec)?;
    let draws = resolve(&args.aberration_samples, &cfg, "aberration_samples", 10)?;
    let bins = resolve(&args.bins, &cfg, "bins", rc.grid.n / 2 + 1)?;
    let focus_amp = resolve(&args.focus_amp, &cfg, "focus_amp", 6.0)?;
    let learned_dir = args.learned_dir.clone().or(cfg.get::<PathBuf>("learned_dir")?);
    if draws < 1 {
        return Err(WavemoError::Config("aberration_samples must be >= 1".into()));
    }

    let basis = build_basis(rc.grid, MODE_COUNT)?;
    let mask = pupil_mask(rc.grid);

    // resolve every modulation set before fanning out
    let mod_sets: Vec<(String, ModulationSet)> = kinds
        .iter()
        .map(|kind| {
            modulations_for_kind(
                *kind, &basis, &mask, rc.k, rc.sigma_lo, rc.sigma_hi, focus_amp, rc.seed,
                learned_dir.as_deref(),
            )
            .map(|m| (kind.as_str().to_string(), m))
        })
        .collect::<Result<_>>()?;

    // (kind, draw) jobs fan out; each aberration draw reuses the same seed
    // across kinds so every kind sees the same media
    let jobs: Vec<(usize, u64)> = (0..mod_sets.len())
        .flat_map(|ki| (0..draws as u64).map(move |d| (ki, d)))
        .collect();
    let profiles = parallel_map(&jobs, |&(ki, d)| {
        let mut rng = ChaCha8Rng::seed_from_u64(rc.seed ^ (0xa5a5_5a5a + d));
        let ab = sample_aberration(&mut rng, &basis, rc.sigma_lo, rc.sigma_hi)?;
        let phase = compose_phase(&basis, &ab.coeffs)?;
        let mtf = combined_mtf(&phase, &mod_sets[ki].1, &mask)?;
        radial_profile(&mtf, bins)
    })?;

    let mut centers = Vec::new();
    let mut means = vec![vec![0.0f64; bins]; mod_sets.len()];
    for ((ki, _), prof) in jobs.iter().zip(&profiles) {
        if centers.is_empty() {
            centers = prof.centers.clone();
        }
        for (acc, m) in means[*ki].iter_mut().zip(&prof.means) {
            *acc += m / draws as f64;
        }
    }

    std::fs::create_dir_all(&rc.out)?;
    let mut header = vec!["freq_cycles_per_grid".to_string()];
    header.extend(mod_sets.iter().map(|(label, _)| format!("mtf_{label}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|b| {
            let mut row = vec![format!("{:.6}", centers[b])];
            row.extend(means.iter().map(|m| format!("{:.9}", m[b])));
            row
        })
        .collect();
    io::write_csv(&rc.out.join("mtf.csv"), &header_refs, &rows)?;
    for ((label, _), m) in mod_sets.iter().zip(&means) {
        let rows: Vec<Vec<String>> = centers
            .iter()
            .zip(m)
            .map(|(c, v)| vec![format!("{c:.6}"), format!("{v:.9}")])
            .collect();
        io::write_csv(
            &rc.out.join(format!("mtf_{label}.csv")),
            &["freq_cycles_per_grid", "mtf"],
            &rows,
        )?;
    }

    for ((label, _), m) in mod_sets.iter().zip(&means) {
        let upper = &m[bins / 2..];
        let mean_upper: f64 = upper.iter().sum::<f64>() / upper.len() as f64;
        println!("{label}: mean combined MTF over upper-half bins = {mean_upper:.6}");
    }
    println!("profiles in {}", rc.out.join("mtf.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct ChainReport {
    name: &'static str,
    max_rel_err: f64,
    threshold: f64,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

fn check_pupil_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridSpec::new(8, 0.5)?;
    let mask = pupil_mask(grid);
    let phase =
        Field::from_values(grid, (0..grid.len()).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
    let w: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fw = pupil_forward(&mask, &phase)?;
    let grad = pupil_backward(&fw, &w);
    let probe = |p: &Field| -> Result<f64> {
        let fw = pupil_forward(&mask, p)?;
        Ok(fw.intensity.iter().zip(&w).map(|(u, w)| u * w).sum())
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let idx = rng.gen_range(0..grid.len());
        let mut plus = phase.clone();
        plus.values[idx] += eps;
        let mut minus = phase.clone();
        minus.values[idx] -= eps;
        let fd = (probe(&plus)? - probe(&minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(grad[idx], fd));
    }
    Ok(worst)
}

fn make_stack(
    grid: GridSpec,
    k: usize,
    basis: &ZernikeBasis,
    mask: &PupilMask,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, MeasurementStack)> {
    let scene = wavemo::scene::procedural_scene(grid, rng);
    let mut patterns = Vec::new();
    for _ in 0..k {
        let s = sample_aberration(rng, basis, 5.0, 6.0)?;
        patterns.push(compose_phase(basis, &s.coeffs)?);
    }
    let mods = if k == 1 {
        ModulationSet::none(grid)
    } else {
        ModulationSet::new(patterns, Provenance::RandomZernike, None)?
    };
    let ab = sample_aberration(rng, basis, 5.0, 6.0)?;
    let phase = compose_phase(basis, &ab.coeffs)?;
    let stack = capture_stack(&scene, &phase, &mods, mask, 0.0, rng)?;
    Ok((scene, stack))
}

fn check_pdi_chain(rng: &mut ChaCha8Rng, inject_bug: bool) -> Result<f64> {
    let grid = GridSpec::new(16, 0.5)?;
    let basis = build_basis(grid, MODE_COUNT)?;
    let mask = pupil_mask(grid);
    let (_, stack) = make_stack(grid, 2, &basis, &mask, rng)?;
    let mut state = default_init(&stack, &basis);
    for v in &mut state.scene_est.values {
        *v += rng.gen_range(-0.05..0.05);
    }
    for c in state.aber_coeffs.iter_mut().skip(1) {
        *c = rng.gen_range(-0.5..0.5);
    }
    let (grad_scene, mut grad_coeffs) = pdi_gradients(&stack, &state, &mask, &basis, 1e-3)?;
    if inject_bug {
        for g in &mut grad_coeffs {
            *g = -*g;
        }
    }
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let idx = rng.gen_range(0..grid.len());
        let mut plus = state.clone();
        plus.scene_est.values[idx] += eps;
        let mut minus = state.clone();
        minus.scene_est.values[idx] -= eps;
        let fd = (pdi_loss(&stack, &plus, &mask, &basis, 1e-3)?
            - pdi_loss(&stack, &minus, &mask, &basis, 1e-3)?)
            / (2.0 * eps);
        worst = worst.max(rel_err(grad_scene[idx], fd));
    }
    for _ in 0..10 {
        let idx = rng.gen_range(1..MODE_COUNT);
        let mut plus = state.clone();
        plus.aber_coeffs[idx] += eps;
        let mut minus = state.clone();
        minus.aber_coeffs[idx] -= eps;
        let fd = (pdi_loss(&stack, &plus, &mask, &basis, 1e-3)?
            - pdi_loss(&stack, &minus, &mask, &basis, 1e-3)?)
            / (2.0 * eps);
        worst = worst.max(rel_err(grad_coeffs[idx], fd));
    }
    Ok(worst)
}

fn check_proxy_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridSpec::new(16, 0.5)?;
    let basis = build_basis(grid, MODE_COUNT)?;
    let mask = pupil_mask(grid);
    let (scene, mut stack) = make_stack(grid, 2, &basis, &mask, rng)?;
    let mut params = ProxyParams::init(&mask, 2)?;
    for w in &mut params.weights {
        for c in w.iter_mut() {
            *c += num_complex::Complex64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        }
    }
    for r in &mut params.reg_preact {
        *r = rng.gen_range(-1.0..1.0);
    }
    params.bias = 0.05;
    let (_, grads, grad_frames) = proxy_loss_grads(&scene, &stack, &params)?;
    // the proxy loss is quadratic in every parameter group, so a generous
    // step keeps central differences exact while staying clear of roundoff
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let ki = rng.gen_range(0..2);
        let idx = rng.gen_range(0..grid.len());
        let mut plus = params.clone();
        plus.weights[ki][idx] += num_complex::Complex64::new(eps, 0.0);
        let mut minus = params.clone();
        minus.weights[ki][idx] -= num_complex::Complex64::new(eps, 0.0);
        let fd = (proxy_loss_grads(&scene, &stack, &plus)?.0
            - proxy_loss_grads(&scene, &stack, &minus)?.0)
            / (2.0 * eps);
        worst = worst.max(rel_err(grads.weights[ki][idx].re, fd));
    }
    for _ in 0..8 {
        let idx = rng.gen_range(0..grid.len());
        let mut plus = params.clone();
        plus.reg_preact[idx] += eps;
        let mut minus = params.clone();
        minus.reg_preact[idx] -= eps;
        let fd = (proxy_loss_grads(&scene, &stack, &plus)?.0
            - proxy_loss_grads(&scene, &stack, &minus)?.0)
            / (2.0 * eps);
        worst = worst.max(rel_err(grads.reg_preact[idx], fd));
    }
    for _ in 0..8 {
        let ki = rng.gen_range(0..2);
        let idx = rng.gen_range(0..grid.len());
        let orig = stack.frames[ki].values[idx];
        stack.frames[ki].values[idx] = orig + eps;
        let lp = proxy_loss_grads(&scene, &stack, &params)?.0;
        stack.frames[ki].values[idx] = orig - eps;
        let lm = proxy_loss_grads(&scene, &stack, &params)?.0;
        stack.frames[ki].values[idx] = orig;
        worst = worst.max(rel_err(grad_frames[ki][idx], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

fn check_mlp_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mlp = ModMlp::new(MODE_COUNT, 4, 2 * MODE_COUNT, rng)?;
    let c: Vec<f64> = (0..2 * MODE_COUNT).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, cache) = mlp.forward();
    let grads = mlp.backward(&cache, &c);
    let flat = mlp.params_flat();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let idx = rng.gen_range(0..flat.len());
        let mut f = flat.clone();
        f[idx] += eps;
        let mut m = mlp.clone();
        m.set_from_flat(&f);
        let lp: f64 = m.forward().0.iter().zip(&c).map(|(o, c)| o * c).sum();
        f[idx] -= 2.0 * eps;
        m.set_from_flat(&f);
        let lm: f64 = m.forward().0.iter().zip(&c).map(|(o, c)| o * c).sum();
        worst = worst.max(rel_err(grads[idx], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

fn check_end_to_end_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridSpec::new(16, 0.5)?;
    let basis = build_basis(grid, MODE_COUNT)?;
    let mask = pupil_mask(grid);
    let k = 2;
    let mlp = ModMlp::new(MODE_COUNT, 4, k * MODE_COUNT, rng)?;
    let proxy = ProxyParams::init(&mask, k)?;
    let scene = wavemo::scene::procedural_scene(grid, rng);
    let ab = sample_aberration(rng, &basis, 5.0, 6.0)?;
    let phase = compose_phase(&basis, &ab.coeffs)?;
    let (_, grads, _) = end_to_end_loss_grads(&scene, &phase, &mlp, &proxy, &mask, &basis, None)?;
    let flat = mlp.params_flat();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let idx = rng.gen_range(0..flat.len());
        let mut f = flat.clone();
        f[idx] += eps;
        let mut m = mlp.clone();
        m.set_from_flat(&f);
        let lp = end_to_end_loss_grads(&scene, &phase, &m, &proxy, &mask, &basis, None)?.0;
        f[idx] -= 2.0 * eps;
        m.set_from_flat(&f);
        let lm = end_to_end_loss_grads(&scene, &phase, &m, &proxy, &mask, &basis, None)?.0;
        worst = worst.max(rel_err(grads[idx], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

fn check_smooth_max_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    // the smooth-max MTF chain is exercised through mtf_direct_opt's
    // objective gradient; reuse the library's forward for the FD probe
    let grid = GridSpec::new(16, 0.5)?;
    let basis = build_basis(grid, MODE_COUNT)?;
    let mask = pupil_mask(grid);
    let coeffs: Vec<Vec<f64>> = (0..2)
        .map(|_| sample_aberration(rng, &basis, 5.0, 6.0).map(|s| s.coeffs))
        .collect::<Result<_>>()?;
    let ab = sample_aberration(rng, &basis, 5.0, 6.0)?;
    let phase = compose_phase(&basis, &ab.coeffs)?;
    let (_, grads) = wavemo::modopt::mtf_objective_for_check(&coeffs, &phase, &mask, &basis, 0.05)?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let i = rng.gen_range(0..2);
        let j = rng.gen_range(1..MODE_COUNT);
        let mut plus = coeffs.clone();
        plus[i][j] += eps;
        let mut minus = coeffs.clone();
        minus[i][j] -= eps;
        let lp = wavemo::modopt::mtf_objective_for_check(&plus, &phase, &mask, &basis, 0.05)?.0;
        let lm = wavemo::modopt::mtf_objective_for_check(&minus, &phase, &mask, &basis, 0.05)?.0;
        worst = worst.max(rel_err(grads[i][j], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = Cfg::load(args.common.config.as_deref())?;
    let seed = resolve(&args.common.seed, &cfg, "seed", 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = vec![
        ChainReport { name: "pupil_phase", max_rel_err: check_pupil_chain(&mut rng)?, threshold: 1e-4 },
        ChainReport {
            name: "pdi_gradients",
            max_rel_err: check_pdi_chain(&mut rng, args.inject_bug)?,
            threshold: 1e-4,
        },
        ChainReport { name: "proxy_loss_grads", max_rel_err: check_proxy_chain(&mut rng)?, threshold: 1e-4 },
        ChainReport { name: "mlp_backward", max_rel_err: check_mlp_chain(&mut rng)?, threshold: 1e-4 },
        ChainReport { name: "mtf_smooth_max", max_rel_err: check_smooth_max_chain(&mut rng)?, threshold: 1e-4 },
        ChainReport { name: "end_to_end", max_rel_err: check_end_to_end_chain(&mut rng)?, threshold: 1e-3 },
    ];

    println!("{:<20} {:>14} {:>12} {:>8}", "chain", "max_rel_err", "threshold", "status");
    let mut failures = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err < r.threshold;
        println!(
            "{:<20} {:>14.3e} {:>12.0e} {:>8}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failures.push(r.name);
        }
    }
    if !failures.is_empty() {
        return Err(WavemoError::Numerical(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )));
    }
    println!("all gradient chains pass");
    Ok(())
}

//! `tale` command-line interface: composition runs, inversion diagnostics,
//! gradient checking, ablation sweeps, toy training, dataset generation and
//! batch metrics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
//! error, 3 missing input file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use tale_core::compose::{compose_run, CompositionConfig};
use tale_core::config::{apply_key, load_config_file, Preset};
use tale_core::energy::{energy_gradient, EnergyCondition, GradientMode};
use tale_core::error::Error as CoreError;
use tale_core::masks::{build_mask_set, place_object, BoxRect};
use tale_core::metrics::evaluate;
use tale_core::models::{
    make_toy_domains, train_toy_denoiser, AnalyticDenoiser, ConvFeatureBank, Denoiser,
    GaussianMixtureModel, LinearAutoencoder, MixtureComponent, ModelBundle, PromptSpec,
    ToyDataset, ToyDenoiser, ToyEmbedder, TrainingConfig,
};
use tale_core::schedule::{build_schedule, ScheduleKind};
use tale_core::solver::{
    denoise_recorded, invert_trajectory, sample_trajectory, SolverOrder,
};
use tale_core::tensor::{gaussian_noise, sha256_hex, subseed, LatentTensor};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "tale", version, about = "Training-free latent image composition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compose a foreground object into a background image.
    Compose(ComposeArgs),
    /// Invert an image and report the reconstruction error of the round trip.
    Invert(InvertArgs),
    /// Check analytic energy gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep one axis over a dataset and emit a metrics CSV.
    Ablate(AblateArgs),
    /// Train the toy denoiser on a dataset and save its weights.
    TrainToy(TrainToyArgs),
    /// Generate a synthetic two-domain dataset.
    MakeDataset(MakeDatasetArgs),
    /// Evaluate composed results against their dataset.
    Metrics(MetricsArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Starting preset: cross-domain (default) or same-domain.
    #[arg(long, default_value = "cross-domain")]
    preset: String,

    /// Individual overrides as key=value (any config file key).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    t: Option<usize>,
    #[arg(long = "t-prime")]
    t_prime: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "eta-style")]
    eta_style: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "solver-order")]
    solver_order: Option<u64>,
    #[arg(long = "inversion-order")]
    inversion_order: Option<u64>,
    #[arg(long = "gradient-mode")]
    gradient_mode: Option<String>,
    #[arg(long = "guided-mode")]
    guided_mode: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long = "skip-optimization")]
    skip_optimization: bool,
    #[arg(long = "skip-normalization")]
    skip_normalization: bool,
    #[arg(long = "baseline-init")]
    baseline_init: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<CompositionConfig, CliError> {
        let preset: Preset = self.preset.parse().map_err(CliError::config)?;
        let mut cfg = preset.config();
        if let Some(path) = &self.config {
            require_file(path)?;
            cfg = load_config_file(cfg, path).map_err(CliError::config)?;
        }
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                CliError::Config(format!("--set expects key=value, got '{pair}'"))
            })?;
            apply_key(&mut cfg, k.trim(), v.trim()).map_err(CliError::config)?;
        }
        macro_rules! set_opt {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    apply_key(&mut cfg, $key, &v.to_string()).map_err(CliError::config)?;
                }
            };
        }
        set_opt!(t, "t");
        set_opt!(t_prime, "t-prime");
        set_opt!(tau, "tau");
        set_opt!(n, "n");
        set_opt!(eta, "eta");
        set_opt!(eta_style, "eta-style");
        set_opt!(seed, "seed");
        set_opt!(solver_order, "solver-order");
        set_opt!(inversion_order, "inversion-order");
        set_opt!(gradient_mode, "gradient-mode");
        set_opt!(guided_mode, "guided-mode");
        set_opt!(schedule, "schedule");
        if self.skip_optimization {
            cfg.skip_optimization = true;
        }
        if self.skip_normalization {
            cfg.skip_normalization = true;
        }
        if self.baseline_init {
            cfg.baseline_init = true;
        }
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Denoiser backend: analytic (mixture prior over the two input
    /// latents) or toy (trained weights).
    #[arg(long, default_value = "analytic")]
    backend: String,

    /// Toy denoiser weights file (required with --backend toy).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    fg: PathBuf,
    #[arg(long = "obj-mask")]
    obj_mask: PathBuf,
    /// Placement rectangle "x,y,w,h" in background pixel coordinates.
    #[arg(long = "user-box")]
    user_box: String,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 20)]
    t: usize,
    #[arg(long, default_value = "cosine")]
    schedule: String,
    /// Denoising order for the trip back (inversion itself is first order).
    #[arg(long, default_value_t = 2)]
    order: u64,
    /// Prior width of the analytic backend.
    #[arg(long, default_value_t = 0.7)]
    prior_std: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measure typical gradient norms on a trained toy chain instead of
    /// checking; prints suggested eta calibrations.
    #[arg(long)]
    calibrate: bool,
    /// Dataset directory (required with --calibrate).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Toy weights for --calibrate; trained on the fly when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Sweep spec: "t-prime=16,12,8,4" or
    /// "component=baseline,selective,normalization,optimization".
    #[arg(long)]
    sweep: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Toy weights; trained on the dataset when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also write every composed image and manifest under the output dir.
    #[arg(long)]
    save_images: bool,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    t: usize,
    #[arg(long, default_value = "cosine")]
    schedule: String,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long = "learning-rate", default_value_t = 4e-3)]
    learning_rate: f64,
    #[arg(long = "batch-size", default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory holding res_NNNN.ppm (and optional manifest_NNNN.json).
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Runtime(String),
    Config(String),
    MissingInput(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Runtime(m) | CliError::Config(m) | CliError::MissingInput(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::InvalidConfig(_) | CoreError::InvalidSteps(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingInput(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!(
            "missing input file: {}",
            path.display()
        )))
    }
}

/// Standard toy embedder/feature-bank pair, seeded from the run seed.
fn toy_projectors(seed: u64, shape: (usize, usize, usize)) -> (Arc<ToyEmbedder>, Arc<ConvFeatureBank>) {
    (
        Arc::new(ToyEmbedder::new(subseed(seed, "embedder"), 32, shape)),
        Arc::new(ConvFeatureBank::new(subseed(seed, "feature-bank"), shape.0, 8)),
    )
}

fn load_toy_weights(path: &Path, expected_steps: usize) -> Result<ToyDenoiser, CliError> {
    require_file(path)?;
    let net = ToyDenoiser::load(path)?;
    if net.schedule().steps() != expected_steps {
        return Err(CliError::Config(format!(
            "t: weights were trained for T={} but the run uses T={expected_steps}",
            net.schedule().steps()
        )));
    }
    Ok(net)
}

/// Mixture prior over the two input latents, for weight-free runs.
fn analytic_prior(
    latents: &[LatentTensor],
    std: f64,
    steps: usize,
    kind: ScheduleKind,
) -> Result<AnalyticDenoiser, CliError> {
    let schedule = build_schedule(steps, kind)?;
    let w = 1.0 / latents.len() as f64;
    let gm = GaussianMixtureModel::new(
        latents
            .iter()
            .map(|m| MixtureComponent {
                weight: w,
                mean: m.clone(),
                std,
            })
            .collect(),
    )?;
    Ok(AnalyticDenoiser::new(gm, schedule))
}

fn run_compose(args: &ComposeArgs) -> Result<(), CliError> {
    let cfg = args.config.build()?;
    for path in [&args.bg, &args.fg, &args.obj_mask] {
        require_file(path)?;
    }
    let user_box: BoxRect = args.user_box.parse().map_err(CliError::config)?;
    let x_bg = tale_core::io::read_image(&args.bg)?;
    let x_fg = tale_core::io::read_image(&args.fg)?;
    let obj_mask = tale_core::io::read_pgm(&args.obj_mask)?;
    let prompt = PromptSpec::new(args.prompt.clone());

    let ae = Arc::new(LinearAutoencoder::default());
    let denoiser: Arc<dyn Denoiser> = match args.backend.backend.as_str() {
        "toy" => {
            let path = args.backend.weights.as_ref().ok_or_else(|| {
                CliError::Config("--backend toy requires --weights".into())
            })?;
            Arc::new(load_toy_weights(path, cfg.steps)?)
        }
        "analytic" => {
            use tale_core::models::Autoencoder;
            let z_bg = ae.encode(&x_bg)?;
            let z_fg = ae.encode(&x_fg)?;
            Arc::new(analytic_prior(
                &[z_bg, z_fg],
                0.6,
                cfg.steps,
                cfg.schedule_kind,
            )?)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown backend '{other}' (expected analytic or toy)"
            )))
        }
    };
    let (embedder, feature_bank) =
        toy_projectors(cfg.seed, (x_bg.channels(), x_bg.height(), x_bg.width()));
    let bundle = ModelBundle::new(denoiser, ae, embedder, feature_bank);

    let out = compose_run(&x_bg, &x_fg, &obj_mask, user_box, &prompt, &cfg, &bundle)?;
    let mut manifest = out.manifest;
    if let Some(w) = &args.backend.weights {
        manifest
            .input_digests
            .insert("weights".into(), sha256_hex(&std::fs::read(w).map_err(CoreError::from)?));
    }
    std::fs::create_dir_all(&args.out).map_err(CoreError::from)?;
    let image_path = args.out.join("x_res.ppm");
    tale_core::io::write_ppm(&image_path, &out.image)?;
    tale_core::io::atomic_write(&args.out.join("manifest.json"), manifest.to_json().as_bytes())?;
    println!("wrote {}", image_path.display());
    println!("output digest  {}", manifest.output_digest);
    println!("manifest digest {}", manifest.stable_digest());
    println!("wall time      {} ms", manifest.wall_time_ms);
    Ok(())
}

fn run_invert(args: &InvertArgs) -> Result<(), CliError> {
    require_file(&args.image)?;
    let kind: ScheduleKind = args.schedule.parse().map_err(CliError::config)?;
    let order = SolverOrder::try_from(args.order).map_err(CliError::config)?;
    let x = tale_core::io::read_image(&args.image)?;
    let ae = LinearAutoencoder::default();
    use tale_core::models::Autoencoder;
    let z0 = ae.encode(&x)?;
    let denoiser: Arc<dyn Denoiser> = match args.backend.backend.as_str() {
        "toy" => {
            let path = args.backend.weights.as_ref().ok_or_else(|| {
                CliError::Config("--backend toy requires --weights".into())
            })?;
            Arc::new(load_toy_weights(path, args.t)?)
        }
        "analytic" => Arc::new(analytic_prior(
            std::slice::from_ref(&z0),
            args.prior_std,
            args.t,
            kind,
        )?),
        other => {
            return Err(CliError::Config(format!(
                "unknown backend '{other}' (expected analytic or toy)"
            )))
        }
    };
    let schedule = build_schedule(args.t, kind)?;
    let traj = invert_trajectory(&z0, denoiser.as_ref(), None, &schedule, SolverOrder::First)?;
    let back = sample_trajectory(&traj[args.t], denoiser.as_ref(), None, &schedule, order)?;
    let rel = back.rel_l2_error(&z0)?;
    let report = serde_json::json!({
        "image": args.image.display().to_string(),
        "backend": args.backend.backend,
        "steps": args.t,
        "schedule": kind.to_string(),
        "denoise_order": order.as_u8(),
        "inversion_order": 1,
        "relative_l2_error": rel,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn gradcheck_case(
    case: u64,
    seed: u64,
    schedule_steps: usize,
) -> Result<(usize, f64), CliError> {
    let hw = 12usize;
    let schedule = build_schedule(schedule_steps, ScheduleKind::Cosine)?;
    let mean = gaussian_noise(3, hw / 2, hw / 2, subseed(seed, &format!("mean:{case}")))?;
    let denoiser = Arc::new(AnalyticDenoiser::new(
        GaussianMixtureModel::single(mean, 0.8),
        schedule.clone(),
    ));
    let (embedder, feature_bank) = toy_projectors(subseed(seed, &format!("proj:{case}")), (3, hw, hw));
    let bundle = ModelBundle::new(
        denoiser,
        Arc::new(LinearAutoencoder::default()),
        embedder,
        feature_bank,
    );
    let user = BoxRect::new(2, 2, 8, 8).to_mask(hw, hw)?;
    let object = BoxRect::new(3, 3, 6, 6).to_mask(hw, hw)?;
    let masks = build_mask_set(&user, &object, 2, 0)?;
    let prompt = PromptSpec::new(format!("gradcheck case {case}"));
    let bg = gaussian_noise(3, hw, hw, subseed(seed, &format!("bg:{case}")))?.map(|v| 0.5 + 0.2 * v);
    let cond = EnergyCondition {
        prompt: &prompt,
        background: &bg,
        user_mask: &masks.user,
    };
    let z = gaussian_noise(3, hw / 2, hw / 2, subseed(seed, &format!("z:{case}")))?;
    let t = 1 + (subseed(seed, &format!("t:{case}")) as usize) % schedule_steps;
    let (eta, eta_style) = (0.9, 0.7);
    let analytic = energy_gradient(
        &z,
        t,
        &cond,
        &bundle,
        &schedule,
        GradientMode::FrozenEps,
        eta,
        eta_style,
    )?;
    let fd = energy_gradient(
        &z,
        t,
        &cond,
        &bundle,
        &schedule,
        GradientMode::FiniteDifference,
        eta,
        eta_style,
    )?;
    let rel = analytic
        .combined()?
        .rel_l2_error(&fd.combined()?)?;
    Ok((t, rel))
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.calibrate {
        return run_calibrate(args);
    }
    println!("{:>6} {:>4} {:>12}", "case", "t", "rel-error");
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for case in 0..args.cases as u64 {
        let (t, rel) = gradcheck_case(case, args.seed, 20)?;
        worst = worst.max(rel);
        let status = if rel > GRADCHECK_TOLERANCE {
            failures += 1;
            " FAIL"
        } else {
            ""
        };
        println!("{case:>6} {t:>4} {rel:>12.3e}{status}");
    }
    println!("worst {worst:.3e} over {} cases (tolerance {GRADCHECK_TOLERANCE:.0e})", args.cases);
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} case(s) exceeded {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

fn run_calibrate(args: &GradcheckArgs) -> Result<(), CliError> {
    let dataset_dir = args.dataset.as_ref().ok_or_else(|| {
        CliError::Config("--calibrate requires --dataset".into())
    })?;
    require_file(&dataset_dir.join("index.json"))?;
    let dataset = ToyDataset::load_dir(dataset_dir)?;
    let cfg = CompositionConfig::default();
    let net = match &args.weights {
        Some(path) => load_toy_weights(path, cfg.steps)?,
        None => {
            println!("# no weights supplied; training on the dataset first");
            let (net, _) = train_toy_denoiser(
                &dataset,
                &TrainingConfig {
                    seed: args.seed,
                    ..TrainingConfig::default()
                },
            )?;
            net
        }
    };
    let schedule = net.schedule().clone();
    let first = &dataset.samples[0];
    let shape = (
        first.background.channels(),
        first.background.height(),
        first.background.width(),
    );
    let (embedder, feature_bank) = toy_projectors(cfg.seed, shape);
    let ae = Arc::new(LinearAutoencoder::default());
    let bundle = ModelBundle::new(Arc::new(net), ae.clone(), embedder, feature_bank);
    use tale_core::models::Autoencoder;

    let mut sem = Vec::new();
    let mut sty = Vec::new();
    let mut zn = Vec::new();
    let lo = cfg.t_prime - cfg.tau;
    for sample in dataset.samples.iter().take(8) {
        let (fg_aligned, obj_aligned) = place_object(
            &sample.foreground,
            &sample.object_mask,
            sample.user_box,
            (shape.1, shape.2),
        )?;
        let user = sample.user_box.to_mask(shape.1, shape.2)?;
        let masks = build_mask_set(&user, &obj_aligned, 2, 0)?;
        let z0_bg = ae.encode(&sample.background)?;
        let z0_fg = ae.encode(&fg_aligned)?;
        let den = bundle.denoiser.as_ref();
        let bg_up = invert_trajectory(&z0_bg, den, None, &schedule, cfg.inversion_order)?;
        let bg_down = denoise_recorded(&bg_up[cfg.steps], den, None, &schedule, cfg.solver_order)?;
        let fg_up = invert_trajectory(&z0_fg, den, None, &schedule, cfg.inversion_order)?;
        let fg_down = denoise_recorded(&fg_up[cfg.steps], den, None, &schedule, cfg.solver_order)?;
        let cond = EnergyCondition {
            prompt: &sample.prompt,
            background: &sample.background,
            user_mask: &masks.user,
        };
        for t in lo..cfg.t_prime {
            let z = fg_down[t].select_masked(&bg_down[t], &masks.latent_object)?;
            let g = energy_gradient(
                &z,
                t,
                &cond,
                &bundle,
                &schedule,
                GradientMode::FrozenEps,
                1.0,
                1.0,
            )?;
            sem.push(g.semantic_grad.mul_mask(&masks.latent_object)?.norm_l2());
            sty.push(g.style_grad.mul_mask(&masks.latent_object)?.norm_l2());
            zn.push(z.mul_mask(&masks.latent_object)?.norm_l2());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_sem, m_sty, m_z) = (mean(&sem), mean(&sty), mean(&zn));
    println!("measured over {} window states:", sem.len());
    println!("  |grad F|  per unit eta   {m_sem:.4}");
    println!("  |grad F'| per unit eta'  {m_sty:.4}");
    println!("  |z (object region)|      {m_z:.3}");
    println!(
        "suggested eta-calibration        {:.3e}  (0.5% step at eta = {})",
        0.005 * m_z / (cfg.eta * m_sem),
        cfg.eta
    );
    println!(
        "suggested eta-style-calibration  {:.3e}  (0.5% step at eta' = {})",
        0.005 * m_z / (cfg.eta_style * m_sty),
        cfg.eta_style
    );
    Ok(())
}

enum SweepAxis {
    TPrime(Vec<usize>),
    Component(Vec<String>),
}

fn parse_sweep(spec: &str) -> Result<SweepAxis, CliError> {
    let (key, values) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!("--sweep expects key=v1,v2,..., got '{spec}'"))
    })?;
    match key.trim() {
        "t-prime" => {
            let vals = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("t-prime: bad sweep value '{v}'")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if vals.is_empty() {
                return Err(CliError::Config("t-prime: empty sweep".into()));
            }
            Ok(SweepAxis::TPrime(vals))
        }
        "component" => {
            let vals: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            for v in &vals {
                if !["baseline", "selective", "normalization", "optimization"].contains(&v.as_str())
                {
                    return Err(CliError::Config(format!("component: unknown value '{v}'")));
                }
            }
            Ok(SweepAxis::Component(vals))
        }
        other => Err(CliError::Config(format!(
            "unknown sweep key '{other}' (expected t-prime or component)"
        ))),
    }
}

fn component_config(base: &CompositionConfig, component: &str) -> CompositionConfig {
    let mut cfg = base.clone();
    match component {
        "baseline" => {
            cfg.baseline_init = true;
            cfg.skip_normalization = true;
            cfg.skip_optimization = true;
        }
        "selective" => {
            cfg.skip_normalization = true;
            cfg.skip_optimization = true;
        }
        "normalization" => {
            cfg.skip_optimization = true;
        }
        _ => {}
    }
    cfg
}

fn run_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let base = args.config.build()?;
    require_file(&args.dataset.join("index.json"))?;
    let dataset = ToyDataset::load_dir(&args.dataset)?;
    if dataset.is_empty() {
        return Err(CliError::Runtime("dataset is empty".into()));
    }
    let axis = parse_sweep(&args.sweep)?;
    let net = match &args.weights {
        Some(path) => load_toy_weights(path, base.steps)?,
        None => {
            eprintln!("no weights supplied; training the toy denoiser on the dataset");
            let (net, _) = train_toy_denoiser(
                &dataset,
                &TrainingConfig {
                    seed: base.seed,
                    steps: base.steps,
                    kind: base.schedule_kind,
                    ..TrainingConfig::default()
                },
            )?;
            net
        }
    };
    let first = &dataset.samples[0];
    let shape = (
        first.background.channels(),
        first.background.height(),
        first.background.width(),
    );
    let (embedder, feature_bank) = toy_projectors(base.seed, shape);
    let bundle = ModelBundle::new(
        Arc::new(net),
        Arc::new(LinearAutoencoder::default()),
        embedder,
        feature_bank,
    );

    let (sweep_key, labels, configs): (&str, Vec<String>, Vec<CompositionConfig>) = match &axis {
        SweepAxis::TPrime(vals) => {
            let mut configs = Vec::new();
            for &tp in vals {
                let mut cfg = base.clone();
                cfg.t_prime = tp;
                cfg.tau = cfg.tau.min(tp);
                cfg.validate().map_err(CliError::config)?;
                configs.push(cfg);
            }
            (
                "t-prime",
                vals.iter().map(|v| v.to_string()).collect(),
                configs,
            )
        }
        SweepAxis::Component(vals) => (
            "component",
            vals.clone(),
            vals.iter().map(|v| component_config(&base, v)).collect(),
        ),
    };

    std::fs::create_dir_all(&args.out).map_err(CoreError::from)?;
    let mut csv = String::from(
        "sweep_key,sweep_value,sample,ssim_bg,ssim_fg,content_similarity,style_proxy,config_digest\n",
    );
    for (label, cfg) in labels.iter().zip(&configs) {
        let digest = cfg.digest();
        let mut mean_content = 0.0;
        let mut mean_style = 0.0;
        for (i, sample) in dataset.samples.iter().enumerate() {
            let out = compose_run(
                &sample.background,
                &sample.foreground,
                &sample.object_mask,
                sample.user_box,
                &sample.prompt,
                cfg,
                &bundle,
            )?;
            let m = evaluate(&out.image, &sample.background, &out.fg_aligned, &out.masks)?;
            mean_content += m.content_similarity;
            mean_style += m.style_proxy;
            csv.push_str(&format!(
                "{sweep_key},{label},{i},{:.6},{:.6},{:.6},{:.6},{digest}\n",
                m.ssim_bg, m.ssim_fg, m.content_similarity, m.style_proxy
            ));
            if args.save_images {
                let dir = args.out.join(format!("{sweep_key}-{label}"));
                tale_core::io::write_ppm(&dir.join(format!("res_{i:04}.ppm")), &out.image)?;
                tale_core::io::atomic_write(
                    &dir.join(format!("manifest_{i:04}.json")),
                    out.manifest.to_json().as_bytes(),
                )?;
            }
        }
        let n = dataset.len() as f64;
        println!(
            "{sweep_key}={label}: mean content {:.4}, mean style {:.4}",
            mean_content / n,
            mean_style / n
        );
    }
    let csv_path = args.out.join("ablate.csv");
    tale_core::io::atomic_write(&csv_path, csv.as_bytes())?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run_train_toy(args: &TrainToyArgs) -> Result<(), CliError> {
    require_file(&args.dataset.join("index.json"))?;
    let dataset = ToyDataset::load_dir(&args.dataset)?;
    let kind: ScheduleKind = args.schedule.parse().map_err(CliError::config)?;
    let cfg = TrainingConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        hidden: args.hidden,
        seed: args.seed,
        steps: args.t,
        kind,
    };
    let (net, report) = train_toy_denoiser(&dataset, &cfg)?;
    net.save(&args.out)?;
    println!(
        "trained {} epochs on {} samples: loss {:.4} -> {:.4}",
        args.epochs,
        dataset.len(),
        report.epoch_losses.first().unwrap_or(&f64::NAN),
        report.epoch_losses.last().unwrap_or(&f64::NAN)
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_make_dataset(args: &MakeDatasetArgs) -> Result<(), CliError> {
    let dataset = make_toy_domains(args.seed, args.n)?;
    dataset.save_dir(&args.out)?;
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    println!("dataset digest {}", dataset.digest());
    Ok(())
}

fn run_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    require_file(&args.dataset.join("index.json"))?;
    let dataset = ToyDataset::load_dir(&args.dataset)?;
    if !args.results.exists() {
        return Err(CliError::MissingInput(format!(
            "missing results directory: {}",
            args.results.display()
        )));
    }
    let mut csv =
        String::from("sample,ssim_bg,ssim_fg,content_similarity,style_proxy,config_digest\n");
    let mut rows = 0usize;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let res_path = args.results.join(format!("res_{i:04}.ppm"));
        if !res_path.exists() {
            continue;
        }
        let x_res = tale_core::io::read_ppm(&res_path)?;
        let canvas = (sample.background.height(), sample.background.width());
        let (fg_aligned, obj_aligned) = place_object(
            &sample.foreground,
            &sample.object_mask,
            sample.user_box,
            canvas,
        )?;
        let user = sample.user_box.to_mask(canvas.0, canvas.1)?;
        let masks = build_mask_set(&user, &obj_aligned, 2, 0)?;
        let m = evaluate(&x_res, &sample.background, &fg_aligned, &masks)?;
        let digest = {
            let manifest_path = args.results.join(format!("manifest_{i:04}.json"));
            if manifest_path.exists() {
                let text = std::fs::read_to_string(&manifest_path).map_err(CoreError::from)?;
                tale_core::manifest::RunManifest::from_json(&text)
                    .map(|man| man.config.digest())
                    .unwrap_or_else(|_| "-".into())
            } else {
                "-".into()
            }
        };
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{digest}\n",
            m.ssim_bg, m.ssim_fg, m.content_similarity, m.style_proxy
        ));
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Runtime(format!(
            "no res_NNNN.ppm files found in {}",
            args.results.display()
        )));
    }
    match &args.out {
        Some(path) => {
            tale_core::io::atomic_write(path, csv.as_bytes())?;
            println!("wrote {rows} rows to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compose(args) => run_compose(args),
        Command::Invert(args) => run_invert(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Ablate(args) => run_ablate(args),
        Command::TrainToy(args) => run_train_toy(args),
        Command::MakeDataset(args) => run_make_dataset(args),
        Command::Metrics(args) => run_metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

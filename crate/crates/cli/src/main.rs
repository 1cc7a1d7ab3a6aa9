mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use navidrive::action_fit::fit_controls;
use navidrive::evaluation::{emit_report, render_markdown, run_eval, EvalOptions, EvalReport, ReportFormat};
use navidrive::gateway::mock::{EchoBackend, RecordingBackend, ReplayBackend, ScriptedOracle};
use navidrive::gateway::{
    BackendError, BackendReply, ChatBackend, ChatRequest, Driver, Gateway, GatewayError, HttpBackend, Navigator,
    ReasonCache,
};
use navidrive::kinematics::{self, KinematicState, DEFAULT_DT};
use navidrive::prompting::{parse_actions, serialize_waypoints, AblationFlags, OutputMode, PromptTemplates};
use navidrive::scene_log::{
    corpus_readme, emit_eval_manifest, emit_sft_corpus, extract_clips, load_scene_logs, read_eval_manifest, Clip,
    SceneSplit,
};

use crate::config::{EndpointConfig, RunConfig};

#[derive(Parser)]
#[command(name = "navidrive", version, about = "Navigator/Driver planning harness")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut scene logs into clips and write an eval manifest.
    Extract(ExtractArgs),
    /// Fit ground-truth control sequences for every clip.
    FitActions(FitArgs),
    /// Generate (or reuse cached) Navigator reasoning for every clip.
    GenReason(GenReasonArgs),
    /// Write the Driver fine-tuning corpus.
    EmitSft(EmitSftArgs),
    /// Evaluate the Driver on a manifest.
    Evaluate(EvaluateArgs),
    /// Evaluate the four input combinations of the ablation table.
    Ablate(EvaluateArgs),
    /// Integrate an action string into waypoints.
    Rollout(RolloutArgs),
    /// Print version information.
    Version,
    /// Print the effective configuration.
    ConfigDump,
}

#[derive(Args)]
struct ExtractArgs {
    /// Scene-log file or directory (repeatable; overrides paths.scene_logs).
    #[arg(long = "scene-log")]
    scene_logs: Vec<PathBuf>,
    /// Output manifest (default: <output_dir>/clips.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Keep only scenes of this split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest (default: <output_dir>/clips_fitted.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    kappa_max: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MockKind {
    /// Ground truth of each clip, plus optional noise.
    Oracle,
    /// The same text for every request.
    Echo,
    /// Answers recorded with --record.
    Replay,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Use a built-in backend instead of the configured endpoints.
    #[arg(long, value_enum)]
    mock: Option<MockKind>,
    /// Oracle noise standard deviation (meters, or control units in action mode).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Oracle noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text returned by the echo backend.
    #[arg(long, default_value = "")]
    echo_text: String,
    /// Transcript read by the replay backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Append every exchange to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct GenReasonArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Annotated manifest (default: <output_dir>/clips_reasoned.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EmitSftArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Corpus directory (default: <output_dir>/sft-<mode>-<flags>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<OutputMode>,
    /// Driver inputs, e.g. reason,command,images.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Report directory (default: <output_dir>/eval or <output_dir>/ablation).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Driver inputs (ignored by ablate).
    #[arg(long)]
    flags: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mode: Option<OutputMode>,
    /// Add the L2(6s) column.
    #[arg(long)]
    six_second: bool,
    /// Leave fallback rows out of the aggregates.
    #[arg(long)]
    exclude_fallback: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RolloutArgs {
    /// Action string such as "[(0.50, 0.010), (0.20, 0.000)]".
    #[arg(long, conflicts_with = "actions_file")]
    actions: Option<String>,
    /// File holding an action string.
    #[arg(long)]
    actions_file: Option<PathBuf>,
    /// Initial speed, m/s.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        let mut message = e.to_string();
        let mut source = e.source();
        while let Some(s) = source {
            let text = s.to_string();
            if !message.contains(&text) {
                message.push_str(": ");
                message.push_str(&text);
            }
            source = s.source();
        }
        Failure::Runtime(message)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

struct Ctx {
    config: RunConfig,
    workers: usize,
    dry_run: bool,
}

fn run(cli: Cli) -> CmdResult {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        config,
        workers: cli.workers.unwrap_or(0),
        dry_run: cli.dry_run,
    };
    match cli.command {
        Command::Extract(a) => extract(ctx, a),
        Command::FitActions(a) => fit_actions(ctx, a),
        Command::GenReason(a) => gen_reason(ctx, a),
        Command::EmitSft(a) => emit_sft(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a, false),
        Command::Ablate(a) => evaluate(ctx, a, true),
        Command::Rollout(a) => rollout(a),
        Command::Version => {
            println!("navidrive {}", env!("CARGO_PKG_VERSION"));
            println!("prompt templates {}", navidrive::prompting::TEMPLATE_VERSION);
            println!("scene logs {}", navidrive::scene_log::SCENELOG_VERSION);
            Ok(())
        }
        Command::ConfigDump => {
            print!("{}", ctx.config.to_toml());
            Ok(())
        }
    }
}

fn flags_of(text: &str) -> Result<AblationFlags, Failure> {
    AblationFlags::parse_list(text).map_err(Failure::Usage)
}

/// Expands directories into their `*.jsonl` files, sorted.
fn scene_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn create_parent(path: &Path) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn extract(mut ctx: Ctx, a: ExtractArgs) -> CmdResult {
    if !a.scene_logs.is_empty() {
        ctx.config.paths.scene_logs = a.scene_logs;
    }
    if let Some(s) = a.stride {
        ctx.config.dataset.window.stride_frames = s;
    }
    if a.split_file.is_some() {
        ctx.config.dataset.split_file = a.split_file;
    }
    if a.split.is_some() {
        ctx.config.dataset.split = a.split;
    }
    ctx.config.validate().map_err(Failure::Usage)?;
    if ctx.config.paths.scene_logs.is_empty() {
        return Err(Failure::Usage("no scene logs given (--scene-log or paths.scene_logs)".into()));
    }
    let dataset = &ctx.config.dataset;
    let split = match &dataset.split_file {
        Some(p) => Some(SceneSplit::load(p)?),
        None => None,
    };

    let mut clips = Vec::new();
    let mut scenes = 0;
    for file in scene_files(&ctx.config.paths.scene_logs)? {
        for scene in load_scene_logs(&file)? {
            if let (Some(want), Some(split)) = (&dataset.split, &split) {
                if split.split_of(&scene.scene_id) != Some(want.as_str()) {
                    continue;
                }
            }
            scenes += 1;
            clips.extend(extract_clips(&scene, &dataset.window, &dataset.thresholds)?);
        }
    }
    let out = a.out.unwrap_or_else(|| ctx.config.paths.output_dir.join("clips.jsonl"));
    if ctx.dry_run {
        println!("{} clips from {scenes} scene(s); would write {}", clips.len(), out.display());
        return Ok(());
    }
    create_parent(&out)?;
    emit_eval_manifest(&clips, &out)?;
    println!("{} clips from {scenes} scene(s) -> {}", clips.len(), out.display());
    Ok(())
}

const RMSE_BINS: [f64; 5] = [0.01, 0.05, 0.1, 0.25, 0.5];

fn fit_actions(mut ctx: Ctx, a: FitArgs) -> CmdResult {
    if let Some(l) = a.lambda {
        ctx.config.fitting.lambda = l;
    }
    if a.no_refine {
        ctx.config.fitting.refine = false;
    }
    if let Some(k) = a.kappa_max {
        ctx.config.fitting.kappa_max = k;
    }
    ctx.config.validate().map_err(Failure::Usage)?;
    let options = ctx.config.fitting.options();
    let mut clips = read_eval_manifest(&a.manifest)?;
    let out = a.out.unwrap_or_else(|| ctx.config.paths.output_dir.join("clips_fitted.jsonl"));
    if ctx.dry_run {
        println!(
            "would fit {} clips (lambda {}, refine {}) -> {}",
            clips.len(),
            options.lambda,
            options.refine,
            out.display()
        );
        return Ok(());
    }

    let mut rmses = Vec::with_capacity(clips.len());
    let mut clamped = 0;
    for clip in &mut clips {
        let init = KinematicState::at_origin(clip.ego_state.speed.max(0.0));
        let fit = fit_controls(&clip.future, &init, &options)
            .map_err(|e| Failure::Runtime(format!("clip {}: {e}", clip.clip_id)))?;
        rmses.push(fit.rollout_rmse);
        clamped += usize::from(fit.clamped_steps > 0);
        clip.gt_controls = Some(fit.controls);
    }
    create_parent(&out)?;
    emit_eval_manifest(&clips, &out)?;

    println!(
        "fitted {} clips (lambda {}, refine {}) -> {}",
        clips.len(),
        options.lambda,
        options.refine,
        out.display()
    );
    println!("rollout RMSE (m):");
    let mut lo = 0.0;
    for hi in RMSE_BINS.iter().copied().chain([f64::INFINITY]) {
        let n = rmses.iter().filter(|&&r| r >= lo && r < hi).count();
        let label = if hi.is_finite() {
            format!("[{lo:.2}, {hi:.2})")
        } else {
            format!(">= {lo:.2}")
        };
        println!("  {label:<14} {n}");
        lo = hi;
    }
    if !rmses.is_empty() {
        let mean = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let max = rmses.iter().cloned().fold(0.0, f64::max);
        println!("  mean {mean:.4}  max {max:.4}  clips with clamped curvature {clamped}");
    }
    Ok(())
}

/// Stand-in for an endpoint that is not configured; cache hits still work.
struct Unconfigured(&'static str);

impl ChatBackend for Unconfigured {
    fn send(&self, _: &ChatRequest) -> Result<BackendReply, BackendError> {
        Err(BackendError::Fatal(GatewayError::InvalidRequest(format!(
            "{}.url is not configured and no --mock was given",
            self.0
        ))))
    }
}

fn make_backend(
    role: &'static str,
    endpoint: &EndpointConfig,
    args: &BackendArgs,
    clips: &[Clip],
    mode: OutputMode,
) -> Result<Arc<dyn ChatBackend>, Failure> {
    let base: Arc<dyn ChatBackend> = match args.mock {
        Some(MockKind::Oracle) => Arc::new(ScriptedOracle::new(clips, mode, args.sigma, args.seed)?),
        Some(MockKind::Echo) => Arc::new(EchoBackend::new(args.echo_text.clone())),
        Some(MockKind::Replay) => {
            let path = args
                .transcript
                .as_ref()
                .ok_or_else(|| Failure::Usage("--mock replay needs --transcript".into()))?;
            Arc::new(ReplayBackend::load(path)?)
        }
        None => match endpoint.http() {
            Some(http) => Arc::new(HttpBackend::new(&http)?),
            None => Arc::new(Unconfigured(role)),
        },
    };
    Ok(match &args.record {
        Some(path) => Arc::new(RecordingBackend::new(base, path)?),
        None => base,
    })
}

fn gateway(ctx: &Ctx, backend: Arc<dyn ChatBackend>) -> Arc<Gateway> {
    let g = &ctx.config.gateway;
    Arc::new(Gateway::new(backend, g.retry(), g.max_in_flight))
}

fn navigator(ctx: &Ctx, backend: Arc<dyn ChatBackend>, cache_dir: Option<PathBuf>) -> Navigator {
    let root = cache_dir.unwrap_or_else(|| ctx.config.paths.cache_dir.clone());
    Navigator::new(gateway(ctx, backend), ctx.config.navigator.sampling(), ReasonCache::new(root))
}

fn gen_reason(ctx: Ctx, a: GenReasonArgs) -> CmdResult {
    let mut clips = read_eval_manifest(&a.manifest)?;
    let out = a.out.unwrap_or_else(|| ctx.config.paths.output_dir.join("clips_reasoned.jsonl"));
    let backend = make_backend("navigator", &ctx.config.navigator, &a.backend, &clips, OutputMode::Waypoint)?;
    let nav = navigator(&ctx, backend, a.cache_dir);
    if ctx.dry_run {
        let mut cached = 0;
        for clip in &clips {
            cached += usize::from(nav.cached_reasoning(clip)?.is_some());
        }
        println!(
            "{} clips, {cached} already cached in {}; would write {}",
            clips.len(),
            nav.cache.root().display(),
            out.display()
        );
        return Ok(());
    }

    let results = nav.reason_all(&clips, ctx.workers)?;
    let mut failed = 0;
    for (clip, result) in clips.iter_mut().zip(results) {
        match result {
            Ok(r) => clip.reasoning = Some(r),
            Err(e) => {
                failed += 1;
                log::error!("clip {}: {e}", clip.clip_id);
            }
        }
    }
    create_parent(&out)?;
    emit_eval_manifest(&clips, &out)?;
    println!(
        "reasoning for {}/{} clips -> {} (cache {}: {} entries)",
        clips.len() - failed,
        clips.len(),
        out.display(),
        nav.cache.root().display(),
        nav.cache.len()
    );
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} clip(s) without reasoning")));
    }
    Ok(())
}

fn emit_sft(ctx: Ctx, a: EmitSftArgs) -> CmdResult {
    let mode = match a.mode {
        Some(m) => m,
        None => ctx.config.eval.mode.parse().map_err(Failure::Usage)?,
    };
    let flags = flags_of(a.flags.as_deref().unwrap_or(&ctx.config.eval.flags))?;
    let mut clips = read_eval_manifest(&a.manifest)?;
    if flags.reason {
        let nav = navigator(&ctx, Arc::new(Unconfigured("navigator")), a.cache_dir);
        for clip in clips.iter_mut().filter(|c| c.reasoning.is_none()) {
            clip.reasoning = nav.cached_reasoning(clip)?;
        }
    }
    let dir = a.out.unwrap_or_else(|| {
        ctx.config
            .paths
            .output_dir
            .join(format!("sft-{mode}-{}", flags.label()))
    });
    let corpus = dir.join("corpus.jsonl");
    if ctx.dry_run {
        let missing = clips.iter().filter(|c| flags.reason && c.reasoning.is_none()).count();
        println!(
            "would write {} {mode} records ({}) to {}; {missing} clip(s) lack reasoning",
            clips.len(),
            flags.label(),
            corpus.display()
        );
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let n = emit_sft_corpus(&clips, mode, flags, PromptTemplates::builtin(), &corpus)?;
    navidrive::io_util::write_atomic(&dir.join("README.md"), |w| {
        w.write_all(corpus_readme(mode, flags, n).as_bytes())
    })?;
    println!("{n} {mode} records ({}) -> {}", flags.label(), corpus.display());
    Ok(())
}

fn evaluate(mut ctx: Ctx, a: EvaluateArgs, ablate: bool) -> CmdResult {
    if let Some(f) = &a.flags {
        ctx.config.eval.flags = f.clone();
    }
    if let Some(k) = a.k {
        ctx.config.eval.k = k;
    }
    if let Some(m) = a.mode {
        ctx.config.eval.mode = m.to_string();
    }
    if a.six_second {
        ctx.config.eval.six_second = true;
    }
    if a.exclude_fallback {
        ctx.config.eval.include_fallback = false;
    }
    ctx.config.validate().map_err(Failure::Usage)?;
    if !(a.backend.sigma.is_finite() && a.backend.sigma >= 0.0) {
        return Err(Failure::Usage(format!("--sigma must be >= 0, got {}", a.backend.sigma)));
    }
    let eval = &ctx.config.eval;
    let mode: OutputMode = eval.mode.parse().map_err(Failure::Usage)?;
    let rows: Vec<AblationFlags> = if ablate {
        AblationFlags::ablation_rows().to_vec()
    } else {
        vec![flags_of(&eval.flags)?]
    };
    let clips = read_eval_manifest(&a.manifest)?;
    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| ctx.config.paths.output_dir.join(if ablate { "ablation" } else { "eval" }));
    if ctx.dry_run {
        let labels: Vec<String> = rows.iter().map(|f| f.label()).collect();
        println!(
            "would evaluate {} clips x [{}] with K = {}, {mode} mode -> {}",
            clips.len(),
            labels.join(", "),
            eval.k,
            out_dir.display()
        );
        return Ok(());
    }

    let driver_backend = make_backend("driver", &ctx.config.driver, &a.backend, &clips, mode)?;
    let mut driver = Driver::new(gateway(&ctx, driver_backend.clone()), ctx.config.driver.sampling());
    driver.kappa_max = ctx.config.fitting.kappa_max;
    let navigator_backend = if a.backend.mock.is_some() {
        driver_backend
    } else {
        make_backend("navigator", &ctx.config.navigator, &a.backend, &clips, mode)?
    };
    let nav = navigator(&ctx, navigator_backend, a.cache_dir.clone());

    let mut reports: Vec<EvalReport> = Vec::with_capacity(rows.len());
    for flags in rows {
        let options = EvalOptions {
            flags,
            k: eval.k,
            mode,
            include_fallback: eval.include_fallback,
            workers: ctx.workers,
        };
        reports.push(run_eval(&clips, &driver, Some(&nav), &options)?);
    }

    std::fs::create_dir_all(&out_dir)?;
    let stem = if ablate { "ablation" } else { "report" };
    for format in [ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Jsonl] {
        let path = out_dir.join(format!("{stem}.{}", format.extension()));
        emit_report(&reports, format, eval.six_second, &path)?;
    }
    print!("{}", render_markdown(&reports, eval.six_second));
    println!("reports -> {}", out_dir.display());
    Ok(())
}

fn rollout(a: RolloutArgs) -> CmdResult {
    let text = match (&a.actions, &a.actions_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => std::fs::read_to_string(p)?,
        (None, None) => return Err(Failure::Usage("give --actions or --actions-file".into())),
    };
    if !(a.speed.is_finite() && a.speed >= 0.0) || !(a.dt.is_finite() && a.dt > 0.0) {
        return Err(Failure::Usage("--speed must be >= 0 and --dt > 0".into()));
    }
    let count = text.matches('(').count();
    let controls = parse_actions(&text, count, a.dt, f64::INFINITY)
        .map_err(|e| Failure::Runtime(format!("cannot parse actions: {e}")))?;
    if controls.is_empty() {
        return Err(Failure::Runtime("no actions given".into()));
    }
    let traj = kinematics::rollout(&controls, &KinematicState::at_origin(a.speed))?;
    println!("{}", serialize_waypoints(&traj));
    Ok(())
}

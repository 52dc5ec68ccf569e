use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use echotrack::checkpoint::load_model;
use echotrack::container::{read_scene, write_json, Scene, TrackFile};
use echotrack::gls::{cohort_report, peak_gls, CohortManifest};
use echotrack::metrics::{evaluate, static_prediction, EvalReport, VideoMetrics};
use echotrack::model::{Tracker, ModelConfig};
use echotrack::sequence::{rescale_trajectories, Resolution, TrajectorySet};
use echotrack::synthdata::{make_benchmark, split_sizes, Benchmark, BenchmarkConfig, Split};
use echotrack::training::{fit_partial, parse_phases, OutputDir, TrainConfig};

const RUN_MANIFEST: &str = "run.json";
const RUN_SCHEMA: &str = "echotrack.run/1";

#[derive(Parser, Debug)]
#[command(name = "echotrack", version, about = "Point tracking for echocardiography sequences")]
struct Cli {
    /// Compute device; only `cpu` is available.
    #[arg(long, env = "ECHOTRACK_DEVICE", default_value = "cpu", global = true)]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark with exact ground truth.
    Synth(SynthArgs),
    /// Train a model on a benchmark's train split.
    Train(TrainArgs),
    /// Track the query points of one scene.
    Track(TrackArgs),
    /// Score a model, a baseline or stored predictions on a benchmark split.
    Eval(EvalArgs),
    /// Peak global longitudinal strain of a track file or scene.
    Gls(GlsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with benchmark parameter ranges.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    scenes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per scene, `N` or `MIN..MAX`.
    #[arg(long, value_parser = parse_range)]
    frames: Option<[usize; 2]>,
    /// Points per scene, `N` or `MIN..MAX`.
    #[arg(long, value_parser = parse_range)]
    points: Option<[usize; 2]>,
    /// Frame size, `HxW`.
    #[arg(long, value_parser = parse_size)]
    size: Option<Resolution>,
    /// Replace the scenes of an existing benchmark directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Benchmark directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Curriculum, e.g. `2x16,1x32` (epochs x frames).
    #[arg(long)]
    phases: Option<String>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Working resolution, `HxW`.
    #[arg(long, value_parser = parse_size)]
    working_size: Option<Resolution>,
    /// Continue from a `last.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs of the schedule; continue with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory with queries.
    #[arg(long)]
    scene: PathBuf,
    /// Output track file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Static,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Benchmark directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, conflicts_with_all = ["baseline", "predictions"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "predictions")]
    baseline: Option<Baseline>,
    /// Directory of `<scene id>.json` track files.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Resolution metrics are computed at (defaults to the model's working
    /// resolution, or the scene size without a model).
    #[arg(long, value_parser = parse_size)]
    eval_size: Option<Resolution>,
    /// Measure inference time per video.
    #[arg(long)]
    timed: bool,
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GlsArgs {
    /// Track file or scene directory.
    #[arg(long, required_unless_present = "cohort")]
    tracks: Option<PathBuf>,
    /// Cohort manifest pairing test and retest exams.
    #[arg(long, conflicts_with = "tracks")]
    cohort: Option<PathBuf>,
    /// Midline point order, comma separated (default: stored order).
    #[arg(long, value_delimiter = ',')]
    ordering: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    ed_frame: usize,
    /// Also report statistics over per-exam means.
    #[arg(long)]
    exam_means: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once("..") {
        Some((a, b)) => Ok([num(a)?, num(b)?]),
        None => num(s).map(|n| [n, n]),
    }
}

fn parse_size(s: &str) -> Result<Resolution, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("{s:?} is not HxW"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok(Resolution::new(num(h)?, num(w)?))
}

#[derive(Debug, Serialize)]
struct RunManifest {
    schema: &'static str,
    command: &'static str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    output: PathBuf,
    started_unix: u64,
    finished_unix: Option<u64>,
    arguments: Vec<String>,
}

impl RunManifest {
    fn start(command: &'static str, output: &Path, config: Option<&Path>, seed: Option<u64>, checkpoint: Option<&Path>) -> Result<Self> {
        std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        let m = Self {
            schema: RUN_SCHEMA,
            command,
            config: config.map(Path::to_path_buf),
            seed,
            checkpoint: checkpoint.map(Path::to_path_buf),
            output: output.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            arguments: std::env::args().collect(),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        Ok(write_json(&self.output.join(RUN_MANIFEST), self)?)
    }

    fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        self.write()
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(n) = args.scenes {
        cfg.scenes = n as usize;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = args.frames {
        cfg.frames = f;
    }
    if let Some(p) = args.points {
        cfg.points = p;
    }
    if let Some(r) = args.size {
        cfg.resolution = r;
    }
    cfg.validate()?;
    if args.out.exists() && std::fs::read_dir(&args.out)?.next().is_some() && !args.force {
        bail!("{} is not empty; pass --force to regenerate", args.out.display());
    }
    let run = RunManifest::start("synth", &args.out, args.config.as_deref(), Some(cfg.seed), None)?;
    let manifest = make_benchmark(&args.out, &cfg, true)?;
    let (train, val, test) = split_sizes(manifest.scenes.len());
    println!("wrote {} scenes to {} (train {train}, val {val}, test {test})", manifest.scenes.len(), args.out.display());
    run.finish()
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = match &args.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    let mut model_cfg = file.model.unwrap_or_default();
    let mut cfg = file.train.unwrap_or_default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(p) = &args.phases {
        cfg.phases = parse_phases(p)?;
    }
    if let Some(k) = args.steps_per_epoch {
        cfg.steps_per_epoch = k;
    }
    if let Some(i) = args.iterations {
        model_cfg.iterations = i;
    }
    if let Some(r) = args.working_size {
        model_cfg.working_resolution = r;
    }
    cfg.validate()?;
    model_cfg.validate()?;

    let bench = Benchmark::open(&args.data)?;
    let train_set = bench.load_split(Split::Train)?;
    let val_set = bench.load_split(Split::Val)?;
    ensure!(!train_set.is_empty() || cfg.phases.is_empty(), "{} has no training scenes", args.data.display());
    let run = RunManifest::start("train", &args.out, args.config.as_deref(), Some(cfg.seed), args.resume.as_deref())?;
    std::fs::write(args.out.join("config.toml"), toml::to_string(&TrainFileOut { model: &model_cfg, train: &cfg })?)?;
    let mut model = Tracker::new(model_cfg, cfg.seed)?;
    let out = OutputDir { root: args.out.clone() };
    let outcome = fit_partial(
        &mut model,
        &train_set,
        &val_set,
        &cfg,
        Some(&out),
        args.resume.as_deref(),
        args.stop_after.unwrap_or(usize::MAX),
    )?;
    for e in &outcome.epochs {
        let val = e.val_delta_avg.map_or("-".into(), |v| format!("{v:.2}"));
        println!("epoch {:>3}  frames {:>3}  loss {:.4}  val delta_avg {val}", e.epoch, e.frames, e.mean_loss);
    }
    println!("{} steps; best checkpoint {}", outcome.steps, out.best().display());
    run.finish()
}

#[derive(Serialize)]
struct TrainFileOut<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn source_tracks(scene: &Scene, tracks: &TrajectorySet) -> Result<(TrajectorySet, Resolution)> {
    let src = scene.sequence.source_resolution();
    Ok((rescale_trajectories(tracks, scene.sequence.resolution(), src)?, src))
}

fn track(args: TrackArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?
        .model;
    let scene = read_scene(&args.scene)?;
    let queries = scene.query_set()?;
    let parent = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let run = RunManifest::start("track", parent, None, None, Some(&args.checkpoint))?;
    let tracks = model.track(&scene.sequence, &queries)?;
    let (tracks, res) = source_tracks(&scene, &tracks)?;
    TrackFile::new(&tracks, res).write(&args.out)?;
    println!("tracked {} points over {} frames -> {}", tracks.num_points(), tracks.num_frames(), args.out.display());
    run.finish()
}

fn eval(args: EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let bench = Benchmark::open(&args.data)?;
    let scenes = bench.load_split(split)?;
    ensure!(!scenes.is_empty(), "split {} of {} is empty", args.split, args.data.display());
    let default_res = scenes[0].1.sequence.resolution();
    let run = RunManifest::start("eval", &args.out, None, None, args.checkpoint.as_deref())?;
    let report: EvalReport = if let Some(ckpt) = &args.checkpoint {
        let model = load_model(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?.model;
        let res = args.eval_size.unwrap_or(model.config().working_resolution);
        evaluate(&scenes, res, args.timed, |s| model.track(&s.sequence, &s.query_set()?))?
    } else if let Some(dir) = &args.predictions {
        ensure!(!args.timed, "--timed needs a model to run");
        let res = args.eval_size.unwrap_or(default_res);
        let mut videos = Vec::with_capacity(scenes.len());
        for (id, s) in &scenes {
            let file = TrackFile::read(&dir.join(format!("{id}.json")))?;
            let pred = rescale_trajectories(&file.trajectories()?, file.resolution, res)?;
            let gt = s.tracks.as_ref().with_context(|| format!("scene {id} has no ground truth"))?;
            let gt = rescale_trajectories(gt, s.sequence.resolution(), res)?;
            videos.push(VideoMetrics::compute(id.clone(), &pred, &gt)?);
        }
        EvalReport::from_videos(videos)?
    } else if args.baseline.is_some() {
        evaluate(&scenes, args.eval_size.unwrap_or(default_res), args.timed, static_prediction)?
    } else {
        bail!("one of --checkpoint, --baseline or --predictions is required");
    };
    ensure!(report.is_monotone(), "threshold accuracies are not monotone");
    write_json(&args.out.join("report.json"), &report)?;
    std::fs::write(args.out.join("report.txt"), report.to_text())?;
    print!("{}", report.table());
    run.finish()
}

fn load_tracks(path: &Path) -> Result<TrajectorySet> {
    if path.is_dir() {
        let scene = read_scene(path)?;
        let t = scene
            .tracks
            .as_ref()
            .with_context(|| format!("{} has no tracks", path.display()))?;
        Ok(source_tracks(&scene, t)?.0)
    } else {
        Ok(TrackFile::read(path)?.trajectories()?)
    }
}

fn gls(args: GlsArgs) -> Result<()> {
    let run = RunManifest::start("gls", &args.out, None, None, None)?;
    if let Some(path) = &args.cohort {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = CohortManifest::parse(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let measure = |rel: &str| -> Result<f64> {
                let t = load_tracks(&base.join(rel))?;
                let ordering = e.ordering.clone().unwrap_or_else(|| (0..t.num_points()).collect());
                Ok(peak_gls(&t, &ordering, e.ed_frame)?.peak_gls)
            };
            pairs.push((measure(&e.test)?, measure(&e.retest)?));
        }
        let report = cohort_report(&manifest.entries, &pairs, args.exam_means)?;
        write_json(&args.out.join("cohort.json"), &report)?;
        let s = &report.per_view;
        println!("pairs {}  mu {:.4}  sigma {:.4}  mad {:.4}", s.pairs, s.mu, s.sigma, s.mad);
        if let Some(s) = &report.per_exam {
            println!("exam means: pairs {}  mu {:.4}  sigma {:.4}  mad {:.4}", s.pairs, s.mu, s.sigma, s.mad);
        }
    } else {
        let path = args.tracks.as_deref().expect("clap requires --tracks without --cohort");
        let t = load_tracks(path)?;
        let ordering = args.ordering.clone().unwrap_or_else(|| (0..t.num_points()).collect());
        let report = peak_gls(&t, &ordering, args.ed_frame)?;
        write_json(&args.out.join("gls.json"), &report)?;
        std::fs::write(args.out.join("gls.txt"), report.to_text())?;
        print!("{}", report.to_text());
    }
    run.finish()
}

fn run(cli: Cli) -> Result<()> {
    ensure!(
        cli.device.eq_ignore_ascii_case("cpu"),
        "device {:?} is not available; this build runs on the cpu only",
        cli.device
    );
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Gls(a) => gls(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use signvox::anchors::{kmeans_anchors_with, KMeansConfig, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use signvox::datasets::{
    class_distribution, group_by_image, parse_gtsdb, parse_image_dims, parse_mapillary, read_yolo_labels,
    split_train_test, write_split_manifest, write_yolo_labels, ClassMap, Conversion, GroundTruthInstance,
};
use signvox::decode::{GridDecodeConfig, DEFAULT_INPUT_SIZE};
use signvox::eval::{evaluate_with, read_detections_jsonl, EvalOptions, MAP50_IOU};
use signvox::narration::{
    CommandBackend, NarrationPolicy, Narrator, SpeechBackend, TemplateTable, TextSink, DEFAULT_COOLDOWN_MS,
    DEFAULT_LOCALE,
};
use signvox::pipeline::{
    detection_log_frames, run_pipeline, FrameRecord, PipelineConfig, PipelineError, TensorDirSource,
};
use signvox::postprocess::{NmsConfig, DEFAULT_NMS_IOU};
use signvox::Execution;

#[derive(Debug, Parser)]
#[command(
    name = "signvox",
    version,
    about = "Traffic-sign detection toolkit: datasets, anchors, evaluation and narrated replay"
)]
struct Cli {
    /// Seed for every random choice (split shuffle, anchor seeding).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Only log errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert dataset annotations to YOLO label files.
    #[command(subcommand)]
    Convert(ConvertCommand),
    /// Seeded train/test split of an image list.
    Split(SplitArgs),
    /// Cluster label box sizes into Darknet anchors.
    Anchors(AnchorsArgs),
    /// Score detections against YOLO ground truth.
    Eval(EvalArgs),
    /// Replay frames through decode, NMS and narration.
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
enum ConvertCommand {
    /// GTSDB `gt.txt` annotations.
    Gtsdb(GtsdbArgs),
    /// A directory of Mapillary JSON documents, one per image.
    Mapillary(MapillaryArgs),
}

#[derive(Debug, Args)]
struct GtsdbArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// `filename;width;height` per line.
    #[arg(long)]
    dims: PathBuf,
    /// Class map file, or `gtsdb` / `mapillary` for a bundled one.
    #[arg(long, default_value = "gtsdb")]
    classmap: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MapillaryArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "mapillary")]
    classmap: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// One image id per line.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnchorsArgs {
    /// Directory of YOLO label files.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Network input size in pixels.
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    resolution: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Detections as JSON lines.
    #[arg(long)]
    detections: PathBuf,
    /// Directory of YOLO label files.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = MAP50_IOU)]
    iou: f64,
    /// Minimum score for a detection to count toward TP/FP.
    #[arg(long, default_value_t = 0.0)]
    score_threshold: f64,
    /// Class map used to name classes in the table.
    #[arg(long)]
    classmap: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Text,
    Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Directory of tensor frame files, or a detections JSON-lines file.
    #[arg(long)]
    frames: PathBuf,
    /// Decode settings, e.g. `s=19,b=3,c=4,thresh=0.25`. Tensor headers
    /// carry the shape; `s` and `b` are checked against them when given.
    #[arg(long, default_value = "thresh=0.25")]
    decode: DecodeSpec,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f64,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long, default_value_t = DEFAULT_COOLDOWN_MS)]
    cooldown_ms: u64,
    #[arg(long, default_value_t = 0.5)]
    min_score: f64,
    #[arg(long, default_value = DEFAULT_LOCALE)]
    locale: String,
    #[arg(long, default_value_t = 8)]
    queue_capacity: usize,
    #[arg(long, value_enum, default_value_t = BackendKind::Text)]
    backend: BackendKind,
    /// Speech command for `--backend command`; the message is appended.
    #[arg(long)]
    command: Option<String>,
    /// Where the text backend writes; stdout when absent.
    #[arg(long)]
    narration_out: Option<PathBuf>,
    /// Template table file; the bundled table when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Class names for narration: a file, `gtsdb` or `mapillary`.
    #[arg(long, default_value = "gtsdb")]
    classmap: String,
    /// Stamp frame i with i * period instead of wall-clock time.
    #[arg(long)]
    frame_period_ms: Option<u64>,
    /// Write kept detections as JSON lines.
    #[arg(long)]
    detection_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct DecodeSpec {
    s: Option<usize>,
    b: Option<usize>,
    c: Option<usize>,
    thresh: Option<f64>,
}

impl std::str::FromStr for DecodeSpec {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, String> {
        let mut spec = DecodeSpec::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let count = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
            match key.trim() {
                "s" => spec.s = Some(count()?),
                "b" => spec.b = Some(count()?),
                "c" => spec.c = Some(count()?),
                "thresh" => spec.thresh = Some(value.parse().map_err(|e| format!("thresh: {e}"))?),
                other => return Err(format!("unknown decode key {other:?}")),
            }
        }
        Ok(spec)
    }
}

#[derive(Debug)]
enum CliError {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

trait Classify<T> {
    fn input(self) -> Result<T, CliError>;
    fn internal(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Input(e.into()))
    }

    fn internal(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Internal(e.into()))
    }
}

type CliResult = Result<(), CliError>;

fn load_classmap(spec: &str) -> anyhow::Result<ClassMap> {
    Ok(match spec {
        "gtsdb" => ClassMap::gtsdb_default(),
        "mapillary" => ClassMap::mapillary_default(),
        path => ClassMap::from_file(Path::new(path))?,
    })
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn report_conversion(conv: &Conversion, images: usize, files: usize, classes: &ClassMap) {
    for w in &conv.warnings {
        log::warn!("{}: {}", w.location, w.message);
    }
    println!(
        "images={images} label_files={files} instances={} dropped={} warnings={}",
        conv.instances.len(),
        conv.dropped,
        conv.warnings.len()
    );
    for c in class_distribution(&conv.instances, classes) {
        println!("{}\t{}\t{}", c.class_id, c.name, c.count);
    }
}

fn convert_gtsdb(args: &GtsdbArgs) -> CliResult {
    let classes = load_classmap(&args.classmap).input()?;
    let dims_text = fs::read_to_string(&args.dims)
        .with_context(|| format!("reading {}", args.dims.display()))
        .input()?;
    let dims = parse_image_dims(&dims_text).input()?;
    let file = File::open(&args.annotations)
        .with_context(|| format!("opening {}", args.annotations.display()))
        .input()?;
    let conv = parse_gtsdb(BufReader::new(file), &dims, &classes).input()?;
    let mut images: Vec<String> = dims.keys().map(|k| stem(k)).collect();
    images.sort();
    let grouped = group_by_image(&conv.instances, images.iter().map(String::as_str));
    let files = write_yolo_labels(&grouped, &args.out).internal()?;
    report_conversion(&conv, images.len(), files, &classes);
    Ok(())
}

fn convert_mapillary(args: &MapillaryArgs) -> CliResult {
    let classes = load_classmap(&args.classmap).input()?;
    let mut docs: Vec<PathBuf> = fs::read_dir(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .input()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    docs.sort();
    let mut all = Conversion::default();
    let mut images = Vec::new();
    for path in &docs {
        let image_id = stem(&path.to_string_lossy());
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .input()?;
        let conv = parse_mapillary(&image_id, &text, &classes)
            .with_context(|| path.display().to_string())
            .input()?;
        all.instances.extend(conv.instances);
        all.dropped += conv.dropped;
        all.warnings.extend(conv.warnings);
        images.push(image_id);
    }
    let grouped = group_by_image(&all.instances, images.iter().map(String::as_str));
    let files = write_yolo_labels(&grouped, &args.out).internal()?;
    report_conversion(&all, images.len(), files, &classes);
    Ok(())
}

fn split(args: &SplitArgs, seed: u64) -> CliResult {
    let text = fs::read_to_string(&args.images)
        .with_context(|| format!("reading {}", args.images.display()))
        .input()?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let (train, test) = split_train_test(&ids, args.train_fraction, seed).input()?;
    write_split_manifest(&train, &test, &args.out).internal()?;
    println!("train={} test={} seed={seed}", train.len(), test.len());
    Ok(())
}

fn anchors(args: &AnchorsArgs, seed: u64, exec: Execution) -> CliResult {
    let labels = read_yolo_labels(&args.labels).input()?;
    let boxes: Vec<(f64, f64)> = labels.iter().map(|l| (l.bbox.w, l.bbox.h)).collect();
    let cfg = KMeansConfig {
        k: args.k,
        seed,
        max_iters: args.max_iters,
        tol: args.tol,
        exec,
    };
    let set = kmeans_anchors_with(&boxes, &cfg).input()?;
    println!("anchors={}", set.to_darknet(args.resolution, args.resolution));
    println!(
        "boxes={} mean_iou={:.4} iterations={}",
        boxes.len(),
        1.0 - set.final_cost,
        set.cost_history.len()
    );
    Ok(())
}

fn eval(args: &EvalArgs, exec: Execution) -> CliResult {
    let file = File::open(&args.detections)
        .with_context(|| format!("opening {}", args.detections.display()))
        .input()?;
    let dets = read_detections_jsonl(BufReader::new(file)).input()?;
    let truths: Vec<GroundTruthInstance> = read_yolo_labels(&args.truth).input()?;
    let names = args.classmap.as_deref().map(load_classmap).transpose().input()?;
    let opts = EvalOptions {
        iou_threshold: args.iou,
        score_threshold: args.score_threshold,
        exec,
    };
    let report = evaluate_with(&dets, &truths, &opts).input()?;
    print!("{}", report.render_table(names.as_ref()));
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).internal()?;
        fs::write(path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .internal()?;
    }
    Ok(())
}

fn check_shape(frame: &FrameRecord, spec: &DecodeSpec) -> Result<(), PipelineError> {
    if let signvox::pipeline::FramePayload::Tensors(layers) = &frame.payload {
        for l in layers {
            let cfg = l.config();
            let mismatch = spec.s.is_some_and(|s| s != cfg.s) || spec.b.is_some_and(|b| b != cfg.b);
            if mismatch {
                return Err(PipelineError::Stream {
                    frame_index: frame.frame_index,
                    message: format!("layer is {}x{} with B={}, expected {:?}", cfg.s, cfg.s, cfg.b, spec),
                });
            }
        }
    }
    Ok(())
}

fn build_backend(args: &RunArgs) -> anyhow::Result<Box<dyn SpeechBackend>> {
    Ok(match args.backend {
        BackendKind::Text => match &args.narration_out {
            Some(path) => {
                let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                Box::new(TextSink::new(BufWriter::new(file)))
            }
            None => Box::new(TextSink::new(io::stdout())),
        },
        BackendKind::Command => {
            let line = args
                .command
                .as_deref()
                .ok_or_else(|| anyhow!("--backend command needs --command"))?;
            Box::new(CommandBackend::from_command_line(line).ok_or_else(|| anyhow!("--command is empty"))?)
        }
    })
}

fn run(args: &RunArgs, exec: Execution) -> CliResult {
    let threshold = args.decode.thresh.unwrap_or(0.25);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Input(anyhow!("thresh {threshold} must lie in [0, 1]")));
    }
    let nms = NmsConfig::new(args.nms).map_err(|e| anyhow!("--nms: {e}")).input()?;
    let cfg = PipelineConfig {
        conf_threshold: threshold,
        num_classes: args.decode.c,
        nms: NmsConfig {
            class_agnostic: args.class_agnostic,
            ..nms
        },
        exec,
        ..PipelineConfig::default()
    };
    let templates = match &args.templates {
        Some(path) => TemplateTable::from_file(path).input()?,
        None => TemplateTable::builtin(),
    };
    let names = load_classmap(&args.classmap).input()?.names().to_vec();
    let policy = NarrationPolicy {
        cooldown_ms: args.cooldown_ms,
        min_score: args.min_score,
        locale: args.locale.clone(),
        queue_capacity: args.queue_capacity,
    };
    let narrator = Narrator::new(policy, templates, names).input()?;
    let backend = build_backend(args).input()?;

    let frames: Box<dyn Iterator<Item = Result<FrameRecord, PipelineError>>> = if args.frames.is_dir() {
        let base = GridDecodeConfig::new(1, 1, 1, threshold).input()?;
        let mut source = TensorDirSource::open(&args.frames, base).input()?;
        if let Some(p) = args.frame_period_ms {
            source = source.with_frame_period_ms(p);
        }
        log::info!(
            "replaying {} tensor frames from {}",
            source.len(),
            args.frames.display()
        );
        let spec = args.decode;
        Box::new(source.map(move |f| f.and_then(|f| check_shape(&f, &spec).map(|()| f))))
    } else {
        let file = File::open(&args.frames)
            .with_context(|| format!("opening {}", args.frames.display()))
            .input()?;
        let mut frames = detection_log_frames(BufReader::new(file)).input()?;
        if let Some(p) = args.frame_period_ms {
            for f in &mut frames {
                f.capture_ts_ms = Some(f.frame_index * p);
            }
        }
        Box::new(frames.into_iter().map(Ok))
    };

    let mut log_file = match &args.detection_log {
        Some(path) => Some(BufWriter::new(
            File::create(path)
                .with_context(|| format!("creating {}", path.display()))
                .input()?,
        )),
        None => None,
    };
    let summary = run_pipeline(
        frames,
        &cfg,
        narrator,
        backend,
        log_file.as_mut().map(|w| w as &mut dyn Write),
    )
    .input()?;
    if let Some(mut w) = log_file {
        w.flush().internal()?;
    }
    println!(
        "frames={} detections={} events_produced={} events_emitted={} events_dropped={} spoken={} backend_failures={} average_fps={:.1}",
        summary.frames,
        summary.detections,
        summary.events_produced,
        summary.events_emitted,
        summary.events_dropped,
        summary.spoken,
        summary.backend_failures,
        summary.average_fps
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match &cli.command {
        Command::Convert(ConvertCommand::Gtsdb(a)) => convert_gtsdb(a),
        Command::Convert(ConvertCommand::Mapillary(a)) => convert_mapillary(a),
        Command::Split(a) => split(a, cli.seed),
        Command::Anchors(a) => anchors(a, cli.seed, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Run(a) => run(a, exec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    match std::panic::catch_unwind(|| dispatch(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Input(e))) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Internal(e))) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}

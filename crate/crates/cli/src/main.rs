use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tanhwarp::dataio::{
    colorize_overlay, load_image, load_labelmap, load_landmarks, load_rgb, load_scores, save_dataset, save_image,
    save_labelmap, save_scores, Manifest,
};
use tanhwarp::evaluation::{f_measure, fuse_multiface, ClassScores};
use tanhwarp::model::{background_fill, focus_for, HybridNet, ModelConfig};
use tanhwarp::raster::{Image, LabelMap};
use tanhwarp::sampler::{BorderPolicy, FocusMode};
use tanhwarp::training::{generate_synthetic, parse_run_config, save_loss_csv, train, TrainConfig};
use tanhwarp::Error;

#[derive(Parser)]
#[command(name = "tanhwarp", version, about = "Face parsing with RoI tanh-warping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warp an image into the aligned view of its face.
    Warp(WarpArgs),
    /// Map a warped image or score file back onto the source grid.
    Dewarp(DewarpArgs),
    /// Write a synthetic labelled dataset.
    GenSynth(GenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Parse every face of an image with a trained model.
    Parse(ParseArgs),
    /// Fuse per-face score files into one label and instance map.
    Fuse(FuseArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ViewArgs {
    /// Focus mode: warp, crop or rescale.
    #[arg(long, default_value = "warp")]
    mode: FocusMode,
    /// Side of the square view.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    /// Replicate edge pixels instead of filling with zeros.
    #[arg(long)]
    replicate: bool,
}

#[derive(Args)]
struct DewarpArgs {
    /// Warped PNG or `TWSM` score file.
    #[arg(long)]
    input: PathBuf,
    /// Landmarks of the face in the source image.
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Output PNG; score inputs with 11 channels are written as labels.
    #[arg(long)]
    out: PathBuf,
    /// Also write the de-warped values as a score file.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long, default_value = "warp")]
    mode: FocusMode,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` model and schedule settings; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<FocusMode>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One landmark file per face.
    #[arg(long, num_args = 1.., required = true)]
    landmarks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the mode the model was trained with.
    #[arg(long)]
    mode: Option<FocusMode>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, num_args = 1.., required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Warp(a) => warp(a),
        Command::Dewarp(a) => dewarp(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Parse(a) => parse(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let image = load_image(&a.image)?;
    let lm = load_landmarks(&a.landmarks)?;
    let focus = focus_for((image.height(), image.width()), &lm, a.view.mode, a.view.size)?;
    let policy = if a.replicate {
        BorderPolicy::ReplicateEdge
    } else {
        BorderPolicy::ZeroFill
    };
    save_image(&focus.warp_image(&image, policy), &a.out)?;
    Ok(())
}

fn is_score_file(path: &Path) -> bool {
    std::fs::read(path).map(|b| b.starts_with(b"TWSM")).unwrap_or(false)
}

fn dewarp(a: DewarpArgs) -> Result<()> {
    if a.width == 0 || a.height == 0 {
        return Err(CliError::Usage("--width and --height must be positive".into()));
    }
    let input = if is_score_file(&a.input) {
        load_scores(&a.input)?
    } else {
        load_image(&a.input)?
    };
    if input.height() != input.width() {
        return Err(Error::ShapeMismatch(format!("warped input must be square, got {}x{}", input.height(), input.width())).into());
    }
    let lm = load_landmarks(&a.landmarks)?;
    let focus = focus_for((a.height, a.width), &lm, a.mode, input.width())?;
    let fill = if input.channels() == background_fill().len() {
        background_fill()
    } else {
        vec![0.0; input.channels()]
    };
    let out = focus.dewarp_scores(&input, &fill)?;
    if let Some(p) = &a.scores_out {
        save_scores(&out, p)?;
    }
    match out.channels() {
        1 | 3 => save_image(&out, &a.out)?,
        _ => save_labelmap(&out.argmax_labels(), &a.out)?,
    }
    Ok(())
}

fn gen_synth(a: GenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let samples = generate_synthetic(a.seed, a.count)?;
    create_dir(&a.out)?;
    save_dataset(&samples, &a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut model, mut cfg) = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            parse_run_config(&text)?
        }
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    if let Some(m) = a.mode {
        model.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = Manifest::load(&a.data)?.load_samples()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig(format!("{} lists no labelled samples", a.data.display())).into());
    }
    let outcome = train(model, &cfg, &data)?;
    create_dir(&a.out)?;
    outcome.model.save(&a.out)?;
    save_loss_csv(&outcome.log, &a.out.join("loss.csv"))?;
    std::fs::write(a.out.join("train.cfg"), cfg.to_kv()).map_err(|e| Error::Io {
        path: a.out.join("train.cfg"),
        source: e,
    })?;
    Ok(())
}

fn parse(a: ParseArgs) -> Result<()> {
    let net = HybridNet::<f32>::load(&a.model)?;
    let image = load_rgb(&a.image)?;
    create_dir(&a.out)?;
    for (k, lm_path) in a.landmarks.iter().enumerate() {
        let lm = load_landmarks(lm_path)?;
        let p = net.parse_face(&image, &lm, a.mode)?;
        save_labelmap(&p.labels, &a.out.join(format!("face{k}_labels.png")))?;
        save_scores(&p.source_scores, &a.out.join(format!("face{k}_scores.twsm")))?;
        let overlay = colorize_overlay(&image, &p.labels, &net.config().palette)?;
        save_image(&overlay, &a.out.join(format!("face{k}_overlay.png")))?;
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    if a.scores.len() > 255 {
        return Err(CliError::Usage("at most 255 faces can be fused".into()));
    }
    let maps = a.scores.iter().map(|p| load_scores(p)).collect::<tanhwarp::Result<Vec<Image>>>()?;
    let (labels, instances) = fuse_multiface(&maps)?;
    create_dir(&a.out)?;
    save_labelmap(&labels, &a.out.join("labels.png"))?;
    // 0 marks pixels no face claims; face k is stored as k + 1.
    let ids = instances.iter().map(|o| o.map_or(0, |f| f as u8 + 1)).collect();
    let ids = LabelMap::new(labels.height(), labels.width(), ids)?;
    let img = Image::new(ids.height(), ids.width(), 1, ids.data().iter().map(|&v| v as f32 / 255.0).collect())?;
    save_image(&img, &a.out.join("instances.png"))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let read_dir = |d: &Path| {
        std::fs::read_dir(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })
    };
    let mut names: Vec<PathBuf> = read_dir(&a.pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidConfig(format!("no PNG label maps in {}", a.pred_dir.display())).into());
    }
    let mut scores = ClassScores::new();
    for pred_path in names {
        let gt_path = a.gt_dir.join(pred_path.file_name().unwrap());
        let pred = load_labelmap(&pred_path)?;
        let gt = load_labelmap(&gt_path)?;
        scores = f_measure(&pred, &gt, scores)?;
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    scores.save_csv(&a.report)?;
    Ok(())
}

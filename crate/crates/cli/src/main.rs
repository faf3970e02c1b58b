//! `qam`: generate shapeworld data, train, evaluate and answer questions.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use config::ConfigFile;
use qam_core::checkpoint;
use qam_core::model::ModelConfig;
use qam_core::shapeworld::{cell_features, generate_dataset, read_ppm, DatasetDir, GeneratorConfig, HsvBins, Proportions, Split};
use qam_core::train::{evaluate, history_csv, load_items, train, TrainConfig, TrainData};
use qam_core::{Error, Result};

const CHECKPOINT_FILE: &str = "model.ckpt";
const HISTORY_FILE: &str = "history.csv";
/// Side of one attention cell in the exported PGM.
const PGM_CELL: u32 = 32;

#[derive(Parser)]
#[command(name = "qam", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"))]
#[command(about = "Question-guided attention for visual question answering")]
struct Cli {
    /// Worker threads for evaluation. Results don't depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapeworld dataset.
    Generate(GenerateArgs),
    /// Train a model and write the checkpoint and history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Answer one question about one image and export the attention map.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    cell_px: Option<u32>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    /// Category shares, e.g. `object=0.7,number=0.1,color=0.1,location=0.1`.
    #[arg(long)]
    proportions: Option<String>,
}

const GENERATE_KEYS: &[&str] = &[
    "seed", "train", "test", "grid", "cell-px", "min-objects", "max-objects", "proportions",
];

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    reduced_channels: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    question_dim: Option<usize>,
    #[arg(long)]
    fusion_dim: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Replace the attention map by the uniform map.
    #[arg(long)]
    no_att: bool,
    /// Also keep a snapshot every this many epochs (0 keeps none).
    #[arg(long)]
    save_every: Option<usize>,
}

const TRAIN_KEYS: &[&str] = &[
    "epochs", "seed", "batch-size", "learning-rate", "rho", "epsilon", "reduced-channels", "embed-dim",
    "question-dim", "fusion-dim", "kernel-size", "no-att", "save-every",
];

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report JSON path; defaults to `report.json` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM/PGM image whose sides divide by the model grid.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    /// Directory for `attention.csv` and `attention.pgm`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Init(_) => 3,
        Error::Compatibility(_) => 4,
        Error::Contract(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.jobs == 0 {
        Err(Error::Config("--jobs must be at least 1".into()))
    } else {
        match cli.command {
            Command::Generate(a) => generate(a),
            Command::Train(a) => train_cmd(a, cli.jobs),
            Command::Eval(a) => eval(a, cli.jobs),
            Command::Predict(a) => predict(a),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref(), GENERATE_KEYS)?;
    let d = GeneratorConfig::default();
    let proportions = match file.pick("proportions", a.proportions, String::new())? {
        s if s.is_empty() => d.proportions,
        s => s.parse::<Proportions>()?,
    };
    let cfg = GeneratorConfig {
        seed: file.pick("seed", a.seed, d.seed)?,
        grid: file.pick("grid", a.grid, d.grid)?,
        cell_px: file.pick("cell-px", a.cell_px, d.cell_px)?,
        min_objects: file.pick("min-objects", a.min_objects, d.min_objects)?,
        max_objects: file.pick("max-objects", a.max_objects, d.max_objects)?,
        train: file.pick("train", a.train, d.train)?,
        test: file.pick("test", a.test, d.test)?,
        proportions,
    };
    cfg.validate()?;
    let ds = generate_dataset(&cfg)?;
    ds.write(&a.out)
        .map_err(|e| Error::Input(format!("cannot write dataset to {}: {e}", a.out.display())))?;
    println!(
        "wrote {} train and {} test questions to {} (seed {})",
        ds.train.len(),
        ds.test.len(),
        a.out.display(),
        cfg.seed
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, jobs: usize) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref(), TRAIN_KEYS)?;
    let dir = DatasetDir::open(&a.data)?;
    let d = TrainConfig::default();
    let m = ModelConfig::default();
    let cfg = TrainConfig {
        batch_size: file.pick("batch-size", a.batch_size, d.batch_size)?,
        learning_rate: file.pick("learning-rate", a.learning_rate, d.learning_rate)?,
        epochs: file.pick("epochs", a.epochs, d.epochs)?,
        seed: file.pick("seed", a.seed, d.seed)?,
        rho: file.pick("rho", a.rho, d.rho)?,
        epsilon: file.pick("epsilon", a.epsilon, d.epsilon)?,
        model: ModelConfig {
            grid: dir.grid(),
            channels: HsvBins::default().feature_dim(),
            reduced_channels: file.pick("reduced-channels", a.reduced_channels, m.reduced_channels)?,
            embed_dim: file.pick("embed-dim", a.embed_dim, m.embed_dim)?,
            question_dim: file.pick("question-dim", a.question_dim, m.question_dim)?,
            fusion_dim: file.pick("fusion-dim", a.fusion_dim, m.fusion_dim)?,
            kernel_size: file.pick("kernel-size", a.kernel_size, m.kernel_size)?,
            attention: !file.flag("no-att", a.no_att)?,
        },
    };
    cfg.validate()?;
    let save_every = file.pick("save-every", a.save_every, 10)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| Error::Input(format!("cannot create {}: {e}", a.out.display())))?;

    let train_items = load_items(&dir, Split::Train)?;
    let test_items = load_items(&dir, Split::Test)?;
    let data = TrainData {
        question_vocab: dir.question_vocab()?,
        answer_vocab: dir.answer_vocab()?,
        train: &train_items,
        test: &test_items,
    };
    let mut history = Vec::new();
    let trained = train(&cfg, data, jobs, |r, model| {
        history.push(*r);
        fs::write(a.out.join(HISTORY_FILE), history_csv(&history))?;
        checkpoint::save(&a.out.join(CHECKPOINT_FILE), model, Some(&cfg))?;
        if save_every > 0 && r.epoch % save_every == 0 {
            checkpoint::save(&a.out.join(format!("epoch-{:03}.ckpt", r.epoch)), model, Some(&cfg))?;
        }
        let val = r.val_acc.map_or(String::new(), |v| format!(" test_acc {v:.4}"));
        eprintln!("epoch {:>3} loss {:.4} train_acc {:.4}{val}", r.epoch, r.loss, r.train_acc);
        Ok(())
    })?;
    let last = trained.history.last().expect("history starts at epoch 0");
    println!("final loss {:.4} train_acc {:.4}", last.loss, last.train_acc);
    if !test_items.is_empty() {
        println!("{}", evaluate(&trained.model, &test_items, &dir.taxonomy()?, jobs)?);
    }
    println!("checkpoint {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(a: EvalArgs, jobs: usize) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split '{other}' (train or test)"))),
    };
    let model = checkpoint::load(&a.checkpoint)?.model;
    let dir = DatasetDir::open(&a.data)?;
    checkpoint::check_dataset(&model, &dir)?;
    let items = load_items(&dir, split)?;
    if items.is_empty() {
        return Err(Error::Input(format!("the {} split is empty", a.split)));
    }
    let report = evaluate(&model, &items, &dir.taxonomy()?, jobs)?;
    println!("{report}");
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_file_name("report.json"));
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&out, json).map_err(|e| Error::Input(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let img = read_ppm(&a.image).map_err(|e| Error::Input(format!("cannot read image {}: {e}", a.image.display())))?;
    let n = model.config.grid;
    let features = cell_features(&img, n, HsvBins::default())?;
    let p = model.predict(&a.question, &features)?;
    println!("{} {:.6}", p.answer, p.probability);
    fs::create_dir_all(&a.out).map_err(|e| Error::Input(format!("cannot create {}: {e}", a.out.display())))?;
    write_attention(&a.out, &p.attention, n)
}

fn write_attention(dir: &Path, map: &[f64], n: usize) -> Result<()> {
    let mut csv = String::new();
    for row in map.chunks(n) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(csv, "{}", cells.join(",")).expect("writing to a String");
    }
    fs::write(dir.join("attention.csv"), csv)?;

    // Brightest cell is white.
    let peak = map.iter().cloned().fold(0.0, f64::max);
    let side = n as u32 * PGM_CELL;
    let img = GrayImage::from_fn(side, side, |x, y| {
        let v = map[(y / PGM_CELL) as usize * n + (x / PGM_CELL) as usize];
        Luma([if peak > 0.0 { (255.0 * v / peak).round() as u8 } else { 0 }])
    });
    // Binary graymap; the encoder would otherwise pick PAM.
    let mut pgm = Vec::new();
    PnmEncoder::new(&mut pgm)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), side, side, ExtendedColorType::L8)?;
    fs::write(dir.join("attention.pgm"), pgm)?;
    Ok(())
}

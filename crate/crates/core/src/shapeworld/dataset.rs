use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::qa::{answer_words, generate_qa, Category, QaItem, NUMBER_WORDS, POSITION_WORDS};
use super::render::render;
use super::scene::{generate_scene, Cell, Color, Scene, Shape};
use crate::answer::AnswerVocabulary;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{Taxonomy, ROOT_MARKER};
use crate::vocab::WordList;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";
pub const QUESTION_VOCAB_FILE: &str = "question_vocab.txt";
pub const ANSWER_VOCAB_FILE: &str = "answer_vocab.txt";
pub const DEFAULT_GRID: usize = 3;

/// Share of each question category in a split, indexed like [`Category::ALL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportions([f64; 4]);

impl Default for Proportions {
    /// Toronto COCO-QA training-split breakdown.
    fn default() -> Self {
        Self([0.6984, 0.0747, 0.1659, 0.0610])
    }
}

impl Proportions {
    pub fn new(shares: [f64; 4]) -> Result<Self> {
        if shares.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config(format!("proportions must lie in [0, 1]: {shares:?}")));
        }
        let total: f64 = shares.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("proportions sum to {total}, not 1")));
        }
        Ok(Self(shares))
    }

    pub fn share(&self, c: Category) -> f64 {
        self.0[c as usize]
    }

    /// Largest-remainder apportionment of `total` items.
    pub fn counts(&self, total: usize) -> [usize; 4] {
        let exact = self.0.map(|p| p * total as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut rest = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        counts
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        Category::ALL
            .iter()
            .map(|c| (c.name().to_string(), self.share(*c)))
            .collect()
    }
}

impl FromStr for Proportions {
    type Err = Error;

    /// `object=0.7,number=0.1,color=0.1,location=0.1`; omitted categories get 0.
    fn from_str(s: &str) -> Result<Self> {
        let mut shares = [0.0; 4];
        let mut seen = [false; 4];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected category=share, got '{part}'")))?;
            let cat: Category = k.trim().parse().map_err(|_| Error::Config(format!("unknown category '{k}'")))?;
            if seen[cat as usize] {
                return Err(Error::Config(format!("category '{k}' given twice")));
            }
            seen[cat as usize] = true;
            shares[cat as usize] = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad share '{v}' for {k}")))?;
        }
        Proportions::new(shares)
    }
}

impl fmt::Display for Proportions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Category::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), self.share(*c)))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub grid: usize,
    pub cell_px: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub train: usize,
    pub test: usize,
    pub proportions: Proportions,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: DEFAULT_GRID,
            cell_px: 20,
            min_objects: 2,
            max_objects: 5,
            train: 2000,
            test: 400,
            proportions: Proportions::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.cell_px == 0 {
            return Err(Error::Config("grid and cell size must be positive".into()));
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > self.grid * self.grid
        {
            return Err(Error::Config(format!(
                "object count range {}..={} does not fit a {}x{} grid",
                self.min_objects, self.max_objects, self.grid, self.grid
            )));
        }
        if self.train == 0 {
            return Err(Error::Config("training split must not be empty".into()));
        }
        Proportions::new(self.proportions.0)?;
        Ok(())
    }
}

/// SplitMix64 finalizer used to derive independent per-item seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(stream)) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// One generated QA pair with its scene and rendered image.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub scene: Scene,
    pub qa: QaItem,
    pub image: RgbImage,
}

impl Example {
    pub fn image_path(&self) -> String {
        format!("images/{}.ppm", self.id)
    }

    pub fn record(&self) -> QaRecord {
        QaRecord {
            image_path: self.image_path(),
            question: self.qa.question.clone(),
            answer: self.qa.answer.clone(),
            category: self.qa.category,
            gt_cells: self.qa.gt_cells.clone(),
        }
    }
}

/// One JSON Lines record of a dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub image_path: String,
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub gt_cells: Vec<Cell>,
}

fn generate_split(cfg: &GeneratorConfig, split: Split, total: usize) -> Result<Vec<Example>> {
    let counts = cfg.proportions.counts(total);
    let mut schedule: Vec<Category> = Category::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.stream(), u64::MAX));
    schedule.shuffle(&mut order_rng);

    schedule
        .into_iter()
        .enumerate()
        .map(|(i, category)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.stream(), i as u64));
            for _ in 0..10_000 {
                let scene = generate_scene(&mut rng, cfg.grid, cfg.min_objects..=cfg.max_objects)?;
                if let Some(qa) = generate_qa(&scene, category, &mut rng) {
                    let image = render(&scene, cfg.cell_px);
                    return Ok(Example {
                        id: format!("{}_{i:05}", split.name()),
                        scene,
                        qa,
                        image,
                    });
                }
            }
            Err(Error::Config(format!(
                "no {category} question could be generated with these scene settings"
            )))
        })
        .collect()
}

/// A fully generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub config: GeneratorConfig,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub version: u32,
    pub seed: u64,
    pub grid: usize,
    pub cell_px: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub train: usize,
    pub test: usize,
    pub proportions: BTreeMap<String, f64>,
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    Ok(GeneratedDataset {
        config: cfg.clone(),
        train: generate_split(cfg, Split::Train, cfg.train)?,
        test: generate_split(cfg, Split::Test, cfg.test)?,
    })
}

/// Taxonomy over every answer the generator can produce: thematic parents
/// (shape, color, number, position) under a single root.
pub fn shapeworld_taxonomy() -> Taxonomy {
    let mut edges: Vec<(&str, &str)> = vec![
        ("answer", ROOT_MARKER),
        ("shape", "answer"),
        ("color", "answer"),
        ("number", "answer"),
        ("position", "answer"),
    ];
    edges.extend(Shape::ALL.iter().map(|s| (s.name(), "shape")));
    edges.extend(Color::ALL.iter().map(|c| (c.name(), "color")));
    edges.extend(NUMBER_WORDS.iter().map(|w| (*w, "number")));
    edges.extend(POSITION_WORDS.iter().map(|w| (*w, "position")));
    Taxonomy::from_edges(edges).expect("static taxonomy is well formed")
}

impl GeneratedDataset {
    pub fn manifest(&self) -> Manifest {
        let c = &self.config;
        Manifest {
            generator: "shapeworld".into(),
            version: 1,
            seed: c.seed,
            grid: c.grid,
            cell_px: c.cell_px,
            min_objects: c.min_objects,
            max_objects: c.max_objects,
            train: c.train,
            test: c.test,
            proportions: c.proportions.to_map(),
        }
    }

    pub fn question_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.train.iter().map(|e| e.qa.question.as_str()))
    }

    /// The closed answer set, so test answers are always representable.
    pub fn answer_vocab(&self) -> Result<AnswerVocabulary> {
        AnswerVocabulary::from_word_list(WordList::from_words(answer_words(self.config.max_objects))?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (split, examples) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            let mut out = BufWriter::new(File::create(dir.join(format!("{}.jsonl", split.name())))?);
            for e in examples {
                write_ppm(&dir.join(e.image_path()), &e.image)?;
                serde_json::to_writer(&mut out, &e.record())?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        fs::write(dir.join(TAXONOMY_FILE), shapeworld_taxonomy().to_file_string())?;
        self.question_vocab()?.write(&dir.join(QUESTION_VOCAB_FILE))?;
        self.answer_vocab()?.write(&dir.join(ANSWER_VOCAB_FILE))?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest())?;
        manifest.push('\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let reader = BufReader::new(File::open(path)?);
    Ok(image::load(reader, ImageFormat::Pnm)?.to_rgb8())
}

/// A dataset directory: JSON Lines splits plus optional manifest,
/// vocabularies and taxonomy.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
    manifest: Option<Manifest>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("train.jsonl").is_file() {
            return Err(Error::Input(format!(
                "{} is not a dataset directory (no train.jsonl)",
                root.display()
            )));
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.is_file() {
            Some(serde_json::from_str(&fs::read_to_string(manifest_path)?)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.manifest.as_ref()
    }

    pub fn grid(&self) -> usize {
        self.manifest.as_ref().map_or(DEFAULT_GRID, |m| m.grid)
    }

    /// Records of `train` or `test`; a missing test split reads as empty.
    pub fn records(&self, split: Split) -> Result<Vec<QaRecord>> {
        let path = self.root.join(format!("{}.jsonl", split.name()));
        if split == Split::Test && !path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(&path)?);
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QaRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Input(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            if rec.answer.split_whitespace().count() != 1 {
                return Err(Error::Input(format!(
                    "{}:{}: answer '{}' is not a single word",
                    path.display(),
                    n + 1,
                    rec.answer
                )));
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn image(&self, rec: &QaRecord) -> Result<RgbImage> {
        read_ppm(&self.root.join(&rec.image_path))
    }

    pub fn question_vocab(&self) -> Result<Vocabulary> {
        let path = self.root.join(QUESTION_VOCAB_FILE);
        if path.is_file() {
            Vocabulary::read(&path)
        } else {
            let recs = self.records(Split::Train)?;
            Vocabulary::build(recs.iter().map(|r| r.question.as_str()))
        }
    }

    pub fn answer_vocab(&self) -> Result<AnswerVocabulary> {
        let path = self.root.join(ANSWER_VOCAB_FILE);
        if path.is_file() {
            AnswerVocabulary::read(&path)
        } else {
            let recs = self.records(Split::Train)?;
            AnswerVocabulary::build(recs.iter().map(|r| r.answer.as_str()))
        }
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let path = self.root.join(TAXONOMY_FILE);
        if path.is_file() {
            Taxonomy::read(&path)
        } else {
            Ok(shapeworld_taxonomy())
        }
    }
}

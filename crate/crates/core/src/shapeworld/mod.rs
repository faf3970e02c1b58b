//! Synthetic grid scenes of colored shapes with templated questions whose
//! ground-truth attention cells are known, plus per-cell color features.

mod dataset;
mod features;
mod qa;
mod render;
mod scene;

pub use dataset::{
    derive_seed, generate_dataset, read_ppm, shapeworld_taxonomy, write_ppm, DatasetDir, Example,
    GeneratedDataset, GeneratorConfig, Manifest, Proportions, QaRecord, Split, ANSWER_VOCAB_FILE,
    DEFAULT_GRID, MANIFEST_FILE, QUESTION_VOCAB_FILE, TAXONOMY_FILE,
};
pub use features::{cell_features, rgb_to_hsv, HsvBins};
pub use qa::{answer_words, generate_qa, position_word, Category, QaItem, NUMBER_WORDS, POSITION_WORDS};
pub use render::{render, OBJECT_EXTENT};
pub use scene::{generate_scene, Cell, Color, Object, Scene, Shape, BACKGROUND};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Cell, Color, Object, Scene, Shape};
use crate::error::{Error, Result};

/// Question types of the COCO-QA style breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Number,
    Color,
    Location,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Object,
        Category::Number,
        Category::Color,
        Category::Location,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Number => "number",
            Category::Color => "color",
            Category::Location => "location",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown question category '{s}'")))
    }
}

pub const NUMBER_WORDS: [&str; 9] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

pub const POSITION_WORDS: [&str; 5] = ["top", "bottom", "left", "right", "center"];

/// Single-word position of a cell: the middle cell and the four edge
/// midpoints of an odd grid. Corners and even grids have none.
pub fn position_word(cell: Cell, grid: usize) -> Option<&'static str> {
    if grid.is_multiple_of(2) {
        return None;
    }
    let mid = grid / 2;
    let last = grid - 1;
    match (cell.row, cell.col) {
        (r, c) if r == mid && c == mid => Some("center"),
        (0, c) if c == mid => Some("top"),
        (r, c) if r == last && c == mid => Some("bottom"),
        (r, 0) if r == mid => Some("left"),
        (r, c) if r == mid && c == last => Some("right"),
        _ => None,
    }
}

/// A question about a scene, with its answer and the cells it refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub gt_cells: Vec<Cell>,
}

fn unique_by<K: PartialEq + Copy>(scene: &Scene, key: impl Fn(&Object) -> K) -> Vec<&Object> {
    scene
        .objects
        .iter()
        .filter(|o| scene.objects.iter().filter(|p| key(p) == key(o)).count() == 1)
        .collect()
}

/// Templated question of the given category, or `None` when the scene
/// cannot support one (the caller should draw another scene).
pub fn generate_qa<R: Rng + ?Sized>(scene: &Scene, category: Category, rng: &mut R) -> Option<QaItem> {
    match category {
        Category::Object => {
            let obj = *unique_by(scene, |o| o.color).choose(rng)?;
            Some(QaItem {
                question: format!("what is the {} object", obj.color),
                answer: obj.shape.name().to_string(),
                category,
                gt_cells: vec![obj.cell],
            })
        }
        Category::Color => {
            let obj = *unique_by(scene, |o| o.shape).choose(rng)?;
            Some(QaItem {
                question: format!("what is the color of the {}", obj.shape),
                answer: obj.color.name().to_string(),
                category,
                gt_cells: vec![obj.cell],
            })
        }
        Category::Number => {
            let by_shape = rng.gen_bool(0.5);
            let (question, matching): (String, Vec<&Object>) = if by_shape {
                let shape = scene.objects.choose(rng)?.shape;
                (
                    format!("how many {} are there", shape.plural()),
                    scene.objects.iter().filter(|o| o.shape == shape).collect(),
                )
            } else {
                let color = scene.objects.choose(rng)?.color;
                (
                    format!("how many {color} objects are there"),
                    scene.objects.iter().filter(|o| o.color == color).collect(),
                )
            };
            let answer = NUMBER_WORDS.get(matching.len().checked_sub(1)?)?;
            Some(QaItem {
                question,
                answer: answer.to_string(),
                category,
                // Counting looks at the whole image.
                gt_cells: (0..scene.grid)
                    .flat_map(|r| (0..scene.grid).map(move |c| Cell::new(r, c)))
                    .collect(),
            })
        }
        Category::Location => {
            // The referenced object is the only one of its color; the shape
            // word is descriptive.
            let candidates: Vec<&Object> = unique_by(scene, |o| o.color)
                .into_iter()
                .filter(|o| position_word(o.cell, scene.grid).is_some())
                .collect();
            let obj = *candidates.choose(rng)?;
            Some(QaItem {
                question: format!("where is the {} {}", obj.color, obj.shape),
                answer: position_word(obj.cell, scene.grid)?.to_string(),
                category,
                gt_cells: vec![obj.cell],
            })
        }
    }
}

/// Every answer word the generator can emit for a grid with at most
/// `max_objects` objects, in a fixed order.
pub fn answer_words(max_objects: usize) -> Vec<&'static str> {
    let mut words: Vec<&str> = Shape::ALL.iter().map(|s| s.name()).collect();
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(NUMBER_WORDS.iter().take(max_objects.min(NUMBER_WORDS.len())));
    words.extend(POSITION_WORDS);
    words
}

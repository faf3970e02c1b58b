//! Answer accuracy and Wu-Palmer (WUPS) scoring over a word taxonomy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parent token marking the taxonomy root in the text format.
pub const ROOT_MARKER: &str = "ROOT";

/// Rooted word tree. The root has depth 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    words: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    /// Builds from `(child, parent)` pairs; exactly one pair has parent [`ROOT_MARKER`].
    pub fn from_edges<'a, I>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        let mut parent_name = Vec::new();
        for (child, parent) in edges {
            if child == ROOT_MARKER {
                return Err(Error::Input("ROOT cannot be a child".into()));
            }
            if index.insert(child.to_string(), words.len()).is_some() {
                return Err(Error::Input(format!("'{child}' has more than one parent")));
            }
            words.push(child.to_string());
            parent_name.push(parent.to_string());
        }
        let roots = parent_name.iter().filter(|p| *p == ROOT_MARKER).count();
        if roots != 1 {
            return Err(Error::Input(format!(
                "taxonomy needs exactly one root line, found {roots}"
            )));
        }
        let mut parent = Vec::with_capacity(words.len());
        for (child, p) in words.iter().zip(&parent_name) {
            if p == ROOT_MARKER {
                parent.push(None);
            } else {
                let pi = *index
                    .get(p)
                    .ok_or_else(|| Error::Input(format!("parent '{p}' of '{child}' is not a node")))?;
                parent.push(Some(pi));
            }
        }
        let mut depth = vec![0usize; words.len()];
        for start in 0..words.len() {
            let mut d = 1;
            let mut cur = start;
            while let Some(p) = parent[cur] {
                d += 1;
                if d > words.len() {
                    return Err(Error::Input(format!("cycle through '{}'", words[start])));
                }
                cur = p;
            }
            depth[start] = d;
        }
        Ok(Self {
            words,
            parent,
            depth,
            index,
        })
    }

    /// Parses the `child parent` line format. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(p), None) => edges.push((c, p)),
                _ => {
                    return Err(Error::Input(format!(
                        "taxonomy line {} is not 'child parent': {line}",
                        n + 1
                    )))
                }
            }
        }
        Self::from_edges(edges)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (w, p) in self.words.iter().zip(&self.parent) {
            let p = p.map_or(ROOT_MARKER, |i| self.words[i].as_str());
            s.push_str(&format!("{w} {p}\n"));
        }
        s
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn depth(&self, word: &str) -> Option<usize> {
        self.index.get(word).map(|&i| self.depth[i])
    }

    pub fn parent(&self, word: &str) -> Option<&str> {
        let i = *self.index.get(word)?;
        self.parent[i].map(|p| self.words[p].as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn path_to_root(&self, mut node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while let Some(p) = self.parent[node] {
            path.push(p);
            node = p;
        }
        path
    }

    /// Depth of the lowest common ancestor of two nodes.
    fn lca_depth(&self, a: usize, b: usize) -> usize {
        let pa = self.path_to_root(a);
        let pb = self.path_to_root(b);
        // Both paths end at the root; walk back from it while they agree.
        let shared = pa
            .iter()
            .rev()
            .zip(pb.iter().rev())
            .take_while(|(x, y)| x == y)
            .count();
        shared
    }
}

/// `2·depth(lca) / (depth(a) + depth(b))`. Words missing from the taxonomy
/// score 1 when identical and 0 otherwise.
pub fn wup_similarity(a: &str, b: &str, t: &Taxonomy) -> f64 {
    match (t.index.get(a), t.index.get(b)) {
        (Some(&ia), Some(&ib)) => {
            let lca = t.lca_depth(ia, ib) as f64;
            2.0 * lca / (t.depth[ia] + t.depth[ib]) as f64
        }
        _ => {
            if a == b {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Similarities below `threshold` are multiplied by 0.1.
pub fn downweight(similarity: f64, threshold: f64) -> f64 {
    if similarity < threshold {
        0.1 * similarity
    } else {
        similarity
    }
}

fn check_lengths(predictions: usize, truths: usize) -> Result<()> {
    if predictions != truths {
        return Err(Error::Contract(format!(
            "{predictions} predictions vs {truths} ground truths"
        )));
    }
    if predictions == 0 {
        return Err(Error::Contract("no answers to score".into()));
    }
    Ok(())
}

/// Mean thresholded WUP similarity over prediction/ground-truth pairs.
pub fn wups_score<S: AsRef<str>, T: AsRef<str>>(
    predictions: &[S],
    truths: &[T],
    threshold: f64,
    t: &Taxonomy,
) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    let total: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, g)| downweight(wup_similarity(p.as_ref(), g.as_ref(), t), threshold))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Fraction of predictions that equal the ground truth exactly.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], truths: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Accuracy, WUPS at 0.9 and 0.0, and per-category accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub wups09: f64,
    pub wups00: f64,
    pub per_category: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Scores `(category, prediction, truth)` triples.
    pub fn compute<'a, I>(items: I, t: &Taxonomy) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut by_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (cat, p, g) in items {
            preds.push(p);
            truths.push(g);
            let e = by_cat.entry(cat.to_string()).or_default();
            e.0 += usize::from(p == g);
            e.1 += 1;
        }
        Ok(Self {
            acc: accuracy(&preds, &truths)?,
            wups09: wups_score(&preds, &truths, 0.9, t)?,
            wups00: wups_score(&preds, &truths, 0.0, t)?,
            per_category: by_cat
                .into_iter()
                .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
                .collect(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ACC.      {:.4}", self.acc)?;
        writeln!(f, "WUPS 0.9  {:.4}", self.wups09)?;
        write!(f, "WUPS 0.0  {:.4}", self.wups00)?;
        for (c, a) in &self.per_category {
            write!(f, "\n  {c:<9} {a:.4}")?;
        }
        Ok(())
    }
}

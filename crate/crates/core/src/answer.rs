//! Fusion of image, attended image and question features, and the
//! single-word answer classifier.

use std::path::Path;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::param_group;
use crate::tensor::Tensor;
use crate::vocab::WordList;

/// Answer dictionary, independent of the question dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocabulary {
    words: WordList,
}

impl AnswerVocabulary {
    /// Indices follow first occurrence.
    pub fn build<'a, I>(answers: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = WordList::default();
        for a in answers {
            let a = a.trim();
            if a.is_empty() || a.split_whitespace().count() != 1 {
                return Err(Error::Input(format!("answer '{a}' is not a single word")));
            }
            words.insert(a);
        }
        Self::from_word_list(words)
    }

    pub fn from_word_list(words: WordList) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::Input("answer vocabulary needs at least two words".into()));
        }
        Ok(Self { words })
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.words.get(word)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.word(index)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &WordList {
        &self.words
    }

    pub fn digest(&self) -> String {
        self.words.digest()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_word_list(WordList::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.words.write(path)
    }
}

param_group! {
    /// Fusion projections and answer classifier.
    AnswerParams => AnswerVars { w_ih, w_rh, w_sh, b_h, w_ha, b_a }
}

/// Sizes needed to allocate [`AnswerParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerDims {
    /// Length of the flattened raw feature map.
    pub image: usize,
    /// Length of the flattened reduced feature map.
    pub reduced: usize,
    pub question: usize,
    pub hidden: usize,
    pub answers: usize,
}

impl AnswerParams {
    pub fn zeros(d: AnswerDims) -> Result<Self> {
        if d.answers < 2 {
            return Err(Error::Config("answer head needs at least two classes".into()));
        }
        let t = |s: &[usize]| Tensor::zeros(s).requires_grad();
        Ok(Self {
            w_ih: t(&[d.hidden, d.image]),
            w_rh: t(&[d.hidden, d.reduced]),
            w_sh: t(&[d.hidden, d.question]),
            b_h: t(&[d.hidden]),
            w_ha: t(&[d.answers, d.hidden]),
            b_a: t(&[d.answers]),
        })
    }

    /// Weights uniform in `±sqrt(3/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(d: AnswerDims, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(d)?;
        let fused_fan_in = (d.image + d.reduced + d.question) as f64;
        for (name, t) in p.named_mut() {
            let fan_in = match name {
                "w_ha" => d.hidden as f64,
                n if n.starts_with('w') => fused_fan_in,
                _ => continue,
            };
            let r = Tensor::uniform(t.shape(), (3.0 / fan_in).sqrt(), rng);
            t.values_mut().copy_from_slice(r.values());
        }
        Ok(p)
    }

    pub fn answers(&self) -> usize {
        self.b_a.len()
    }
}

/// `h = g(W_ih·flat(I) + W_rh·flat(I_r) + W_sh·s + b_h)` with the scaled tanh `g`.
/// The pre-activation is returned alongside.
pub fn fuse_traced(g: &mut Graph, image: Var, reduced: Var, s: Var, p: &AnswerVars) -> Result<(Var, Var)> {
    let fi = g.flatten(image)?;
    let fr = g.flatten(reduced)?;
    for (what, w, x) in [("image", p.w_ih, fi), ("reduced", p.w_rh, fr), ("question", p.w_sh, s)] {
        if g.shape(w)[1] != g.numel(x) {
            return Err(dim_err(
                "fuse",
                format!("{what} projection {:?} vs input length {}", g.shape(w), g.numel(x)),
            ));
        }
    }
    let a = g.affine(p.w_ih, fi, p.b_h)?;
    let b = g.matvec(p.w_rh, fr)?;
    let c = g.matvec(p.w_sh, s)?;
    let pre = g.add_n(&[a, b, c])?;
    let h = g.scaled_tanh(pre)?;
    Ok((h, pre))
}

pub fn fuse(g: &mut Graph, image: Var, reduced: Var, s: Var, p: &AnswerVars) -> Result<Var> {
    fuse_traced(g, image, reduced, s, p).map(|(h, _)| h)
}

/// Classifier logits `W_ha h + b_a`.
pub fn answer_logits(g: &mut Graph, h: Var, p: &AnswerVars) -> Result<Var> {
    g.affine(p.w_ha, h, p.b_a)
}

/// Probability vector over the answer dictionary.
pub fn answer_probabilities(g: &mut Graph, h: Var, p: &AnswerVars) -> Result<Var> {
    let logits = answer_logits(g, h, p)?;
    g.softmax(logits)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted answer word and the full probability vector.
pub fn predict(g: &mut Graph, h: Var, p: &AnswerVars, vocab: &AnswerVocabulary) -> Result<(String, Vec<f64>)> {
    let probs = answer_probabilities(g, h, p)?;
    let pv = g.value(probs).to_vec();
    if pv.len() != vocab.len() {
        return Err(dim_err(
            "predict",
            format!("{} classes vs {} answer words", pv.len(), vocab.len()),
        ));
    }
    let word = vocab.word(argmax(&pv)).expect("index within vocabulary").to_string();
    Ok((word, pv))
}

/// `-ln p[target]`, with `p` clamped below at 1e-12.
pub fn cross_entropy_loss(g: &mut Graph, probs: Var, target: usize) -> Result<Var> {
    g.nll(probs, target)
}

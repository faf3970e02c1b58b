//! Question tokenization, the question dictionary, and the LSTM encoder
//! that turns a token sequence into the dense question embedding.

use std::path::Path;

use rand::Rng;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::param_group;
use crate::tensor::Tensor;
use crate::vocab::WordList;

pub const BEGIN: &str = "#B#";
pub const END: &str = "#E#";
pub const OOV: &str = "#OOV#";
pub const OOV_INDEX: usize = 2;

/// Bound for the uniform word-embedding initialization, giving unit
/// variance.
pub const EMBEDDING_INIT_BOUND: f64 = 1.732_050_807_568_877_2;

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercases, strips punctuation, splits on whitespace and wraps the
/// words in `#B#` / `#E#`.
pub fn tokenize(question: &str) -> Result<Vec<String>> {
    let cleaned: String = question
        .chars()
        .filter(|&c| !is_punctuation(c))
        .flat_map(char::to_lowercase)
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let mut tokens = Vec::with_capacity(words.len() + 2);
    tokens.push(BEGIN.to_string());
    tokens.extend(words.into_iter().map(str::to_string));
    tokens.push(END.to_string());
    Ok(tokens)
}

/// Question dictionary. `#B#`, `#E#` and `#OOV#` occupy indices 0, 1, 2 and
/// every other word follows in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: WordList,
}

impl Vocabulary {
    pub fn build<'a, I>(questions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = WordList::from_words([BEGIN, END, OOV])?;
        let mut seen_any = false;
        for q in questions {
            seen_any = true;
            for tok in tokenize(q)? {
                words.insert(&tok);
            }
        }
        if !seen_any {
            return Err(Error::Input("vocabulary needs at least one question".into()));
        }
        Ok(Self { words })
    }

    pub fn from_word_list(words: WordList) -> Result<Self> {
        let reserved = [BEGIN, END, OOV];
        if words.len() < 3 || (0..3).any(|i| words.word(i) != Some(reserved[i])) {
            return Err(Error::Input(
                "question vocabulary must start with #B#, #E#, #OOV#".into(),
            ));
        }
        Ok(Self { words })
    }

    /// Index of `word`, or the `#OOV#` index when unseen.
    pub fn lookup(&self, word: &str) -> usize {
        self.words.get(word).unwrap_or(OOV_INDEX)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    /// Tokenizes and looks up in one step.
    pub fn encode_question(&self, question: &str) -> Result<Vec<usize>> {
        Ok(self.encode(&tokenize(question)?))
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
    /// Word embedding table, one row per vocabulary entry.
    EmbeddingTable => EmbeddingVars { table }
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::uniform(&[vocab_size, dim], EMBEDDING_INIT_BOUND, rng).requires_grad(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

param_group! {
    /// Input, forget, output and candidate gate weights of one LSTM layer.
    LstmParams => LstmVars {
        w_vi, w_hi, b_i,
        w_vf, w_hf, b_f,
        w_vo, w_ho, b_o,
        w_vg, w_hg, b_g,
    }
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let wv = || Tensor::zeros(&[hidden_dim, input_dim]).requires_grad();
        let wh = || Tensor::zeros(&[hidden_dim, hidden_dim]).requires_grad();
        let b = || Tensor::zeros(&[hidden_dim]).requires_grad();
        Self {
            w_vi: wv(),
            w_hi: wh(),
            b_i: b(),
            w_vf: wv(),
            w_hf: wh(),
            b_f: b(),
            w_vo: wv(),
            w_ho: wh(),
            b_o: b(),
            w_vg: wv(),
            w_hg: wh(),
            b_g: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_vi.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_vi.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (e, h) = (self.input_dim(), self.hidden_dim());
        for (name, t) in self.named() {
            let want: &[usize] = match name.as_bytes()[0] {
                b'b' => &[h],
                _ if name.starts_with("w_v") => &[h, e],
                _ => &[h, h],
            };
            if t.shape() != want {
                return Err(dim_err(
                    "lstm params",
                    format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// One LSTM step; also returns the four gate pre-activations (i, f, o, g).
pub fn lstm_step_traced(
    g: &mut Graph,
    v: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var, [Var; 4])> {
    let mut gate = |wv: Var, wh: Var, b: Var| -> Result<Var> {
        let a = g.affine(wv, v, b)?;
        let r = g.matvec(wh, h_prev)?;
        g.add(a, r)
    };
    let zi = gate(p.w_vi, p.w_hi, p.b_i)?;
    let zf = gate(p.w_vf, p.w_hf, p.b_f)?;
    let zo = gate(p.w_vo, p.w_ho, p.b_o)?;
    let zg = gate(p.w_vg, p.w_hg, p.b_g)?;
    if g.shape(c_prev) != g.shape(zi) {
        return Err(dim_err(
            "lstm_step",
            format!("cell state {:?} vs gates {:?}", g.shape(c_prev), g.shape(zi)),
        ));
    }
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c, [zi, zf, zo, zg]))
}

/// `c_t = f ⊙ c_{t-1} + i ⊙ g`, `h_t = o ⊙ tanh(c_t)`.
pub fn lstm_step(g: &mut Graph, v: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let (h, c, _) = lstm_step_traced(g, v, h_prev, c_prev, p)?;
    Ok((h, c))
}

/// Mean of the LSTM hidden states over every token, starting from zero state.
/// Gate pre-activations are appended to `trace`.
pub fn encode_question_traced(
    g: &mut Graph,
    token_ids: &[usize],
    emb: &EmbeddingVars,
    p: &LstmVars,
    trace: &mut Vec<Var>,
) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let hidden = g.shape(p.b_i)[0];
    let zero = Tensor::zeros(&[hidden]);
    let mut h = g.constant(&zero);
    let mut c = g.constant(&zero);
    let mut states = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        let v = g.row(emb.table, id)?;
        let (h_t, c_t, pre) = lstm_step_traced(g, v, h, c, p)?;
        trace.extend(pre);
        states.push(h_t);
        h = h_t;
        c = c_t;
    }
    let total = g.add_n(&states)?;
    g.scale(total, 1.0 / states.len() as f64)
}

pub fn encode_question(g: &mut Graph, token_ids: &[usize], emb: &EmbeddingVars, p: &LstmVars) -> Result<Var> {
    encode_question_traced(g, token_ids, emb, p, &mut Vec::new())
}

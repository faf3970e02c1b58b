//! The full question-answering network: question encoder, attention over
//! the cell grid, fusion and answer classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{answer_logits, argmax, fuse_traced, AnswerDims, AnswerParams, AnswerVars, AnswerVocabulary};
use crate::attention::{
    attention_map_traced, configure_kernel_traced, reduce_channels, weight_features, KernelParams, KernelShape,
    KernelVars, ReduceParams, ReduceVars,
};
use crate::encoder::{encode_question_traced, EmbeddingTable, EmbeddingVars, LstmParams, LstmVars, Vocabulary};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::shapeworld::{Cell, HsvBins, DEFAULT_GRID};
use crate::tensor::Tensor;

/// Architecture sizes. `question_dim` is the LSTM state size and therefore
/// the length of the question embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: usize,
    pub channels: usize,
    pub reduced_channels: usize,
    pub embed_dim: usize,
    pub question_dim: usize,
    pub fusion_dim: usize,
    pub kernel_size: usize,
    /// `false` replaces the attention map by the uniform map (NO-ATT).
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            channels: HsvBins::default().feature_dim(),
            reduced_channels: 16,
            embed_dim: 32,
            question_dim: 64,
            fusion_dim: 64,
            kernel_size: 1,
            attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid", self.grid),
            ("channels", self.channels),
            ("reduced_channels", self.reduced_channels),
            ("embed_dim", self.embed_dim),
            ("question_dim", self.question_dim),
            ("fusion_dim", self.fusion_dim),
            ("kernel_size", self.kernel_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.reduced_channels > self.channels {
            return Err(Error::Config("reduced_channels cannot exceed channels".into()));
        }
        KernelShape::new(self.channels, self.kernel_size, self.kernel_size)?;
        Ok(())
    }

    pub fn kernel_shape(&self) -> KernelShape {
        KernelShape::new(self.channels, self.kernel_size, self.kernel_size).expect("validated config")
    }

    fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

/// Fixed per-channel standardization of cell features, fitted on the
/// training split, followed by per-cell centering across channels.
/// Channels that never vary keep unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Tensor,
    pub scale: Tensor,
}

/// Fixed scalars multiplying layer inputs. Initialization sets them so the
/// activations they scale start at unit spread; training leaves them alone.
///
/// They matter because adadelta takes steps of similar absolute size for
/// every weight: a layer fed by small inputs would otherwise need large
/// weights and barely move during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputGains {
    /// Standardized image features, everywhere they are used.
    pub image: f64,
    /// Question embedding, everywhere it is used.
    pub question: f64,
    /// Attention-weighted features entering the channel reduction.
    pub attended: f64,
}

impl Default for InputGains {
    fn default() -> Self {
        Self {
            image: 1.0,
            question: 1.0,
            attended: 1.0,
        }
    }
}

impl InputGains {
    pub const NAMES: [&'static str; 3] = ["image", "question", "attended"];

    pub fn get_mut(&mut self, name: &str) -> Option<&mut f64> {
        match name {
            "image" => Some(&mut self.image),
            "question" => Some(&mut self.question),
            "attended" => Some(&mut self.attended),
            _ => None,
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.image, self.question, self.attended]
    }
}

impl FeatureNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            scale: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn fit<'a, I>(maps: I, channels: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        for m in maps {
            let s = m.shape();
            if s.len() != 3 || s[0] != channels {
                return Err(dim_err("feature norm", format!("feature map {s:?}, expected {channels} channels")));
            }
            let plane = s[1] * s[2];
            for (c, chunk) in m.values().chunks_exact(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Input("cannot fit feature statistics on no data".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: Tensor::new(&[channels], mean)?,
            scale: Tensor::new(&[channels], scale)?,
        })
    }

    /// Standardizes and centers a raw map.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let s = features.shape();
        if s.len() != 3 || s[0] != self.mean.len() {
            return Err(dim_err(
                "feature norm",
                format!("feature map {s:?}, expected {} channels", self.mean.len()),
            ));
        }
        let plane = s[1] * s[2];
        let mut out = features.values().to_vec();
        for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let (m, sc) = (self.mean.values()[c], self.scale.values()[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sc);
        }
        // Centre every cell across channels so that no cell is favoured by
        // a kernel that weights all channels alike.
        let channels = s[0] as f64;
        for p in 0..plane {
            let mean = (0..s[0]).map(|c| out[c * plane + p]).sum::<f64>() / channels;
            (0..s[0]).for_each(|c| out[c * plane + p] -= mean);
        }
        Tensor::new(s, out)
    }
}

/// A question/image pair in model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Normalized `[C, N, N]` cell features.
    pub features: Tensor,
    /// Answer index, absent when the answer is outside the dictionary.
    pub target: Option<usize>,
}

/// Graph handles for every parameter of a [`Model`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embedding: EmbeddingVars,
    pub lstm: LstmVars,
    pub kernel: Option<KernelVars>,
    pub reduce: ReduceVars,
    pub answer: AnswerVars,
    uniform: Var,
}

impl BoundModel {
    fn all(&self) -> Vec<Var> {
        let mut v = self.embedding.all();
        v.extend(self.lstm.all());
        if let Some(k) = &self.kernel {
            v.extend(k.all());
        }
        v.extend(self.reduce.all());
        v.extend(self.answer.all());
        v
    }
}

/// Pre-activations of every projection layer, used by initialization.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Gate pre-activations, cycling input, forget, output, candidate.
    pub lstm_gates: Vec<Var>,
    /// Scaled question embedding.
    pub question: Option<Var>,
    pub kernel: Option<Var>,
    /// Attention logits `k * I` before the spatial softmax.
    pub attention: Option<Var>,
    /// Scaled attention-weighted features.
    pub attended: Option<Var>,
    pub reduced: Option<Var>,
    pub fusion: Option<Var>,
    pub logits: Option<Var>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub question: Var,
    pub attention: Var,
    pub logits: Var,
    pub probs: Var,
    pub loss: Option<Var>,
    pub trace: Trace,
}

/// Result of answering one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub index: usize,
    pub probability: f64,
    pub probabilities: Vec<f64>,
    /// Row-major `N×N` attention map.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub question_vocab: Vocabulary,
    pub answer_vocab: AnswerVocabulary,
    pub feature_norm: FeatureNorm,
    pub gains: InputGains,
    pub embedding: EmbeddingTable,
    pub lstm: LstmParams,
    pub kernel: Option<KernelParams>,
    pub reduce: ReduceParams,
    pub answer: AnswerParams,
}

impl Model {
    /// Randomly initialized model, see [`Model::randomize`].
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        question_vocab: Vocabulary,
        answer_vocab: AnswerVocabulary,
        feature_norm: FeatureNorm,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if feature_norm.mean.len() != config.channels {
            return Err(dim_err("model", "feature normalization does not match channel count"));
        }
        let embedding = EmbeddingTable::new(question_vocab.len(), config.embed_dim, rng);
        let lstm = LstmParams::zeros(config.embed_dim, config.question_dim);
        let kernel = config
            .attention
            .then(|| KernelParams::new(config.kernel_shape(), config.question_dim, rng));
        let reduce = ReduceParams::new(config.channels, config.reduced_channels, rng)?;
        let answer = AnswerParams::zeros(
            AnswerDims {
                image: config.channels * config.cells(),
                reduced: config.reduced_channels * config.cells(),
                question: config.question_dim,
                hidden: config.fusion_dim,
                answers: answer_vocab.len(),
            },
        )?;
        let mut model = Self {
            config,
            question_vocab,
            answer_vocab,
            feature_norm,
            gains: InputGains::default(),
            embedding,
            lstm,
            kernel,
            reduce,
            answer,
        };
        model.randomize(rng);
        Ok(model)
    }

    /// Trainable tensors with stable dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("embedding", self.embedding.named());
        out.extend(prefixed("lstm", self.lstm.named()));
        if let Some(k) = &self.kernel {
            out.extend(prefixed("kernel", k.named()));
        }
        out.extend(prefixed("reduce", self.reduce.named()));
        out.extend(prefixed("answer", self.answer.named()));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed("embedding", self.embedding.named_mut());
        out.extend(prefixed("lstm", self.lstm.named_mut()));
        if let Some(k) = self.kernel.as_mut() {
            out.extend(prefixed("kernel", k.named_mut()));
        }
        out.extend(prefixed("reduce", self.reduce.named_mut()));
        out.extend(prefixed("answer", self.answer.named_mut()));
        out
    }

    /// Redraws every parameter: embeddings uniform with unit variance, weights
    /// uniform in ±sqrt(3/fan_in) over their input extents, biases zero.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (name, t) in self.named_params_mut() {
            let leaf = name.rsplit('.').next().unwrap_or_default();
            if leaf.starts_with("b_") {
                t.values_mut().fill(0.0);
                continue;
            }
            let bound = if name == "embedding.table" {
                crate::encoder::EMBEDDING_INIT_BOUND
            } else {
                let fan_in: usize = t.shape()[1..].iter().product();
                (3.0 / fan_in as f64).sqrt()
            };
            let r = Tensor::uniform(t.shape(), bound, rng);
            t.values_mut().copy_from_slice(r.values());
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let cells = self.config.cells();
        let uniform = Tensor::full(&[self.config.grid, self.config.grid], 1.0 / cells as f64);
        BoundModel {
            embedding: self.embedding.bind(g),
            lstm: self.lstm.bind(g),
            kernel: self.kernel.as_ref().map(|k| k.bind(g)),
            reduce: self.reduce.bind(g),
            answer: self.answer.bind(g),
            uniform: g.constant(&uniform),
        }
    }

    /// Binds the model onto caller-supplied handles, one per tensor in
    /// [`Model::named_params`] order. Used to differentiate with respect to
    /// perturbed copies of the parameters.
    pub fn bind_to(&self, g: &mut Graph, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.named_params().len();
        if vars.len() != expected {
            return Err(Error::Contract(format!("model has {expected} parameter tensors, got {} handles", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let embedding = EmbeddingVars { table: next() };
        let lstm = LstmVars {
            w_vi: next(), w_hi: next(), b_i: next(),
            w_vf: next(), w_hf: next(), b_f: next(),
            w_vo: next(), w_ho: next(), b_o: next(),
            w_vg: next(), w_hg: next(), b_g: next(),
        };
        let kernel = self.kernel.as_ref().map(|_| KernelVars { w_sk: next(), b_k: next() });
        let reduce = ReduceVars { w_reduce: next() };
        let answer = AnswerVars {
            w_ih: next(), w_rh: next(), w_sh: next(), b_h: next(), w_ha: next(), b_a: next(),
        };
        let cells = self.config.cells();
        let uniform = Tensor::full(&[self.config.grid, self.config.grid], 1.0 / cells as f64);
        Ok(BoundModel {
            embedding,
            lstm,
            kernel,
            reduce,
            answer,
            uniform: g.constant(&uniform),
        })
    }

    /// Adds the graph's leaf gradients into the parameter tensors.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &BoundModel) -> Result<()> {
        for ((_, t), v) in self.named_params_mut().into_iter().zip(bound.all()) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Encodes a question and standardizes a raw feature map.
    pub fn sample(&self, question: &str, raw_features: &Tensor, answer: Option<&str>) -> Result<Sample> {
        let n = self.config.grid;
        if raw_features.shape() != [self.config.channels, n, n] {
            return Err(Error::Compatibility(format!(
                "feature map {:?} does not match the model's [{}, {n}, {n}]",
                raw_features.shape(),
                self.config.channels
            )));
        }
        Ok(Sample {
            tokens: self.question_vocab.encode_question(question)?,
            features: self.feature_norm.apply(raw_features)?,
            target: answer.and_then(|a| self.answer_vocab.index(a)),
        })
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, sample: &Sample) -> Result<Forward> {
        let mut trace = Trace::default();
        let s = encode_question_traced(g, &sample.tokens, &bound.embedding, &bound.lstm, &mut trace.lstm_gates)?;
        let s = g.scale(s, self.gains.question)?;
        trace.question = Some(s);
        let image = g.constant(&sample.features);
        let image = g.scale(image, self.gains.image)?;
        let attention = match &bound.kernel {
            Some(kv) => {
                let (k, pre) = configure_kernel_traced(g, s, kv, self.config.kernel_shape())?;
                trace.kernel = Some(pre);
                let (m, z) = attention_map_traced(g, k, image)?;
                trace.attention = Some(z);
                m
            }
            None => bound.uniform,
        };
        let weighted = weight_features(g, image, attention)?;
        let weighted = g.scale(weighted, self.gains.attended)?;
        trace.attended = Some(weighted);
        let reduced = reduce_channels(g, weighted, &bound.reduce)?;
        trace.reduced = Some(reduced);
        let (h, pre) = fuse_traced(g, image, reduced, s, &bound.answer)?;
        trace.fusion = Some(pre);
        let logits = answer_logits(g, h, &bound.answer)?;
        trace.logits = Some(logits);
        let probs = g.softmax(logits)?;
        let loss = sample.target.map(|t| g.nll(probs, t)).transpose()?;
        Ok(Forward {
            question: s,
            attention,
            logits,
            probs,
            loss,
            trace,
        })
    }

    /// Answers a question about a raw `[C, N, N]` feature map.
    pub fn predict(&self, question: &str, raw_features: &Tensor) -> Result<Prediction> {
        let sample = self.sample(question, raw_features, None)?;
        self.predict_sample(&sample)
    }

    pub fn predict_sample(&self, sample: &Sample) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let f = self.forward(&mut g, &bound, sample)?;
        Ok(self.prediction(&g, &f))
    }

    /// Reads the answer and attention map off a finished forward pass.
    pub fn prediction(&self, g: &Graph, f: &Forward) -> Prediction {
        let probabilities = g.value(f.probs).to_vec();
        let index = argmax(&probabilities);
        Prediction {
            answer: self.answer_vocab.word(index).expect("index within vocabulary").to_string(),
            index,
            probability: probabilities[index],
            probabilities,
            attention: g.value(f.attention).to_vec(),
        }
    }
}

fn prefixed<T>(group: &str, items: Vec<(&'static str, T)>) -> Vec<(String, T)> {
    items.into_iter().map(|(n, t)| (format!("{group}.{n}"), t)).collect()
}

/// Attention mass on the given cells of a row-major `n×n` map.
pub fn attention_mass(attention: &[f64], cells: &[Cell], n: usize) -> f64 {
    cells.iter().map(|c| attention[c.flat(n)]).sum()
}

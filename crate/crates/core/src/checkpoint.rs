//! Model checkpoints: a magic tag, a JSON header echoing the configuration
//! and vocabularies, then named tensors.
//!
//! Layout: `QAMCKPT1`, u32 LE header length, header JSON, then for every
//! tensor listed in the header a u32 LE name length, the UTF-8 name and the
//! tensor in [`Tensor::write_to`] form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::AnswerVocabulary;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{FeatureNorm, InputGains, Model, ModelConfig};
use crate::shapeworld::DatasetDir;
use crate::tensor::{read_u32, Tensor};
use crate::train::TrainConfig;
use crate::vocab::WordList;

const MAGIC: &[u8; 8] = b"QAMCKPT1";
const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 26;
const FEATURE_MEAN: &str = "features.mean";
const FEATURE_SCALE: &str = "features.scale";
const GAIN_PREFIX: &str = "gains.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    question_vocab_sha256: String,
    answer_vocab_sha256: String,
    question_vocab: Vec<String>,
    answer_vocab: Vec<String>,
    tensors: Vec<String>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Configuration of the run that produced the model, if recorded.
    pub train: Option<TrainConfig>,
}

fn tensor_list(model: &Model) -> Vec<(String, Tensor)> {
    let mut v: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    v.push((FEATURE_MEAN.into(), model.feature_norm.mean.clone()));
    v.push((FEATURE_SCALE.into(), model.feature_norm.scale.clone()));
    for (name, value) in InputGains::NAMES.iter().zip(model.gains.values()) {
        v.push((format!("{GAIN_PREFIX}{name}"), Tensor::scalar(value)));
    }
    v
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    let tensors = tensor_list(model);
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config,
        train: train.copied(),
        question_vocab_sha256: model.question_vocab.digest(),
        answer_vocab_sha256: model.answer_vocab.digest(),
        question_vocab: model.question_vocab.words().words().to_vec(),
        answer_vocab: model.answer_vocab.words().words().to_vec(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn save(path: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, train)?;
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Input(format!("malformed checkpoint: {}", msg.into()))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = read_u32(r)?;
    if len > MAX_HEADER {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.model.validate()?;
    let qv = Vocabulary::from_word_list(WordList::from_words(&header.question_vocab)?)?;
    let av = AnswerVocabulary::from_word_list(WordList::from_words(&header.answer_vocab)?)?;
    if qv.digest() != header.question_vocab_sha256 || av.digest() != header.answer_vocab_sha256 {
        return Err(bad("vocabulary digest does not match the stored word list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(header.model, qv, av, FeatureNorm::identity(header.model.channels), &mut rng)?;
    let expected: Vec<String> = tensor_list(&model).into_iter().map(|(n, _)| n).collect();
    if expected != header.tensors {
        return Err(bad("tensor list does not match the configured architecture"));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for name in &expected {
        let n = read_u32(r)? as usize;
        if n != name.len() {
            return Err(bad(format!("expected tensor {name}")));
        }
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        if buf != name.as_bytes() {
            return Err(bad(format!("expected tensor {name}")));
        }
        let t = Tensor::read_from(r)?;
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        loaded.push(t);
    }
    let mut it = loaded.into_iter();
    for (name, slot) in model.named_params_mut() {
        let t = it.next().expect("counted above");
        if t.shape() != slot.shape() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        slot.values_mut().copy_from_slice(t.values());
    }
    for slot in [&mut model.feature_norm.mean, &mut model.feature_norm.scale] {
        let t = it.next().expect("counted above");
        if t.shape() != slot.shape() {
            return Err(bad("feature statistics have the wrong shape"));
        }
        *slot = t;
    }
    for name in InputGains::NAMES {
        let t = it.next().expect("counted above");
        if t.len() != 1 || t.values()[0] <= 0.0 {
            return Err(bad(format!("gain {name} is not a positive scalar")));
        }
        *model.gains.get_mut(name).expect("known gain") = t.values()[0];
    }
    Ok(Checkpoint {
        model,
        train: header.train,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

/// Fails with a compatibility error unless the dataset's vocabularies and
/// grid are the ones the model was trained with.
pub fn check_dataset(model: &Model, dir: &DatasetDir) -> Result<()> {
    let qv = dir.question_vocab()?;
    let av = dir.answer_vocab()?;
    if qv.digest() != model.question_vocab.digest() {
        return Err(Error::Compatibility(
            "question vocabulary hash differs between checkpoint and dataset".into(),
        ));
    }
    if av.digest() != model.answer_vocab.digest() {
        return Err(Error::Compatibility(
            "answer vocabulary hash differs between checkpoint and dataset".into(),
        ));
    }
    if dir.grid() != model.config.grid {
        return Err(Error::Compatibility(format!(
            "dataset grid {} differs from model grid {}",
            dir.grid(),
            model.config.grid
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(attention: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig {
            grid: 2,
            channels: 4,
            reduced_channels: 2,
            embed_dim: 3,
            question_dim: 5,
            fusion_dim: 6,
            kernel_size: 1,
            attention,
        };
        let qv = Vocabulary::build(["what is the red object"]).unwrap();
        let av = AnswerVocabulary::build(["red", "blue", "green"]).unwrap();
        let mut norm = FeatureNorm::identity(4);
        norm.mean.values_mut()[1] = 0.25;
        let mut m = Model::new(config, qv, av, norm, &mut rng).unwrap();
        m.gains.question = 3.5;
        m

    }

    #[test]
    fn round_trip() {
        for attention in [true, false] {
            let m = model(attention);
            let cfg = TrainConfig::default();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &m, Some(&cfg)).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back.train, Some(cfg));
            assert_eq!(back.model.config, m.config);
            for ((n1, a), (n2, b)) in tensor_list(&m).into_iter().zip(tensor_list(&back.model)) {
                assert_eq!(n1, n2);
                assert_eq!(a.values(), b.values());
            }
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back.model, back.train.as_ref()).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn header_records_attention_flag() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model(false), None).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("\"attention\":false"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model(true), None).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_checkpoint(&mut wrong.as_slice()), Err(Error::Input(_))));
        assert!(read_checkpoint(&mut &b""[..]).is_err());
    }
}

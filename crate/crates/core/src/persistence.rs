//! CKPT1 checkpoints: one file holding configuration, vocabulary, weights,
//! averaged weights, and optionally the optimizer state.
//!
//! ```text
//! "CKPT1"  u32 version  u32 crc32(payload)  payload
//! payload: u32 record_count, then records sorted by name:
//!   u32 name_len, name (UTF-8), u8 dtype, u32 rank, rank × u32 dims,
//!   u64 byte_len, bytes
//! ```
//!
//! All integers and floats are little-endian. `dtype` is 0 for f32 tensors,
//! 1 for f64 tensors and 2 for UTF-8 JSON documents (rank 1, dim = byte
//! length). See `docs/ckpt1.md` for an annotated example.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmbeddingTable, Vocab};
use crate::encoder::EncoderConfig;
use crate::model::{ModelError, Segmenter};
use crate::trainer::{EmaState, OptimizerState, Snapshot, TrainConfig};

pub const MAGIC: &[u8; 5] = b"CKPT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = MAGIC.len() + 8;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_JSON: u8 = 2;

const META: &str = "meta";
const VOCAB: &str = "vocab";
const EMA_PREFIX: &str = "ema.";
const FIRST_MOMENT_PREFIX: &str = "adam.m.";
const SECOND_MOMENT_PREFIX: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a CKPT1 checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown tensor {0:?} in checkpoint")]
    UnknownTensor(String),
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = PersistError> = std::result::Result<T, E>;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Raw (non-averaged) weights.
    pub model: Segmenter<f32>,
    pub ema: Option<EmaState<f32>>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn from_snapshot(config: TrainConfig, snapshot: &Snapshot<f32>) -> Self {
        Checkpoint {
            config,
            model: snapshot.model.clone(),
            ema: Some(snapshot.ema.clone()),
            optimizer: Some(snapshot.optimizer.clone()),
        }
    }

    /// Weights used for evaluation: the averaged ones when present.
    pub fn inference_model(&self) -> Segmenter<f32> {
        match &self.ema {
            Some(ema) => ema.apply(&self.model),
            None => self.model.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    train: TrainConfig,
    encoder: EncoderConfig,
    /// Names of tensors that receive gradients.
    trainable: Vec<String>,
    ema: Option<EmaMeta>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmaMeta {
    decay: f64,
    updates: u64,
}

enum Payload {
    F32(Vec<usize>, Vec<f32>),
    Json(String),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

/// Serializes a checkpoint to CKPT1 bytes. Identical checkpoints give identical bytes.
pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut records: BTreeMap<String, Payload> = BTreeMap::new();
    let meta = Meta {
        train: c.config,
        encoder: *c.model.config(),
        trainable: c.model.trainable().into_iter().map(|(n, _)| n).collect(),
        ema: c.ema.as_ref().map(|e| EmaMeta {
            decay: e.decay,
            updates: e.updates,
        }),
        optimizer_step: c.optimizer.as_ref().map(|o| o.step),
    };
    records.insert(META.into(), Payload::Json(serde_json::to_string(&meta).expect("serializable")));
    records.insert(
        VOCAB.into(),
        Payload::Json(serde_json::to_string(c.model.vocab.tokens()).expect("serializable")),
    );
    let shapes: BTreeMap<String, Vec<usize>> =
        c.model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for (name, t) in c.model.named_tensors() {
        records.insert(name, Payload::F32(t.shape().to_vec(), t.values().to_vec()));
    }
    let mut side = |prefix: &str, map: &BTreeMap<String, Vec<f32>>| {
        for (name, values) in map {
            let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![values.len()]);
            records.insert(format!("{prefix}{name}"), Payload::F32(shape, values.clone()));
        }
    };
    if let Some(ema) = &c.ema {
        side(EMA_PREFIX, &ema.shadow);
    }
    if let Some(opt) = &c.optimizer {
        side(FIRST_MOMENT_PREFIX, &opt.first);
        side(SECOND_MOMENT_PREFIX, &opt.second);
    }

    let mut payload = Vec::new();
    put_u32(&mut payload, records.len());
    for (name, record) in &records {
        put_u32(&mut payload, name.len());
        payload.extend_from_slice(name.as_bytes());
        let (dtype, shape, bytes): (u8, Vec<usize>, Vec<u8>) = match record {
            Payload::F32(shape, values) => (DTYPE_F32, shape.clone(), values.iter().flat_map(|v| v.to_le_bytes()).collect()),
            Payload::Json(text) => (DTYPE_JSON, vec![text.len()], text.as_bytes().to_vec()),
        };
        payload.push(dtype);
        put_u32(&mut payload, shape.len());
        for d in shape {
            put_u32(&mut payload, d);
        }
        payload.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        payload.extend_from_slice(&bytes);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Writes the checkpoint through a temporary file in the same directory and
/// renames it into place, so readers never observe a partial file.
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(c))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PersistError::Format(format!("record runs past the end at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| PersistError::Format("record length overflows".into()))
    }
}

struct RawRecord<'b> {
    dtype: u8,
    shape: Vec<usize>,
    bytes: &'b [u8],
}

impl RawRecord<'_> {
    fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        if self.dtype != DTYPE_JSON {
            return Err(PersistError::Format(format!("record {name:?} should be JSON")));
        }
        serde_json::from_slice(self.bytes).map_err(|e| PersistError::Format(format!("record {name:?}: {e}")))
    }

    fn f32s(&self, name: &str) -> Result<Vec<f32>> {
        match self.dtype {
            DTYPE_F32 => Ok(self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()),
            DTYPE_F64 => Err(PersistError::Format(format!("record {name:?} is f64; models are stored in f32"))),
            other => Err(PersistError::Format(format!("record {name:?} has unknown dtype {other}"))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(MAGIC.len());
    if version != FORMAT_VERSION {
        return Err(PersistError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let stored = word(MAGIC.len() + 4);
    let payload = &bytes[HEADER_LEN..];
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: payload, pos: 0 };
    let count = r.u32()?;
    let mut records: BTreeMap<String, RawRecord<'_>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| PersistError::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = r.u64()?;
        let data = r.take(len)?;
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            _ => 1,
        };
        if len != shape.iter().product::<usize>() * width {
            return Err(PersistError::Format(format!("record {name:?}: {len} bytes do not match shape {shape:?}")));
        }
        if records.insert(name.clone(), RawRecord { dtype, shape, bytes: data }).is_some() {
            return Err(PersistError::Format(format!("duplicate record {name:?}")));
        }
    }
    if r.pos != payload.len() {
        return Err(PersistError::Format("trailing bytes after the last record".into()));
    }

    let meta: Meta = records
        .remove(META)
        .ok_or_else(|| PersistError::Format("meta record missing".into()))?
        .json(META)?;
    let tokens: Vec<String> = records
        .remove(VOCAB)
        .ok_or_else(|| PersistError::Format("vocab record missing".into()))?
        .json(VOCAB)?;
    let vocab = Vocab::from_tokens(tokens);
    let embeddings = EmbeddingTable::zeros(vocab.len(), meta.encoder.word_dim);
    let mut model = Segmenter::init(meta.encoder, vocab, embeddings, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mut shapes = BTreeMap::new();
    for (name, tensor) in model.named_tensors_mut() {
        let rec = records.remove(&name).ok_or_else(|| PersistError::MissingTensor(name.clone()))?;
        check_shape(&name, tensor.shape(), &rec.shape)?;
        tensor.values_mut().copy_from_slice(&rec.f32s(&name)?);
        tensor.set_requires_grad(meta.trainable.contains(&name));
        shapes.insert(name, tensor.shape().to_vec());
    }

    let mut take_side = |prefix: &str| -> Result<BTreeMap<String, Vec<f32>>> {
        let names: Vec<String> = records.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = BTreeMap::new();
        for full in names {
            let rec = records.remove(&full).expect("listed above");
            let base = &full[prefix.len()..];
            let expected = shapes.get(base).ok_or_else(|| PersistError::UnknownTensor(full.clone()))?;
            check_shape(&full, expected, &rec.shape)?;
            out.insert(base.to_string(), rec.f32s(&full)?);
        }
        Ok(out)
    };
    let shadow = take_side(EMA_PREFIX)?;
    let first = take_side(FIRST_MOMENT_PREFIX)?;
    let second = take_side(SECOND_MOMENT_PREFIX)?;
    if let Some(name) = records.keys().next() {
        return Err(PersistError::UnknownTensor(name.clone()));
    }

    let ema = meta.ema.map(|e| EmaState {
        decay: e.decay,
        updates: e.updates,
        shadow,
    });
    let optimizer = meta.optimizer_step.map(|step| OptimizerState { step, first, second });
    Ok(Checkpoint {
        config: meta.train,
        model,
        ema,
        optimizer,
    })
}

fn check_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(PersistError::Shape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::encoder::Window;
    use crate::tensor::Tensor;
    use crate::synthetic::{connective_corpus, random_embeddings};
    use crate::trainer::{train, Dataset};

    fn tensor_map(model: &Segmenter<f32>) -> BTreeMap<String, Tensor<f32>> {
        model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Offset of the record name `name`, matched with its length prefix.
    fn name_offset(bytes: &[u8], name: &str) -> usize {
        let mut pattern = (name.len() as u32).to_le_bytes().to_vec();
        pattern.extend_from_slice(name.as_bytes());
        bytes.windows(pattern.len()).position(|w| w == pattern).unwrap() + 4
    }

    fn trained(use_attention: bool) -> (Checkpoint, Vec<crate::corpus::Sentence>) {
        let corpus = connective_corpus(30, 11);
        let vocab = build_vocab(&corpus, 1);
        let config = TrainConfig {
            hidden: 3,
            batch_size: 8,
            max_epochs: 2,
            learning_rate: 0.01,
            use_elmo: false,
            use_attention,
            window: Window::Unbounded,
            ..TrainConfig::default()
        };
        let model = Segmenter::init(
            config.encoder_config(5, 0),
            vocab.clone(),
            random_embeddings(&vocab, 5, 1),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let out = train(model, &config, Dataset::new(&corpus[..20], None), Dataset::new(&corpus[20..], None), |_| {}).unwrap();
        (Checkpoint::from_snapshot(config, &out.best), corpus)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for attention in [false, true] {
            let (c, _) = trained(attention);
            let back = from_bytes(&to_bytes(&c)).unwrap();
            assert_eq!(back, c);
            for ((n1, a), (n2, b)) in tensor_map(&back.model).iter().zip(&tensor_map(&c.model)) {
                assert_eq!(n1, n2);
                let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn serialization_is_canonical() {
        let (c, _) = trained(true);
        assert_eq!(to_bytes(&c), to_bytes(&c.clone()));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&c, &p1).unwrap();
        save_checkpoint(&c, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn reload_decodes_identically() {
        let (c, corpus) = trained(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let before = c.inference_model().decode(&corpus, None, 4).unwrap();
        save_checkpoint(&c, &path).unwrap();
        let after = load_checkpoint(&path).unwrap().inference_model().decode(&corpus, None, 4).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let (c, _) = trained(false);
        let bytes = to_bytes(&c);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(PersistError::Checksum { .. })));
        for at in [HEADER_LEN, HEADER_LEN + 17, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x40;
            assert!(matches!(from_bytes(&bad), Err(PersistError::Checksum { .. })), "byte {at}");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let (c, _) = trained(false);
        let mut bytes = to_bytes(&c);
        bytes[5..9].copy_from_slice(&7u32.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, PersistError::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
        assert!(matches!(from_bytes(b"CKPT2\0\0\0\0\0\0\0\0"), Err(PersistError::BadMagic)));
    }

    /// Re-signs a payload after editing it.
    fn resign(mut bytes: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&bytes[HEADER_LEN..]);
        bytes[MAGIC.len() + 4..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
        bytes
    }

    #[test]
    fn unknown_and_missing_tensor_names() {
        let (c, _) = trained(false);
        let bytes = to_bytes(&c);
        let at = name_offset(&bytes, "crf.bias");
        let mut renamed = bytes.clone();
        renamed[at..at + 8].copy_from_slice(b"crf.bian");
        match from_bytes(&resign(renamed)) {
            Err(PersistError::MissingTensor(n)) => assert_eq!(n, "crf.bias"),
            other => panic!("unexpected {other:?}"),
        }
        let mut odd = bytes;
        let ema_at = name_offset(&odd, "ema.crf.bias");
        odd[ema_at..ema_at + 12].copy_from_slice(b"ema.crf.bix_");
        match from_bytes(&resign(odd)) {
            Err(PersistError::UnknownTensor(n)) => assert_eq!(n, "ema.crf.bix_"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_checkpoint("/nonexistent/model.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}

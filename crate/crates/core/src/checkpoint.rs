//! Binary model checkpoints: named `f64` tensors plus the vocabulary,
//! the effective configuration text, and free-form creation metadata,
//! behind a magic header and format version. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"RECKPT01";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {got} is newer than supported version {supported}")]
    FutureVersion { got: u32, supported: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// A complete serialized model: everything needed to rebuild it plus the
/// provenance to audit where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the config that produced the artifact.
    pub config_text: String,
    /// Creation metadata: stage name, hashes, seeds, timestamps.
    pub meta: Vec<(String, String)>,
    pub vocab: Vocabulary,
    /// Named parameter tensors in registration order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(
        config_text: String,
        meta: Vec<(String, String)>,
        vocab: &Vocabulary,
        params: &ParamSet,
    ) -> Self {
        Checkpoint {
            config_text,
            meta,
            vocab: vocab.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the parameter set in stored order, ready for a network's
    /// `from_params` constructor.
    pub fn to_param_set(&self) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, tensor) in &self.tensors {
            params.add(name.clone(), tensor.clone());
        }
        params
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut f, &self.config_text)?;
        f.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut f, k)?;
            write_str(&mut f, v)?;
        }
        let words = self.vocab.corpus_tokens();
        f.write_all(&(words.len() as u64).to_le_bytes())?;
        for w in words {
            write_str(&mut f, w)?;
        }
        f.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut f, name)?;
            f.write_all(&(t.rows() as u32).to_le_bytes())?;
            f.write_all(&(t.cols() as u32).to_le_bytes())?;
            for x in t.data() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Format("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut f, "version")?;
        if version > VERSION {
            return Err(CheckpointError::FutureVersion {
                got: version,
                supported: VERSION,
            });
        }
        let config_text = read_str(&mut f, "config")?;
        let meta_len = read_u32(&mut f, "metadata count")? as usize;
        let mut meta = Vec::with_capacity(meta_len);
        for _ in 0..meta_len {
            let k = read_str(&mut f, "metadata key")?;
            let v = read_str(&mut f, "metadata value")?;
            meta.push((k, v));
        }
        let word_count = read_u64(&mut f, "vocabulary count")? as usize;
        let mut words = Vec::with_capacity(word_count);
        for i in 0..word_count {
            words.push(
                read_str(&mut f, "vocabulary token")
                    .map_err(|_| CheckpointError::Format(format!("truncated token {i}")))?,
            );
        }
        let vocab = Vocabulary::from_corpus_tokens(words);
        let tensor_count = read_u32(&mut f, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for i in 0..tensor_count {
            let name = read_str(&mut f, "tensor name")
                .map_err(|_| CheckpointError::Format(format!("truncated tensor {i}")))?;
            let rows = read_u32(&mut f, "tensor rows")? as usize;
            let cols = read_u32(&mut f, "tensor cols")? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut f64b = [0u8; 8];
            for _ in 0..rows * cols {
                f.read_exact(&mut f64b).map_err(|_| {
                    CheckpointError::Format(format!("truncated payload of `{name}`"))
                })?;
                data.push(f64::from_le_bytes(f64b));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Format("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            config_text,
            meta,
            vocab,
            tensors,
        })
    }
}

fn write_str<W: Write>(f: &mut W, s: &str) -> Result<(), CheckpointError> {
    f.write_all(&(s.len() as u64).to_le_bytes())?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(f: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format(format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(f: &mut R, what: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format(format!("truncated {what}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(f: &mut R, what: &str) -> Result<String, CheckpointError> {
    let len = read_u64(f, what)? as usize;
    if len > (1 << 32) {
        return Err(CheckpointError::Format(format!(
            "implausible {what} length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Format(format!("truncated {what}")))?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Format(format!("non-UTF-8 {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, Example};
    use crate::pipeline::stream_rng;
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let examples = vec![Example {
            id: "a".into(),
            group_key: "g".into(),
            input_fields: vec![("desc".into(), vec!["make".into(), "tea".into()])],
            output: vec!["boil".into(), "water".into()],
        }];
        let vocab = build_vocabulary(&examples, 1).unwrap();
        let mut rng = stream_rng(5, "checkpoint.test");
        let mut params = ParamSet::new();
        params.add("enc.w", Tensor::uniform(3, 4, -1.0, 1.0, &mut rng));
        params.add("enc.b", Tensor::row_vector(vec![0.25, -0.5, rng.random()]));
        params.add(
            "odd.values",
            Tensor::row_vector(vec![f64::MIN_POSITIVE, -0.0, 1e300, 3.5e-250]),
        );
        Checkpoint::from_params(
            "kappa = 500\n".into(),
            vec![
                ("stage".into(), "train-editor".into()),
                ("config_hash".into(), "feed".into()),
            ],
            &vocab,
            &params,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        for ((_, a), (_, b)) in loaded.tensors.iter().zip(&ck.tensors) {
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // Second save is byte-identical.
        let path2 = dir.path().join("model2.ck");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn param_set_round_trip_preserves_order() {
        let ck = sample_checkpoint();
        let params = ck.to_param_set();
        let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["enc.w", "enc.b", "odd.values"]);
        assert_eq!(params.get(params.id("enc.b").unwrap()).cols(), 3);
        assert_eq!(ck.meta_value("stage"), Some("train-editor"));
        assert_eq!(ck.meta_value("absent"), None);
    }

    #[test]
    fn future_version_fails_loudly() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(CheckpointError::FutureVersion { got: 2, supported: 1 }) => {}
            other => panic!("expected FutureVersion, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.ck");
        std::fs::write(&bad_magic, b"NOTACKPT rest").unwrap();
        assert!(matches!(
            Checkpoint::load(&bad_magic),
            Err(CheckpointError::BadMagic)
        ));

        let truncated = dir.path().join("short.ck");
        std::fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            Checkpoint::load(&truncated),
            Err(CheckpointError::Format(_))
        ));

        let padded = dir.path().join("padded.ck");
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&padded, &extra).unwrap();
        assert!(matches!(
            Checkpoint::load(&padded),
            Err(CheckpointError::Format(_))
        ));
    }
}

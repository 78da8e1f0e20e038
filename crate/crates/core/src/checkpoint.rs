//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ESIMCKPT" | u32 version
//! u64 len | manifest JSON (config + tensor entries)
//! u64 len | vocabulary JSON (token list)
//! u64 len | f64 payload
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::Vocabulary;
use crate::error::{NliError, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ESIMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut config = config.clone();
    config.model = model.config.clone();
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut payload = Vec::with_capacity(model.store.num_scalars() * 8);
    for (_, name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            dtype: "f64".into(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { config, tensors })?;
    let vocab = serde_json::to_vec(model.vocab.tokens())?;

    let mut out = Vec::with_capacity(40 + manifest.len() + vocab.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for section in [&manifest, &vocab, &payload] {
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(section);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated file: wanted {n} bytes at offset {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn section(&mut self) -> std::result::Result<&'a [u8], String> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        self.take(usize::try_from(len).map_err(|_| "section length overflows".to_string())?)
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Model, TrainConfig)> {
    let fail = |message: String| NliError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let mut r = Reader { bytes: body, pos: 12 };
    let manifest = r.section().map_err(fail)?;
    let vocab = r.section().map_err(fail)?;
    let payload = r.section().map_err(fail)?;
    if r.pos != body.len() {
        return Err(fail(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    let actual = crc32fast::hash(body);
    if actual != stored {
        return Err(fail(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let manifest: Manifest =
        serde_json::from_slice(manifest).map_err(|e| fail(format!("manifest: {e}")))?;
    let tokens: Vec<String> = serde_json::from_slice(vocab).map_err(|e| fail(format!("vocabulary: {e}")))?;
    let vocab = Vocabulary::from_token_list(tokens)?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(fail(format!("tensor `{}` has unsupported dtype {}", entry.name, entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        if end > payload.len() {
            return Err(fail(format!("tensor `{}` runs past the payload", entry.name)));
        }
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    let model = Model::from_store(manifest.config.model.clone(), vocab, store)?;
    Ok((model, manifest.config))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(model: &Model, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| NliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| NliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| NliError::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ModelKind};
    use crate::corpus::{parse_sexpr, Label, SentencePair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(kind: ModelKind) -> (Model, TrainConfig, Vec<SentencePair>) {
        let t = parse_sexpr("( ( a b ) c )").unwrap();
        let h = parse_sexpr("( a c )").unwrap();
        let pairs = vec![SentencePair {
            premise: t.tokens(),
            hypothesis: h.tokens(),
            premise_tree: Some(t),
            hypothesis_tree: Some(h),
            label: Label::Neutral,
        }];
        let config = TrainConfig {
            model: ModelConfig {
                kind,
                embed_dim: 3,
                hidden_dim: 2,
                mlp_dim: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let vocab = Vocabulary::build(&pairs);
        let emb = Tensor::gaussian(vocab.len(), 3, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let model = Model::new(config.model.clone(), vocab, emb, 2).unwrap();
        (model, config, pairs)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (model, config, pairs) = toy(ModelKind::Tree);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&model, &config, &a).unwrap();
        let (back, cfg) = load_checkpoint(&a).unwrap();
        assert_eq!(cfg, config);
        assert!(back.store.bit_equal(&model.store));
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.predict(&pairs, 1).unwrap(), model.predict(&pairs, 1).unwrap());
        save_checkpoint(&back, &cfg, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn three_sections() {
        let (model, config, _) = toy(ModelKind::Tree);
        let bytes = to_bytes(&model, &config).unwrap();
        let mut r = Reader { bytes: &bytes[..bytes.len() - 4], pos: 12 };
        let sections: Vec<usize> = (0..3).map(|_| r.section().unwrap().len()).collect();
        assert_eq!(r.pos, bytes.len() - 4);
        assert_eq!(sections[2], model.num_parameters() * 8);
    }

    #[test]
    fn corruption_detected() {
        let (model, config, _) = toy(ModelKind::Esim);
        let bytes = to_bytes(&model, &config).unwrap();
        let p = Path::new("x.ckpt");
        for pos in [20, bytes.len() / 2, bytes.len() - 10] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = from_bytes(&bad, p).unwrap_err();
            assert!(matches!(err, NliError::Checkpoint { .. }), "{err}");
        }
        let err = from_bytes(&bytes[..bytes.len() - 7], p).unwrap_err();
        assert!(matches!(err, NliError::Checkpoint { .. }));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(from_bytes(&v2, p).unwrap_err().to_string().contains("version"));
        assert!(from_bytes(b"hello", p).is_err());
    }
}

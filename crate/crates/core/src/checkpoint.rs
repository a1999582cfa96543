//! Checkpoints: `manifest.json` (tensor table, config, seed and the data
//! context needed to rebuild a model) plus `params.bin`, the parameter
//! values as little-endian `f64` concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, RoadGraph};
use crate::error::{Error, Result};
use crate::model::{Dims, Model, ModelConfig};
use crate::tokenizer::Vocab;

pub const FORMAT: &str = "traffic-text-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub dims: Dims,
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub norm_stats: NormStats,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A model with everything needed to run it on raw data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: NormStats,
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_word_list(self.vocab.clone())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .iter()
            .map(|(id, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    frozen: self.model.params.is_frozen(id),
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            config: self.model.config.clone(),
            dims: self.model.dims,
            nodes: self.model.graph.node_names.clone(),
            edges: self.model.graph.edges(),
            norm_stats: self.stats.clone(),
            vocab: self.vocab.clone(),
            tensors,
        }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.model.params.num_scalars() * 8);
        for (_, _, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes both files through temporaries renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        write_atomic(&dir.join(PARAMS_FILE), &self.params_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            Error::parse(MANIFEST_FILE, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        Checkpoint::from_parts(manifest, &bytes)
    }

    /// Rebuilds the model from its config and overwrites every tensor by
    /// name, checking shapes against the rebuilt architecture.
    pub fn from_parts(manifest: Manifest, bytes: &[u8]) -> Result<Checkpoint> {
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let graph = RoadGraph::from_edges(manifest.nodes.clone(), &manifest.edges)?;
        let mut model = Model::new(manifest.config.clone(), manifest.dims, graph, manifest.seed)?;
        if manifest.tensors.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                manifest.tensors.len(),
                model.params.len()
            )));
        }
        let mut expected_offset = 0;
        for entry in &manifest.tensors {
            let id = model
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {} is not part of the model", entry.name)))?;
            let target = model.params.get_mut(id);
            if target.shape() != entry.shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?} in the checkpoint but {:?} in the model",
                    entry.name,
                    entry.shape,
                    target.shape()
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Config(format!("tensor {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
            }
            let end = entry.offset + target.len() * 8;
            if end > bytes.len() {
                return Err(Error::Config(format!(
                    "{PARAMS_FILE} is truncated: tensor {} needs bytes up to {end}, file has {}",
                    entry.name,
                    bytes.len()
                )));
            }
            for (v, chunk) in target.data_mut().iter_mut().zip(bytes[entry.offset..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            model.params.set_frozen(id, entry.frozen);
            expected_offset = end;
        }
        if expected_offset != bytes.len() {
            return Err(Error::Config(format!(
                "{PARAMS_FILE} has {} bytes, manifest accounts for {expected_offset}",
                bytes.len()
            )));
        }
        if manifest.norm_stats.mean.len() != manifest.dims.n_nodes * manifest.dims.channels
            || manifest.norm_stats.std.len() != manifest.norm_stats.mean.len()
        {
            return Err(Error::Config("normalization statistics do not match the model dimensions".into()));
        }
        if manifest.vocab.len() != manifest.dims.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} words, model expects {}",
                manifest.vocab.len(),
                manifest.dims.vocab_size
            )));
        }
        Vocab::from_word_list(manifest.vocab.clone())?;
        Ok(Checkpoint {
            model,
            stats: manifest.norm_stats,
            vocab: manifest.vocab,
            seed: manifest.seed,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::node_name;
    use crate::numerics::RngState;

    fn sample_checkpoint() -> Checkpoint {
        let graph = RoadGraph::from_edges((0..3).map(node_name).collect(), &[(0, 1), (1, 2)]).unwrap();
        let words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>", "elm", "on"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = Vocab::from_word_list(words.clone()).unwrap();
        let config = ModelConfig {
            window: 8,
            text_len: 8,
            d_model: 8,
            lora: Some(crate::generator::LoraConfig {
                rank: 4,
                ..Default::default()
            }),
            ..ModelConfig::default()
        };
        let dims = Dims {
            n_nodes: 3,
            channels: 1,
            vocab_size: vocab.len(),
        };
        let mut model = Model::new(config, dims, graph, 5).unwrap();
        // move parameters off their initial values
        let mut rng = RngState::new(9);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                *v += 0.01 * rng.normal();
            }
        }
        Checkpoint {
            model,
            stats: NormStats {
                mean: vec![50.0, 51.5, 49.25],
                std: vec![8.0, 7.5, 9.125],
            },
            vocab: words,
            seed: 5,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.manifest(), ck.manifest());
        assert_eq!(back.params_bytes(), ck.params_bytes());
        for ((_, _, a), (_, _, b)) in back.model.params.iter().zip(ck.model.params.iter()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        for f in [MANIFEST_FILE, PARAMS_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
        assert!(!dir.path().join("params.tmp").exists());
    }

    #[test]
    fn offsets_follow_manifest_order() {
        let m = sample_checkpoint().manifest();
        let mut off = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, off);
            off += e.shape.iter().product::<usize>() * 8;
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let ck = sample_checkpoint();
        let mut m = ck.manifest();
        m.tensors[0].shape.push(1);
        let err = Checkpoint::from_parts(m, &ck.params_bytes()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let mut m = ck.manifest();
        m.config.d_model = 16;
        assert!(matches!(Checkpoint::from_parts(m, &ck.params_bytes()), Err(Error::Config(_))));

        let bytes = ck.params_bytes();
        assert!(matches!(
            Checkpoint::from_parts(ck.manifest(), &bytes[..bytes.len() - 8]),
            Err(Error::Config(_))
        ));
    }
}

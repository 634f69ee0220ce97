//! On-disk model format.
//!
//! ```text
//! <dir>/config.json      ModelConfig
//! <dir>/vocab.txt        one token per line, line number = id
//! <dir>/manifest.json    dtype + [{name, shape, group, trainable, file}]
//! <dir>/peft.json        active TuningPlan
//! <dir>/tensors/*.bin    little-endian values of base and head tensors
//! <dir>/peft/*.bin       injected PEFT tensors
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{AdapterIds, Backbone, EmbeddingIds, LayerIds, LayerPeft, Linear, LmHeadIds, LoraIds};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::peft::{apply_plan, TuningPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

fn tensor_file(name: &str) -> String {
    match name.strip_prefix("peft/") {
        Some(rest) => format!("peft/{rest}.bin"),
        None => format!("tensors/{name}.bin"),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_string(path)?)?)
}

fn read_tensor<S: Scalar>(dir: &Path, entry: &ManifestEntry) -> Result<Tensor<S>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * S::BYTES {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            entry.file,
            n * S::BYTES,
            entry.shape,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor::from_vec(&entry.shape, data)
}

fn read_manifest<S: Scalar>(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint dtype {} cannot load as {}", manifest.dtype, S::DTYPE)));
    }
    Ok(manifest)
}

impl<S: Scalar> Backbone<S> {
    /// Writes config, vocabulary, manifest and one binary file per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        let mut vocab = self.tokenizer.vocab().join("\n");
        vocab.push('\n');
        write(&dir.join("vocab.txt"), vocab.as_bytes())?;
        write_json(&dir.join("peft.json"), &self.plan)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (_, p) in self.params.iter() {
            let file = tensor_file(&p.name);
            let mut bytes = Vec::with_capacity(p.value.numel() * S::BYTES);
            for &x in p.value.data() {
                x.write_le(&mut bytes);
            }
            write(&dir.join(&file), &bytes)?;
            tensors.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: p.group,
                trainable: p.trainable,
                file,
            });
        }
        write_json(&dir.join("manifest.json"), &Manifest { dtype: S::DTYPE.to_string(), tensors })
    }

    /// Rebuilds a model, including head and PEFT tensors, from a checkpoint.
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = read_json(&dir.join("config.json"))?;
        config.validate()?;
        let vocab: Vec<String> = read_string(&dir.join("vocab.txt"))?.lines().map(str::to_string).collect();
        let tokenizer = Tokenizer::from_vocab(&vocab)?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocab.txt has {} entries but config says {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        let plan: TuningPlan = read_json(&dir.join("peft.json"))?;
        let manifest = read_manifest::<S>(dir)?;
        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let id = params.add(entry.name.clone(), read_tensor(dir, entry)?, entry.group)?;
            params.get_mut(id).trainable = entry.trainable;
        }
        Self::from_parts(config, tokenizer, params, plan)
    }

    /// Overwrites this model's tensors from a checkpoint written for the same
    /// configuration. Tensors present only in the checkpoint are added.
    pub fn load_weights(&mut self, dir: &Path) -> Result<()> {
        let config: ModelConfig = read_json(&dir.join("config.json"))?;
        if config != self.config {
            return Err(Error::Checkpoint(format!("config mismatch: checkpoint {config:?} vs model {:?}", self.config)));
        }
        let manifest = read_manifest::<S>(dir)?;
        for entry in &manifest.tensors {
            let value = read_tensor(dir, entry)?;
            match self.params.id(&entry.name) {
                Some(id) => {
                    if self.params.value(id).shape() != value.shape() {
                        return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
                    }
                    self.params.get_mut(id).value = value;
                }
                None if entry.group == ParamGroup::Backbone => {
                    return Err(Error::Checkpoint(format!("unexpected backbone tensor {}", entry.name)));
                }
                None => {
                    let id = self.params.add(entry.name.clone(), value, entry.group)?;
                    self.params.get_mut(id).trainable = entry.trainable;
                }
            }
        }
        Ok(())
    }

    /// Injects the checkpoint's PEFT plan into this (untouched) base model and
    /// loads only the `peft/` tensors.
    pub fn load_peft(&mut self, dir: &Path) -> Result<()> {
        let plan: TuningPlan = read_json(&dir.join("peft.json"))?;
        apply_plan(self, &plan)?;
        let manifest = read_manifest::<S>(dir)?;
        for entry in manifest.tensors.iter().filter(|e| e.group == ParamGroup::Peft) {
            let id = self
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("plan did not create {}", entry.name)))?;
            let value = read_tensor(dir, entry)?;
            if self.params.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
            }
            self.params.get_mut(id).value = value;
        }
        Ok(())
    }

    pub(crate) fn from_parts(config: ModelConfig, tokenizer: Tokenizer, params: ParamStore<S>, plan: TuningPlan) -> Result<Self> {
        let need = |name: &str| -> Result<ParamId> {
            params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear { w: need(&format!("{name}.weight"))?, b: need(&format!("{name}.bias"))? })
        };
        let emb = EmbeddingIds {
            word: need("embeddings.word")?,
            position: need("embeddings.position")?,
            norm_w: need("embeddings.norm.weight")?,
            norm_b: need("embeddings.norm.bias")?,
        };
        let mut layers = Vec::new();
        let mut peft = Vec::new();
        for i in 0..config.num_layers {
            let p = format!("layers.{i}");
            layers.push(LayerIds {
                query: lin(&format!("{p}.attn.query"))?,
                key: lin(&format!("{p}.attn.key"))?,
                value: lin(&format!("{p}.attn.value"))?,
                output: lin(&format!("{p}.attn.output"))?,
                attn_norm: lin(&format!("{p}.attn_norm"))?,
                ffn_up: lin(&format!("{p}.ffn.up"))?,
                ffn_down: lin(&format!("{p}.ffn.down"))?,
                ffn_norm: lin(&format!("{p}.ffn_norm"))?,
            });
            let q = format!("peft/{p}");
            let lora = |proj: &str| -> Option<LoraIds> {
                Some(LoraIds {
                    a: params.id(&format!("{q}.attn.{proj}.lora_a"))?,
                    b: params.id(&format!("{q}.attn.{proj}.lora_b"))?,
                })
            };
            let adapter = |site: &str| -> Option<AdapterIds> {
                let base = format!("{q}.adapter_{site}");
                Some(AdapterIds {
                    down: Linear { w: params.id(&format!("{base}.down.weight"))?, b: params.id(&format!("{base}.down.bias"))? },
                    up: Linear { w: params.id(&format!("{base}.up.weight"))?, b: params.id(&format!("{base}.up.bias"))? },
                })
            };
            let prefix = params.id(&format!("{q}.prefix.key")).zip(params.id(&format!("{q}.prefix.value")));
            peft.push(LayerPeft {
                lora_query: lora("query"),
                lora_value: lora("value"),
                adapter_attn: adapter("attn"),
                adapter_ffn: adapter("ffn"),
                prefix,
            });
        }
        let lm_head = LmHeadIds { transform: lin("lm_head.transform")?, norm: lin("lm_head.norm")?, bias: need("lm_head.bias")? };
        let complete = match plan {
            TuningPlan::Lora { .. } => peft.iter().all(|l| l.lora_query.is_some() && l.lora_value.is_some()),
            TuningPlan::Adapter { .. } => peft.iter().all(|l| l.adapter_attn.is_some() && l.adapter_ffn.is_some()),
            TuningPlan::Prefix { .. } => peft.iter().all(|l| l.prefix.is_some()),
            _ => true,
        };
        if !complete {
            return Err(Error::Checkpoint(format!("missing tensors for {} plan", plan.name())));
        }
        Ok(Self { config, tokenizer, params, emb, layers, lm_head, peft, plan })
    }
}

//! On-disk model and optimizer state.
//!
//! A checkpoint is a directory holding `manifest.txt` (flat key-value text:
//! model config, counters and a `tensor.<name> = <shape> <offset>` line per
//! array) and `tensors.bin` (the arrays back to back as little-endian f64).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::io::write_dir_atomic;
use crate::kv::KvDoc;
use crate::model::{LanguageModel, Role, TransformerConfig};
use crate::numerics::{AdamConfig, AdamState, DenseArray, ParameterSet};

const FORMAT: &str = "bambino-checkpoint v1";
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub optimizers: IndexMap<String, AdamState>,
    /// Free-form counters and provenance, e.g. `step` or `seed`.
    pub meta: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: LanguageModel) -> Self {
        Self {
            model,
            optimizers: IndexMap::new(),
            meta: IndexMap::new(),
        }
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or malformed meta.{key}")))
    }

    fn to_parts(&self) -> (String, Vec<u8>) {
        let mut doc = KvDoc::new();
        doc.set("format", FORMAT);
        doc.set("role", self.model.role);
        self.model.config.write_kv(&mut doc, "model.");
        for (k, v) in &self.meta {
            doc.set(format!("meta.{k}"), v);
        }
        let mut blob = Vec::new();
        let mut push = |doc: &mut KvDoc, name: String, shape: &[usize], values: &[f64]| {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let offset = blob.len() / 8;
            doc.set(format!("tensor.{name}"), format!("{} {offset}", dims.join("x")));
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in self.model.params.iter() {
            push(&mut doc, format!("param.{name}"), p.shape(), p.values());
        }
        for (opt_name, state) in &self.optimizers {
            let c = state.config;
            doc.set(format!("opt.{opt_name}.step"), state.step);
            doc.set_f64(format!("opt.{opt_name}.lr"), c.lr);
            doc.set_f64(format!("opt.{opt_name}.beta1"), c.beta1);
            doc.set_f64(format!("opt.{opt_name}.beta2"), c.beta2);
            doc.set_f64(format!("opt.{opt_name}.eps"), c.eps);
            for ((name, p), (m, v)) in self
                .model
                .params
                .iter()
                .zip(state.first_moment.iter().zip(&state.second_moment))
            {
                push(&mut doc, format!("opt.{opt_name}.m.{name}"), p.shape(), m);
                push(&mut doc, format!("opt.{opt_name}.v.{name}"), p.shape(), v);
            }
        }
        (doc.render(), blob)
    }

    /// Writes the directory atomically: a partial checkpoint is never
    /// visible under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.to_parts();
        write_dir_atomic(dir, |tmp| {
            fs::write(tmp.join(MANIFEST), manifest.as_bytes()).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
            fs::write(tmp.join(BLOB), &blob).map_err(|e| Error::io(tmp.join(BLOB), e))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let blob_path = dir.join(BLOB);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Self::from_parts(&text, &bytes)
    }

    fn from_parts(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let doc = KvDoc::parse(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ck = |e: Error| Error::Checkpoint(e.to_string());
        if doc.get("format") != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("not a {FORMAT} manifest")));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint("tensor blob length is not a multiple of 8".into()));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = |name: &str| -> Result<DenseArray> {
            let raw = doc
                .get(&format!("tensor.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (shape, offset) = raw
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor entry {raw:?}")))?;
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {raw:?}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset in {raw:?}")))?;
            let len: usize = shape.iter().product();
            let values = floats
                .get(offset..offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the blob")))?
                .to_vec();
            DenseArray::new(shape, values)
        };

        let config = TransformerConfig::read_kv(&doc, "model.").map_err(ck)?;
        let role: Role = doc.require("role").map_err(ck)?.parse().map_err(ck)?;
        let mut params = ParameterSet::new();
        for key in doc.keys() {
            if let Some(name) = key.strip_prefix("tensor.param.") {
                params.insert(name, tensor(&format!("param.{name}"))?)?;
            }
        }
        let model = LanguageModel::from_params(config, params, role)?;

        let mut optimizers = IndexMap::new();
        for key in doc.keys() {
            let Some(opt_name) = key.strip_prefix("opt.").and_then(|k| k.strip_suffix(".step")) else {
                continue;
            };
            let get = |field: &str| -> Result<f64> { doc.parse_value(&format!("opt.{opt_name}.{field}")).map_err(ck) };
            let config = AdamConfig {
                lr: get("lr")?,
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                eps: get("eps")?,
            };
            let mut state = AdamState::new(&model.params, config);
            state.step = doc.parse_value(key).map_err(ck)?;
            for (i, name) in model.params.names().enumerate() {
                state.first_moment[i] = tensor(&format!("opt.{opt_name}.m.{name}"))?.into_values();
                state.second_moment[i] = tensor(&format!("opt.{opt_name}.v.{name}"))?.into_values();
            }
            optimizers.insert(opt_name.to_string(), state);
        }

        let meta = doc
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.to_string())))
            .collect();
        Ok(Self {
            model,
            optimizers,
            meta,
        })
    }
}

/// FNV-1a over the checkpoint's tensor file, for cheap identity checks.
pub fn checksum(dir: &Path) -> Result<u64> {
    let path = dir.join(BLOB);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    }))
}

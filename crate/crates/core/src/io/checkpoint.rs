//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BJDD"                      4-byte magic
//! version: u32                currently 1
//! meta_len: u32, meta bytes   UTF-8 JSON
//! count: u32                  number of tensors, then per tensor:
//!   name_len: u32, name bytes (UTF-8)
//!   rank: u32, dims: rank × u32
//!   data: product(dims) × f32
//! ```
//!
//! The same container stores model weights (`generator.*`,
//! `discriminator.*`) and packed Bayer inputs written by `degrade`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::cfa::BayerPattern;
use crate::error::{Error, Result};
use crate::losses::FeatureExtractorSpec;
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BJDD";
pub const VERSION: u32 = 1;

const GENERATOR_PREFIX: &str = "generator.";
const DISCRIMINATOR_PREFIX: &str = "discriminator.";

/// Raw container contents: metadata text kept verbatim plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::MalformedCheckpoint(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.metadata.len(), "metadata length")?;
        out.extend_from_slice(self.metadata.as_bytes());
        put_u32(&mut out, self.tensors.len(), "tensor count")?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut out, d, "dimension")?;
            }
            out.reserve(4 * t.len());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("metadata is not UTF-8".into()))?;
        let count = r.u32("tensor count")?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::MalformedCheckpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a temporary file so a failed write never leaves a partial checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("bjdd.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

/// Self-description stored with model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub kind: String,
    pub generator: GeneratorSpec,
    pub discriminator: Option<DiscriminatorSpec>,
    pub pattern: BayerPattern,
    pub packing_order: [String; 4],
    pub feature_extractor: FeatureExtractorSpec,
    pub score_reduction: String,
    pub train_step: u64,
}

impl CheckpointMetadata {
    pub const KIND: &'static str = "jdd-model";

    pub fn new(
        generator: GeneratorSpec,
        discriminator: Option<DiscriminatorSpec>,
        pattern: BayerPattern,
        feature_extractor: FeatureExtractorSpec,
        train_step: u64,
    ) -> Self {
        Self {
            kind: Self::KIND.into(),
            generator,
            discriminator,
            pattern,
            packing_order: pattern.packing_order(),
            feature_extractor,
            score_reduction: "mean of sigmoid map".into(),
            train_step,
        }
    }
}

pub fn models_to_checkpoint(
    generator: &Generator<f32>,
    discriminator: Option<&Discriminator<f32>>,
    meta: &CheckpointMetadata,
) -> Result<Checkpoint> {
    let mut tensors = IndexMap::new();
    for (name, e) in generator.params.iter() {
        tensors.insert(format!("{GENERATOR_PREFIX}{name}"), e.tensor.clone());
    }
    if let Some(d) = discriminator {
        for (name, e) in d.params.iter() {
            tensors.insert(format!("{DISCRIMINATOR_PREFIX}{name}"), e.tensor.clone());
        }
    }
    Ok(Checkpoint { metadata: serde_json::to_string_pretty(meta)?, tensors })
}

pub fn save_models(
    path: &Path,
    generator: &Generator<f32>,
    discriminator: Option<&Discriminator<f32>>,
    meta: &CheckpointMetadata,
) -> Result<()> {
    save_checkpoint(path, &models_to_checkpoint(generator, discriminator, meta)?)
}

fn fill_store(store: &mut ParameterStore<f32>, tensors: &mut IndexMap<String, Tensor<f32>>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let t = tensors
            .shift_remove(&key)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{key}`")))?;
        store.set(&name, t).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    }
    Ok(())
}

/// Rebuilds networks from a model checkpoint, checking every tensor against the stored specs.
pub fn checkpoint_to_models(
    ckpt: Checkpoint,
) -> Result<(Generator<f32>, Option<Discriminator<f32>>, CheckpointMetadata)> {
    let meta: CheckpointMetadata = serde_json::from_str(&ckpt.metadata)
        .map_err(|e| Error::MalformedCheckpoint(format!("metadata: {e}")))?;
    if meta.kind != CheckpointMetadata::KIND {
        return Err(Error::MalformedCheckpoint(format!("expected a model checkpoint, found `{}`", meta.kind)));
    }
    let mut tensors = ckpt.tensors;
    let mut generator = Generator::new(meta.generator.clone(), 0)?;
    fill_store(&mut generator.params, &mut tensors, GENERATOR_PREFIX)?;
    let discriminator = match &meta.discriminator {
        Some(spec) => {
            let mut d = Discriminator::new(spec.clone(), 0)?;
            fill_store(&mut d.params, &mut tensors, DISCRIMINATOR_PREFIX)?;
            Some(d)
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::MalformedCheckpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok((generator, discriminator, meta))
}

pub fn load_models(path: &Path) -> Result<(Generator<f32>, Option<Discriminator<f32>>, CheckpointMetadata)> {
    checkpoint_to_models(load_checkpoint(path)?)
}

//! Auxiliary auditable data: tapped activation blocks, their per-channel
//! pooled vectors and outcome embeddings, labelled with membership.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use mint_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::audited::AuditedModel;
use crate::codec::{Reader, Writer};
use crate::dataset::{preprocess_batch, Membership, RawImage, SampleId};
use crate::error::{Error, IoContext, Result};

pub const STORE_MAGIC: &[u8; 8] = b"MINTAAD1";
pub const STORE_VERSION: u32 = 1;
const OUTCOME_CODE: u8 = 255;

/// A tap stage (1-based) or the model outcome pseudo-stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StageId {
    Stage(u8),
    Outcome,
}

impl StageId {
    pub fn code(self) -> u8 {
        match self {
            StageId::Stage(s) => s,
            StageId::Outcome => OUTCOME_CODE,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            OUTCOME_CODE => Some(StageId::Outcome),
            0 => None,
            s => Some(StageId::Stage(s)),
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::Stage(s) => write!(f, "stage{s}"),
            StageId::Outcome => write!(f, "outcome"),
        }
    }
}

impl std::str::FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "outcome" {
            return Ok(StageId::Outcome);
        }
        let digits = t.strip_prefix("stage").unwrap_or(&t);
        match digits.parse::<u8>() {
            Ok(n) if n >= 1 && n != OUTCOME_CODE => Ok(StageId::Stage(n)),
            _ => Err(Error::Parameter(format!("unknown stage `{s}`"))),
        }
    }
}

impl From<StageId> for String {
    fn from(s: StageId) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for StageId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-channel spatial reduction turning `H×W×C` into a `C`-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

fn check_block(block: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    if block.rank() != 3 {
        return Err(mint_tensor::TensorError::Dimension {
            op,
            detail: format!("expected H×W×C block, got {:?}", block.shape()),
        }
        .into());
    }
    let c = block.shape()[2];
    Ok((block.len() / c, c))
}

/// `out[c] = max over (h, w) of block[h, w, c]`.
pub fn channel_max_pool(block: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, c) = check_block(block, "channel_max_pool")?;
    let mut out = vec![f32::NEG_INFINITY; c];
    for px in block.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(Tensor::new(&[c], out)?)
}

/// `out[c] = mean over (h, w) of block[h, w, c]`.
pub fn channel_mean_pool(block: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c) = check_block(block, "channel_mean_pool")?;
    let mut out = vec![0f64; c];
    for px in block.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v as f64;
        }
    }
    Ok(Tensor::new(&[c], out.into_iter().map(|s| (s / n as f64) as f32).collect())?)
}

pub fn pool(block: &Tensor<f32>, pooling: Pooling) -> Result<Tensor<f32>> {
    match pooling {
        Pooling::Max => channel_max_pool(block),
        Pooling::Mean => channel_mean_pool(block),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AadRecord {
    pub sample_id: SampleId,
    pub stage: StageId,
    pub membership: Membership,
    /// `H×W×C` activation block; absent for outcome records or when blocks were not kept.
    pub block: Option<Tensor<f32>>,
    /// Channel-max vector (`C`) or embedding (`L`).
    pub vector: Vec<f32>,
}

/// A collection of records in canonical `(stage, sample_id)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AadStore {
    pub model_hash: [u8; 32],
    pub resolution: u32,
    records: Vec<AadRecord>,
    index: HashMap<(StageId, SampleId), usize>,
}

impl AadStore {
    /// Sort, validate and index records.
    pub fn new(model_hash: [u8; 32], resolution: u32, mut records: Vec<AadRecord>) -> Result<Self> {
        records.sort_by_key(|r| (r.stage, r.sample_id));
        let mut index = HashMap::with_capacity(records.len());
        let mut dims: HashMap<StageId, (usize, Option<[usize; 3]>)> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert((r.stage, r.sample_id), i).is_some() {
                return Err(Error::format("aad store", format!("record {i}"), format!("duplicate ({}, {})", r.stage, r.sample_id)));
            }
            let shape = r.block.as_ref().map(|b| [b.shape()[0], b.shape()[1], b.shape()[2]]);
            if let Some(b) = &r.block {
                if r.stage == StageId::Outcome {
                    return Err(Error::format("aad store", format!("record {i}"), "outcome record with block"));
                }
                if channel_max_pool(b)?.data() != r.vector.as_slice() {
                    return Err(Error::format("aad store", format!("record {i}"), "vector is not the channel max of its block"));
                }
            }
            let entry = dims.entry(r.stage).or_insert((r.vector.len(), shape));
            if entry.0 != r.vector.len() || (shape.is_some() && entry.1.is_some() && entry.1 != shape) {
                return Err(Error::format("aad store", format!("record {i}"), format!("inconsistent dimensions within {}", r.stage)));
            }
            if entry.1.is_none() {
                entry.1 = shape;
            }
        }
        Ok(AadStore {
            model_hash,
            resolution,
            records,
            index,
        })
    }

    pub fn records(&self) -> &[AadRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, stage: StageId, id: SampleId) -> Option<&AadRecord> {
        self.index.get(&(stage, id)).map(|&i| &self.records[i])
    }

    pub fn stages(&self) -> Vec<StageId> {
        let mut s: Vec<StageId> = self.records.iter().map(|r| r.stage).collect();
        s.dedup();
        s
    }

    /// Vector length of `stage`, if present.
    pub fn vector_dim(&self, stage: StageId) -> Option<usize> {
        self.records.iter().find(|r| r.stage == stage).map(|r| r.vector.len())
    }

    /// Block shape of `stage`, if blocks were stored.
    pub fn block_shape(&self, stage: StageId) -> Option<[usize; 3]> {
        self.records
            .iter()
            .find(|r| r.stage == stage && r.block.is_some())
            .and_then(|r| r.block.as_ref())
            .map(|b| [b.shape()[0], b.shape()[1], b.shape()[2]])
    }

    /// Count of records per membership.
    pub fn membership_counts(&self) -> (usize, usize) {
        let d = self.records.iter().filter(|r| r.membership == Membership::D).count();
        (d, self.records.len() - d)
    }

    /// Merge another store extracted from the same model.
    pub fn merge(self, other: AadStore) -> Result<AadStore> {
        if self.model_hash != other.model_hash || self.resolution != other.resolution {
            return Err(Error::Provenance("cannot merge stores from different models".into()));
        }
        let mut records = self.records;
        records.extend(other.records);
        AadStore::new(self.model_hash, self.resolution, records)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.bytes(&self.model_hash);
        w.u32(self.resolution);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            w.u64(r.sample_id);
            w.u8(r.stage.code());
            w.u8(match r.membership {
                Membership::E => 0,
                Membership::D => 1,
            });
            let (h, wd) = r.block.as_ref().map_or((0, 0), |b| (b.shape()[0], b.shape()[1]));
            w.u32(h as u32);
            w.u32(wd as u32);
            w.u32(r.vector.len() as u32);
            w.f32s(&r.vector);
            if let Some(b) = &r.block {
                w.f32s(b.data());
            }
        }
        w.buf
    }

    /// Decode and validate. With `expected_model`, the header hash must match it.
    pub fn decode(bytes: &[u8], expected_model: Option<&[u8; 32]>) -> Result<Self> {
        let mut r = Reader::new("aad store", bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let model_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(expected) = expected_model {
            if *expected != model_hash {
                return Err(Error::Provenance(format!(
                    "store was extracted from model {}, expected {}",
                    hex::encode(model_hash),
                    hex::encode(expected)
                )));
            }
        }
        let resolution = r.u32()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let bad = |r: &Reader, d: String| Error::format("aad store", format!("record {i} at offset {}", r.pos()), d);
            let sample_id = r.u64()?;
            let code = r.u8()?;
            let stage = StageId::from_code(code).ok_or_else(|| bad(&r, format!("stage code {code}")))?;
            let membership = match r.u8()? {
                0 => Membership::E,
                1 => Membership::D,
                m => return Err(bad(&r, format!("membership byte {m}"))),
            };
            let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            if c == 0 || (h == 0) != (w == 0) {
                return Err(bad(&r, format!("dimensions {h}×{w}×{c}")));
            }
            if c > r.remaining() / 4 {
                return Err(bad(&r, "vector exceeds file".into()));
            }
            let vector = r.f32s(c)?;
            let block = if h > 0 {
                let len = h.checked_mul(w).and_then(|n| n.checked_mul(c));
                match len {
                    Some(n) if n <= r.remaining() / 4 => Some(Tensor::new(&[h, w, c], r.f32s(n)?)?),
                    _ => return Err(bad(&r, "block exceeds file".into())),
                }
            } else {
                None
            };
            records.push(AadRecord {
                sample_id,
                stage,
                membership,
                block,
                vector,
            });
        }
        r.finish()?;
        AadStore::new(model_hash, resolution, records)
    }
}

pub fn write_store(store: &AadStore, path: &Path) -> Result<()> {
    fs::write(path, store.encode()).at(path)
}

pub fn read_store(path: &Path, expected_model: Option<&[u8; 32]>) -> Result<AadStore> {
    let bytes = fs::read(path).at(path)?;
    AadStore::decode(&bytes, expected_model)
}

/// One input to extraction.
#[derive(Debug, Clone, Copy)]
pub struct AadInput<'a> {
    pub sample_id: SampleId,
    pub membership: Membership,
    pub image: &'a RawImage,
}

pub const EXTRACT_BATCH: usize = 128;

/// Run `model` over `samples` and record the requested stages. Vectors are
/// always computed; blocks are kept only with `store_blocks`.
pub fn extract_aad(
    model: &AuditedModel,
    model_hash: [u8; 32],
    samples: &[AadInput<'_>],
    stages: &[StageId],
    store_blocks: bool,
) -> Result<AadStore> {
    let n_stages = model.taps.len() as u8;
    for s in stages {
        if let StageId::Stage(k) = s {
            if *k == 0 || *k > n_stages {
                return Err(Error::Parameter(format!("unknown stage {k}; model has {n_stages} stages")));
            }
        }
    }
    let mut records = Vec::with_capacity(samples.len() * stages.len());
    for chunk in samples.chunks(EXTRACT_BATCH) {
        let images: Vec<&RawImage> = chunk.iter().map(|s| s.image).collect();
        let batch = preprocess_batch(&images, model.config.resolution)?;
        let out = model.forward_with_taps(&batch)?;
        for &stage in stages {
            for (i, s) in chunk.iter().enumerate() {
                let (block, vector) = match stage {
                    StageId::Outcome => (None, out.embedding.row(i).to_vec()),
                    StageId::Stage(k) => {
                        let acts = &out.activations[k as usize - 1];
                        let block = Tensor::new(&acts.shape()[1..], acts.row(i).to_vec())?;
                        let vector = channel_max_pool(&block)?.into_data();
                        (store_blocks.then_some(block), vector)
                    }
                };
                records.push(AadRecord {
                    sample_id: s.sample_id,
                    stage,
                    membership: s.membership,
                    block,
                    vector,
                });
            }
        }
    }
    AadStore::new(model_hash, model.config.resolution as u32, records)
}

//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "ANATDA\0\x01"
//! 8 bytes   u64 header length H
//! H bytes   JSON header: architecture, seed record, epoch, Adam step and the
//!           ordered list of arrays {name, rows, cols}
//! ...       every array's values as f64, row-major, in header order
//! ```
//!
//! Loading and re-saving reproduces the file byte for byte.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdamState, ArchConfig, ModelParams, ParamId, NUM_PARAMS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ANATDA\0\x01";
const BUFFER_NAMES: [&str; 6] = [
    "norm1.running_mean",
    "norm1.running_var",
    "norm2.running_mean",
    "norm2.running_var",
    "norm3.running_mean",
    "norm3.running_var",
];

/// Student, teacher and optimizer state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Seed every random stream of the run is derived from.
    pub seed: u64,
    pub stage: Stage,
}

/// Which training loop produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Uda,
    Sfda,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    arch: ArchConfig,
    seed: u64,
    stage: Stage,
    epoch: usize,
    adam_step: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl ModelState {
    /// Fresh state: student and teacher from different seeds, zero moments.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let student = ModelParams::init(arch, seed);
        let teacher = ModelParams::init(arch, seed ^ 0x9e37_79b9_7f4a_7c15);
        let optimizer = AdamState::new(&student);
        ModelState {
            student,
            teacher,
            optimizer,
            epoch: 0,
            seed,
            stage: Stage::Source,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        self.student.arch
    }

    fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (prefix, model) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (id, p) in ParamId::ALL.iter().zip(&model.params) {
                out.push((format!("{prefix}.{}", id.name()), p));
            }
            for (name, b) in BUFFER_NAMES.iter().zip(&model.buffers) {
                out.push((format!("{prefix}.{name}"), b));
            }
        }
        for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for (id, p) in ParamId::ALL.iter().zip(moments) {
                out.push((format!("{prefix}.{}", id.name()), p));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let header = Header {
            format: "anatda-checkpoint".into(),
            arch: self.arch(),
            seed: self.seed,
            stage: self.stage,
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            arrays: arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = arrays.iter().map(|(_, a)| a.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != "anatda-checkpoint" {
            return Err(bad("unknown checkpoint format"));
        }

        let mut template = ModelState::init(header.arch, 0);
        template.seed = header.seed;
        template.stage = header.stage;
        template.epoch = header.epoch;
        template.optimizer.step = header.adam_step;
        let expected: Vec<(String, (usize, usize))> = template
            .arrays()
            .into_iter()
            .map(|(n, a)| (n, a.dim()))
            .collect();
        if expected.len() != header.arrays.len() {
            return Err(bad("array count does not match the architecture"));
        }
        let mut cursor = 16 + hlen;
        let mut values = Vec::with_capacity(expected.len());
        for ((name, dim), entry) in expected.iter().zip(&header.arrays) {
            if *name != entry.name || *dim != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "array {} ({}x{}) does not match expected {name} {dim:?}",
                    entry.name, entry.rows, entry.cols
                )));
            }
            let n = entry.rows * entry.cols;
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated payload"))?;
            cursor += 8 * n;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            values.push(Array2::from_shape_vec(*dim, data).expect("shape checked"));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }

        let mut it = values.into_iter();
        let mut take_model = |arch| {
            let params: Vec<_> = it.by_ref().take(NUM_PARAMS).collect();
            let buffers: Vec<_> = it.by_ref().take(6).collect();
            ModelParams {
                arch,
                params,
                buffers,
            }
        };
        let student = take_model(header.arch);
        let teacher = take_model(header.arch);
        let m: Vec<_> = it.by_ref().take(NUM_PARAMS).collect();
        let v: Vec<_> = it.by_ref().take(NUM_PARAMS).collect();
        student.check()?;
        teacher.check()?;
        Ok(ModelState {
            student,
            teacher,
            optimizer: AdamState {
                m,
                v,
                step: header.adam_step,
            },
            epoch: header.epoch,
            seed: header.seed,
            stage: header.stage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! `FXL1` label files: fixed-width rows of features and oracle labels.
//!
//! Header: magic, `u32` version, `u64` row count, `f64` threshold, and the
//! 32-byte SHA-256 of the trace the rows were computed from (56 bytes).
//! Each row holds five `u32` ids (sample, layer, head, step, archetype),
//! the 41 features, `bgt0`, `k`, the streaming flag and the measured minimum
//! budgets at `blk ∈ {1, 16, 32, 64, 128}`, all as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fluxattn_core::budget::LABEL_GRANULARITIES;
use fluxattn_core::features::{FeatureVector, FEATURE_DIM};
use fluxattn_core::pipeline::HeadRecord;
use fluxattn_core::predictor::{LabeledRow, Labels};
use fluxattn_core::workload::Archetype;

use crate::error::{IoError, IoResult};

pub const LABEL_MAGIC: [u8; 4] = *b"FXL1";
pub const LABEL_VERSION: u32 = 1;
pub const LABEL_HEADER_BYTES: usize = 4 + 4 + 8 + 8 + 32;
pub const ROW_FLOATS: usize = FEATURE_DIM + 3 + LABEL_GRANULARITIES.len();
pub const ROW_BYTES: usize = 5 * 4 + ROW_FLOATS * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRow {
    pub sample: u32,
    pub layer: u32,
    pub head: u32,
    pub step: u32,
    pub archetype: Archetype,
    pub features: [f32; FEATURE_DIM],
    pub bgt0: f32,
    pub slope: f32,
    pub streaming: bool,
    /// Minimum budgets in `LABEL_GRANULARITIES` order; NaN where unmeasured.
    pub budgets: [f32; LABEL_GRANULARITIES.len()],
}

impl StoredRow {
    pub fn from_record(rec: &HeadRecord, tau_index: usize) -> Self {
        let label = &rec.labels[tau_index];
        let mut features = [0f32; FEATURE_DIM];
        for (dst, src) in features.iter_mut().zip(rec.features.0) {
            *dst = src as f32;
        }
        let mut budgets = [f32::NAN; LABEL_GRANULARITIES.len()];
        for (dst, blk) in budgets.iter_mut().zip(LABEL_GRANULARITIES) {
            if let Some(b) = label.budget(blk) {
                *dst = b as f32;
            }
        }
        Self {
            sample: rec.sample as u32,
            layer: rec.layer as u32,
            head: rec.head as u32,
            step: rec.step as u32,
            archetype: rec.archetype,
            features,
            bgt0: label.props.bgt0 as f32,
            slope: label.props.slope as f32,
            streaming: label.props.streaming,
            budgets,
        }
    }

    /// Training row; values widen from the stored `f32`.
    pub fn labeled(&self) -> LabeledRow {
        let mut fv = [0f64; FEATURE_DIM];
        for (dst, src) in fv.iter_mut().zip(self.features) {
            *dst = f64::from(src);
        }
        LabeledRow {
            sample: self.sample,
            layer: self.layer,
            head: self.head,
            step: self.step,
            features: FeatureVector(fv),
            labels: Labels {
                bgt0: f64::from(self.bgt0),
                slope: f64::from(self.slope),
                streaming: self.streaming,
            },
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let ids = [self.sample, self.layer, self.head, self.step, u32::from(self.archetype.code())];
        for id in ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        let tail = [self.bgt0, self.slope, if self.streaming { 1.0 } else { 0.0 }];
        for x in self.features.iter().chain(&tail).chain(&self.budgets) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn decode(buf: &[u8]) -> IoResult<Self> {
        let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let float = |i: usize| f32::from_bits(word(5 + i));
        let code = word(4);
        let archetype = u8::try_from(code)
            .ok()
            .and_then(Archetype::from_code)
            .ok_or_else(|| corrupt(format!("unknown archetype code {code}")))?;
        let features = std::array::from_fn(|i| float(i));
        let flag = float(FEATURE_DIM + 2);
        if flag != 0.0 && flag != 1.0 {
            return Err(corrupt(format!("streaming flag {flag} is not 0 or 1")));
        }
        Ok(Self {
            sample: word(0),
            layer: word(1),
            head: word(2),
            step: word(3),
            archetype,
            features,
            bgt0: float(FEATURE_DIM),
            slope: float(FEATURE_DIM + 1),
            streaming: flag == 1.0,
            budgets: std::array::from_fn(|i| float(FEATURE_DIM + 3 + i)),
        })
    }
}

fn corrupt(reason: String) -> IoError {
    IoError::Corrupt {
        path: "label file".into(),
        reason,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub tau: f64,
    pub input_hash: [u8; 32],
    pub rows: Vec<StoredRow>,
}

impl LabelFile {
    pub fn labeled_rows(&self) -> Vec<LabeledRow> {
        self.rows.iter().map(StoredRow::labeled).collect()
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&LABEL_MAGIC)?;
        w.write_all(&LABEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&self.tau.to_le_bytes())?;
        w.write_all(&self.input_hash)?;
        let mut buf = Vec::with_capacity(ROW_BYTES);
        for r in &self.rows {
            buf.clear();
            r.encode(&mut buf);
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => IoError::MissingArtifact(path.to_path_buf()),
            _ => IoError::Io(e),
        })?;
        let len = file.metadata()?.len();
        let at = |reason: String| IoError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(file);
        let mut head = [0u8; LABEL_HEADER_BYTES];
        r.read_exact(&mut head).map_err(|_| at("shorter than the header".into()))?;
        if head[..4] != LABEL_MAGIC {
            return Err(at("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != LABEL_VERSION {
            return Err(IoError::VersionMismatch {
                what: "label file",
                expected: LABEL_VERSION,
                found: version,
            });
        }
        let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
        let tau = f64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        let input_hash: [u8; 32] = head[24..56].try_into().expect("32 bytes");
        let expected = LABEL_HEADER_BYTES as u64 + count.saturating_mul(ROW_BYTES as u64);
        if len != expected {
            return Err(at(format!("{len} bytes, header implies {expected}")));
        }
        let mut rows = Vec::with_capacity(count as usize);
        let mut buf = vec![0u8; ROW_BYTES];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            rows.push(StoredRow::decode(&buf).map_err(|e| match e {
                IoError::Corrupt { reason, .. } => at(reason),
                other => other,
            })?);
        }
        Ok(Self { tau, input_hash, rows })
    }
}

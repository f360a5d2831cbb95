//! `FXP1` model files.
//!
//! ```text
//! "FXP1"  u32 version  u32 n_widths  u32 widths[n_widths]
//! u64 n_params  f32 params[n_params]
//! u32 n_norms   (f64 mean, f64 std)[n_norms]
//! [u8; 32] SHA-256 of the label file the model was trained on
//! ```
//!
//! Parameters are stored as `f32`. Training already rounds them, so a saved
//! model reloads bit-identical.

use std::path::Path;

use fluxattn_core::features::FeatureNorms;
use fluxattn_core::predictor::PredictorModel;

use crate::error::{IoError, IoResult};

pub const MODEL_MAGIC: [u8; 4] = *b"FXP1";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &PredictorModel, input_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let widths = model.widths();
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let params = model.flat_params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.extend_from_slice(&(model.norms.dim() as u32).to_le_bytes());
    for (m, s) in model.norms.mean.iter().zip(&model.norms.std) {
        out.extend_from_slice(&m.to_le_bytes());
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(input_hash);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> IoResult<(PredictorModel, [u8; 32])> {
    let corrupt = |reason: String| IoError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).map_err(corrupt)? != MODEL_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = c.u32().map_err(corrupt)?;
    if version != MODEL_VERSION {
        return Err(IoError::VersionMismatch {
            what: "model file",
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let n = c.u32().map_err(corrupt)? as usize;
    if n > 64 {
        return Err(corrupt(format!("{n} layer widths")));
    }
    let widths = (0..n).map(|_| c.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>().map_err(corrupt)?;
    let count = c.u64().map_err(corrupt)? as usize;
    let raw = c.take(count.checked_mul(4).ok_or_else(|| corrupt("parameter count overflows".into()))?).map_err(corrupt)?;
    let params: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    let dim = c.u32().map_err(corrupt)? as usize;
    let (mut mean, mut std) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for _ in 0..dim {
        mean.push(c.f64().map_err(corrupt)?);
        std.push(c.f64().map_err(corrupt)?);
    }
    let hash: [u8; 32] = c.take(32).map_err(corrupt)?.try_into().expect("32 bytes");
    if c.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let model = PredictorModel::from_parts(&widths, &params, FeatureNorms::new(mean, std)?)?;
    if !model.all_finite() {
        return Err(corrupt("non-finite parameters".into()));
    }
    Ok((model, hash))
}

pub fn save_model(model: &PredictorModel, input_hash: &[u8; 32], path: &Path) -> IoResult<()> {
    std::fs::write(path, encode_model(model, input_hash))?;
    Ok(())
}

pub fn load_model(path: &Path) -> IoResult<(PredictorModel, [u8; 32])> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::MissingArtifact(path.to_path_buf()),
        _ => IoError::Io(e),
    })?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fluxattn_core::features::FEATURE_DIM;

    #[test]
    fn round_trip_is_bit_exact_after_rounding() {
        let mut m = PredictorModel::init(3);
        m.norms = FeatureNorms::new(vec![0.25; FEATURE_DIM], vec![2.0; FEATURE_DIM]).unwrap();
        m.round_to_f32();
        let bytes = encode_model(&m, &[1; 32]);
        let (back, hash) = decode_model(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(hash, [1; 32]);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let m = PredictorModel::zeros();
        let mut bytes = encode_model(&m, &[0; 32]);
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_model(short, Path::new("m")), Err(IoError::Corrupt { .. })));
        bytes[4] = 2;
        let err = decode_model(&bytes, Path::new("m")).unwrap_err();
        assert!(err.to_string().starts_with("version-mismatch"));
    }
}

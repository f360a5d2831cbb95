//! `FXT1` trace files: a generated workload as raw little-endian tensors.
//!
//! Layout (all integers `u32` LE, all tensors row-major `f32` LE):
//!
//! ```text
//! header   "FXT1" version samples layers heads group_size dim
//!          context_len sink_len local_len decode_steps needles      48 bytes
//! groups   for sample, for layer, for kv group (in that nesting):
//!            keys            context_len × dim
//!            values          context_len × dim
//!            decode keys     decode_steps × dim
//!            decode values   decode_steps × dim
//!            for each head of the group:
//!              archetype code
//!              needles × (start, len)       unused slots are (0, 0)
//!              anchor query  dim
//!              queries       decode_steps × dim
//! ```
//!
//! Every group record has the same size, so any layer can be read by seeking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use fluxattn_core::cache::SegmentedKvCache;
use fluxattn_core::tensor::Matrix;
use fluxattn_core::workload::{
    generate_layer, Archetype, GroupWorkload, HeadWorkload, LayerWorkload, NeedleSpan, WorkloadSpec,
};

use crate::error::{IoError, IoResult};

pub const TRACE_MAGIC: [u8; 4] = *b"FXT1";
pub const TRACE_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub samples: u32,
    pub layers: u32,
    pub heads: u32,
    pub group_size: u32,
    pub dim: u32,
    pub context_len: u32,
    pub sink_len: u32,
    pub local_len: u32,
    pub decode_steps: u32,
    pub needles: u32,
}

fn to_u32(x: usize, what: &str) -> IoResult<u32> {
    u32::try_from(x).map_err(|_| IoError::CorruptTrace(format!("{what} does not fit in u32")))
}

impl TraceHeader {
    pub fn from_spec(spec: &WorkloadSpec) -> IoResult<Self> {
        Ok(Self {
            samples: to_u32(spec.samples, "samples")?,
            layers: to_u32(spec.layers, "layers")?,
            heads: to_u32(spec.heads, "heads")?,
            group_size: to_u32(spec.group_size, "group size")?,
            dim: to_u32(spec.dim, "dim")?,
            context_len: to_u32(spec.context_len, "context length")?,
            sink_len: to_u32(spec.sink_len, "sink length")?,
            local_len: to_u32(spec.local_len, "local length")?,
            decode_steps: to_u32(spec.decode_steps, "decode steps")?,
            needles: to_u32(spec.needles, "needles")?,
        })
    }

    fn fields(&self) -> [u32; 10] {
        [
            self.samples,
            self.layers,
            self.heads,
            self.group_size,
            self.dim,
            self.context_len,
            self.sink_len,
            self.local_len,
            self.decode_steps,
            self.needles,
        ]
    }

    pub fn kv_groups(&self) -> u64 {
        u64::from(self.heads / self.group_size.max(1))
    }

    pub fn head_bytes(&self) -> u64 {
        let (d, s, n) = (u64::from(self.dim), u64::from(self.decode_steps), u64::from(self.needles));
        4 + 8 * n + 4 * d + 4 * s * d
    }

    pub fn group_bytes(&self) -> u64 {
        let (d, l, s) = (u64::from(self.dim), u64::from(self.context_len), u64::from(self.decode_steps));
        8 * l * d + 8 * s * d + u64::from(self.group_size) * self.head_bytes()
    }

    /// Byte offset of one group record.
    pub fn group_offset(&self, sample: u32, layer: u32, group: u32) -> u64 {
        let idx = (u64::from(sample) * u64::from(self.layers) + u64::from(layer)) * self.kv_groups() + u64::from(group);
        HEADER_BYTES + idx * self.group_bytes()
    }

    pub fn total_bytes(&self) -> u64 {
        self.group_offset(self.samples, 0, 0)
    }

    fn validate(&self) -> IoResult<()> {
        let bad = |m: &str| Err(IoError::CorruptTrace(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.group_size == 0 || self.heads % self.group_size != 0 {
            return bad("inconsistent head dimensions");
        }
        if self.context_len <= self.sink_len + self.local_len {
            return bad("context shorter than sink plus local window");
        }
        Ok(())
    }
}

fn put_f32s(w: &mut impl Write, xs: &[f32]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_u32(w: &mut impl Write, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_group(w: &mut impl Write, h: &TraceHeader, g: &GroupWorkload) -> IoResult<()> {
    let full = g.cache.full();
    put_f32s(w, full.keys.as_slice())?;
    put_f32s(w, full.values.as_slice())?;
    for (k, _) in &g.decode_kv {
        put_f32s(w, k)?;
    }
    for (_, v) in &g.decode_kv {
        put_f32s(w, v)?;
    }
    for head in &g.heads {
        put_u32(w, u32::from(head.archetype.code()))?;
        for i in 0..h.needles as usize {
            let span = head.needles.get(i).copied().unwrap_or(NeedleSpan { start: 0, len: 0 });
            put_u32(w, to_u32(span.start, "needle start")?)?;
            put_u32(w, to_u32(span.len, "needle length")?)?;
        }
        put_f32s(w, &head.anchor)?;
        for q in &head.queries {
            put_f32s(w, q)?;
        }
    }
    Ok(())
}

/// Writes a header followed by layers in `(sample, layer)` order.
pub fn write_layers(
    path: &Path,
    header: &TraceHeader,
    layers: impl IntoIterator<Item = IoResult<LayerWorkload>>,
) -> IoResult<()> {
    header.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TRACE_MAGIC)?;
    put_u32(&mut w, TRACE_VERSION)?;
    for f in header.fields() {
        put_u32(&mut w, f)?;
    }
    let mut count = 0u64;
    for lw in layers {
        for g in &lw?.groups {
            write_group(&mut w, header, g)?;
            count += 1;
        }
    }
    let expected = u64::from(header.samples) * u64::from(header.layers) * header.kv_groups();
    if count != expected {
        return Err(IoError::CorruptTrace(format!("wrote {count} groups, header promises {expected}")));
    }
    w.flush()?;
    Ok(())
}

/// Generates `spec` layer by layer and writes it to `path`.
pub fn export_trace(spec: &WorkloadSpec, path: &Path) -> IoResult<TraceHeader> {
    let header = TraceHeader::from_spec(spec)?;
    let cells = (0..spec.samples).flat_map(|s| (0..spec.layers).map(move |l| (s, l)));
    write_layers(path, &header, cells.map(|(s, l)| generate_layer(spec, s, l).map_err(IoError::from)))?;
    Ok(header)
}

/// Random access to the layers of a trace file.
pub struct TraceReader {
    file: BufReader<File>,
    header: TraceHeader,
}

impl TraceReader {
    pub fn open(path: &Path) -> IoResult<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => IoError::MissingArtifact(path.to_path_buf()),
            _ => IoError::Io(e),
        })?;
        let len = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let mut head = [0u8; HEADER_BYTES as usize];
        file.read_exact(&mut head)
            .map_err(|_| IoError::CorruptTrace("file shorter than the header".into()))?;
        if head[..4] != TRACE_MAGIC {
            return Err(IoError::CorruptTrace("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != TRACE_VERSION {
            return Err(IoError::VersionMismatch {
                what: "trace",
                expected: TRACE_VERSION,
                found: word(0),
            });
        }
        let header = TraceHeader {
            samples: word(1),
            layers: word(2),
            heads: word(3),
            group_size: word(4),
            dim: word(5),
            context_len: word(6),
            sink_len: word(7),
            local_len: word(8),
            decode_steps: word(9),
            needles: word(10),
        };
        header.validate()?;
        if len != header.total_bytes() {
            return Err(IoError::CorruptTrace(format!(
                "file has {len} bytes, header implies {}",
                header.total_bytes()
            )));
        }
        Ok(Self { file, header })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn f32s(&mut self, n: usize) -> IoResult<Vec<f32>> {
        let mut buf = vec![0u8; 4 * n];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| IoError::CorruptTrace("unexpected end of tensor data".into()))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn u32(&mut self) -> IoResult<u32> {
        let mut b = [0u8; 4];
        self.file
            .read_exact(&mut b)
            .map_err(|_| IoError::CorruptTrace("unexpected end of head record".into()))?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_layer(&mut self, sample: u32, layer: u32) -> IoResult<LayerWorkload> {
        let h = self.header;
        if sample >= h.samples || layer >= h.layers {
            return Err(IoError::CorruptTrace(format!("no layer ({sample}, {layer}) in trace")));
        }
        let (d, l, s) = (h.dim as usize, h.context_len as usize, h.decode_steps as usize);
        let mut groups = Vec::with_capacity(h.kv_groups() as usize);
        for g in 0..h.kv_groups() as u32 {
            self.file.seek(SeekFrom::Start(h.group_offset(sample, layer, g)))?;
            let keys = Matrix::new(l, d, self.f32s(l * d)?)?;
            let values = Matrix::new(l, d, self.f32s(l * d)?)?;
            let cache = SegmentedKvCache::split(keys, values, h.sink_len as usize, h.local_len as usize)?;
            let dk = self.f32s(s * d)?;
            let dv = self.f32s(s * d)?;
            let decode_kv = dk
                .chunks_exact(d)
                .zip(dv.chunks_exact(d))
                .map(|(k, v)| (k.to_vec(), v.to_vec()))
                .collect();
            let mut heads = Vec::with_capacity(h.group_size as usize);
            for i in 0..h.group_size {
                let code = self.u32()?;
                let archetype = u8::try_from(code)
                    .ok()
                    .and_then(Archetype::from_code)
                    .ok_or_else(|| IoError::CorruptTrace(format!("unknown archetype code {code}")))?;
                let mut needles = Vec::new();
                for _ in 0..h.needles {
                    let (start, len) = (self.u32()? as usize, self.u32()? as usize);
                    if len > 0 {
                        needles.push(NeedleSpan { start, len });
                    }
                }
                let anchor = self.f32s(d)?;
                let queries = self.f32s(s * d)?.chunks_exact(d).map(<[f32]>::to_vec).collect();
                heads.push(HeadWorkload {
                    head: (g * h.group_size + i) as usize,
                    archetype,
                    needles,
                    anchor,
                    queries,
                });
            }
            groups.push(GroupWorkload {
                group: g as usize,
                cache,
                decode_kv,
                heads,
            });
        }
        Ok(LayerWorkload {
            sample: sample as usize,
            layer: layer as usize,
            groups,
        })
    }
}

/// Reads every layer of a trace, in `(sample, layer)` order.
pub fn import_trace(path: &Path) -> IoResult<(TraceHeader, Vec<LayerWorkload>)> {
    let mut r = TraceReader::open(path)?;
    let h = *r.header();
    let mut out = Vec::new();
    for s in 0..h.samples {
        for l in 0..h.layers {
            out.push(r.read_layer(s, l)?);
        }
    }
    Ok((h, out))
}

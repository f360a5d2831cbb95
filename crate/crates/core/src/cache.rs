//! KV cache split into the four position-ordered segments of a hybrid
//! deployment: sink and local tokens (plus tokens generated during decode)
//! stay on the accelerator, the middle span is offloaded to host memory.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Segment {
    Sink,
    Cpu,
    Local,
    New,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Sink, Segment::Cpu, Segment::Local, Segment::New];
    /// Segments that never leave the accelerator.
    pub const GPU: [Segment; 3] = [Segment::Sink, Segment::Local, Segment::New];
}

/// Keys and values of one segment, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSegment {
    pub keys: Matrix,
    pub values: Matrix,
}

impl KvSegment {
    pub fn new(keys: Matrix, values: Matrix) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(Error::Shape {
                what: "value rows",
                expected: keys.rows(),
                found: values.rows(),
            });
        }
        if keys.cols() != values.cols() {
            return Err(Error::Shape {
                what: "value width",
                expected: keys.cols(),
                found: values.cols(),
            });
        }
        Ok(Self { keys, values })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            keys: Matrix::empty(dim),
            values: Matrix::empty(dim),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// Read access to a segmented cache.
///
/// Feature extraction is written against this trait so tests can wrap a
/// cache and count every tensor read of the host-resident segment.
pub trait KvSource {
    fn dim(&self) -> usize;
    /// Token count of a segment. Not a tensor read.
    fn segment_len(&self, seg: Segment) -> usize;
    fn segment(&self, seg: Segment) -> &KvSegment;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKvCache {
    dim: usize,
    sink: KvSegment,
    cpu: KvSegment,
    local: KvSegment,
    new: KvSegment,
}

impl SegmentedKvCache {
    pub fn from_segments(
        sink: KvSegment,
        cpu: KvSegment,
        local: KvSegment,
        new: KvSegment,
    ) -> Result<Self> {
        let dim = sink.keys.cols();
        for s in [&cpu, &local, &new] {
            if s.keys.cols() != dim {
                return Err(Error::Shape {
                    what: "segment width",
                    expected: dim,
                    found: s.keys.cols(),
                });
            }
        }
        if dim == 0 {
            return Err(Error::Shape {
                what: "head dimension",
                expected: 1,
                found: 0,
            });
        }
        Ok(Self {
            dim,
            sink,
            cpu,
            local,
            new,
        })
    }

    /// Splits a prefill cache of `L` tokens into `sink | cpu | local`.
    ///
    /// Short contexts shrink the local window first and then the cpu span,
    /// so `L ≤ sink_len + local_len` leaves nothing offloaded.
    pub fn split(keys: Matrix, values: Matrix, sink_len: usize, local_len: usize) -> Result<Self> {
        let all = KvSegment::new(keys, values)?;
        let len = all.len();
        let sink = sink_len.min(len);
        let local = local_len.min(len - sink);
        let cpu_end = len - local;
        let part = |r: core::ops::Range<usize>| KvSegment {
            keys: all.keys.slice_rows(r.clone()),
            values: all.values.slice_rows(r),
        };
        Self::from_segments(
            part(0..sink),
            part(sink..cpu_end),
            part(cpu_end..len),
            KvSegment::empty(all.keys.cols()),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segment(&self, seg: Segment) -> &KvSegment {
        match seg {
            Segment::Sink => &self.sink,
            Segment::Cpu => &self.cpu,
            Segment::Local => &self.local,
            Segment::New => &self.new,
        }
    }

    pub fn len(&self, seg: Segment) -> usize {
        self.segment(seg).len()
    }

    pub fn cpu_len(&self) -> usize {
        self.cpu.len()
    }

    /// `L_sink + L_local + L_new`.
    pub fn gpu_len(&self) -> usize {
        self.sink.len() + self.local.len() + self.new.len()
    }

    pub fn total_len(&self) -> usize {
        self.gpu_len() + self.cpu.len()
    }

    /// Appends a generated token to the accelerator-resident `new` segment.
    pub fn push_new(&mut self, key: &[f32], value: &[f32]) -> Result<()> {
        self.new.keys.push_row(key)?;
        self.new.values.push_row(value)
    }

    /// All tokens concatenated in position order.
    pub fn full(&self) -> KvSegment {
        let order = [&self.sink, &self.cpu, &self.local, &self.new];
        let keys = order.iter().map(|s| &s.keys).collect::<alloc::vec::Vec<_>>();
        let values = order.iter().map(|s| &s.values).collect::<alloc::vec::Vec<_>>();
        KvSegment {
            keys: Matrix::vstack(self.dim, &keys).expect("segment widths checked on construction"),
            values: Matrix::vstack(self.dim, &values).expect("segment widths checked on construction"),
        }
    }
}

impl KvSource for SegmentedKvCache {
    fn dim(&self) -> usize {
        self.dim
    }

    fn segment_len(&self, seg: Segment) -> usize {
        self.len(seg)
    }

    fn segment(&self, seg: Segment) -> &KvSegment {
        SegmentedKvCache::segment(self, seg)
    }
}

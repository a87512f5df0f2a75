//! Flat storage of per-segment next-token log-probabilities.
//!
//! The conceptual `(N-1) x c_max x |V|` table is never materialized. Every
//! segment `(s, L)` of the plan owns `L` consecutive rows; row `i` (1-based)
//! is the prediction for position `n = s + i - 1` under context length
//! `c = i`. A lookup of cell `(n, c)` therefore resolves to segment start
//! `s = n - c + 1` and in-segment offset `c - 1`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::scheduler::{plan_segments, Segment, SegmentPlan};
use crate::types::StoreDtype;

pub const STORE_MAGIC: &[u8; 4] = b"CLPS";
pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("position n={n} is outside 1..={max}")]
    PositionOutOfRange { n: usize, max: usize },
    #[error("context length must be at least 1")]
    EmptyContext,
    #[error("cell (n={n}, c={c}) is not covered by a stride-{stride} store")]
    NotCovered { n: usize, c: usize, stride: usize },
    #[error("row of length {got} written to a store with vocabulary size {expected}")]
    RowLength { got: usize, expected: usize },
    #[error("segment {segment} expects {expected} rows, got {got}")]
    RowCount {
        segment: usize,
        got: usize,
        expected: usize,
    },
    #[error("not a prediction store file (bad magic)")]
    BadMagic,
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("corrupt store header: {0}")]
    CorruptHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F16(Vec<f16>),
    F64(Vec<f64>),
}

impl Payload {
    fn zeros(dtype: StoreDtype, len: usize) -> Self {
        match dtype {
            StoreDtype::F32 => Payload::F32(vec![0.0; len]),
            StoreDtype::F16 => Payload::F16(vec![f16::ZERO; len]),
            StoreDtype::F64 => Payload::F64(vec![0.0; len]),
        }
    }

    fn dtype(&self) -> StoreDtype {
        match self {
            Payload::F32(_) => StoreDtype::F32,
            Payload::F16(_) => StoreDtype::F16,
            Payload::F64(_) => StoreDtype::F64,
        }
    }

    fn read_into(&self, start: usize, out: &mut [f64]) {
        let end = start + out.len();
        match self {
            Payload::F32(v) => out.iter_mut().zip(&v[start..end]).for_each(|(o, x)| *o = *x as f64),
            Payload::F16(v) => out.iter_mut().zip(&v[start..end]).for_each(|(o, x)| *o = x.to_f64()),
            Payload::F64(v) => out.copy_from_slice(&v[start..end]),
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Payload::F32(v) => v[i] as f64,
            Payload::F16(v) => v[i].to_f64(),
            Payload::F64(v) => v[i],
        }
    }
}

/// Finalized, immutable prediction store.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStore {
    plan: SegmentPlan,
    vocab_size: usize,
    /// First row of each segment.
    segment_offsets: Vec<usize>,
    payload: Payload,
}

fn row_offsets(plan: &SegmentPlan) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(plan.entries().len());
    let mut total = 0;
    for seg in plan.entries() {
        offsets.push(total);
        total += seg.len;
    }
    (offsets, total)
}

impl PredictionStore {
    pub fn builder(plan: SegmentPlan, vocab_size: usize, dtype: StoreDtype) -> StoreBuilder {
        let (segment_offsets, rows) = row_offsets(&plan);
        StoreBuilder {
            payload: Payload::zeros(dtype, rows * vocab_size),
            plan,
            vocab_size,
            segment_offsets,
        }
    }

    pub fn plan(&self) -> &SegmentPlan {
        &self.plan
    }

    /// Document length `N`.
    pub fn doc_len(&self) -> usize {
        self.plan.doc_len()
    }

    pub fn c_max(&self) -> usize {
        self.plan.c_max()
    }

    pub fn stride(&self) -> usize {
        self.plan.stride()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> StoreDtype {
        self.payload.dtype()
    }

    pub fn row_count(&self) -> usize {
        self.plan.row_count()
    }

    pub fn segment_offsets(&self) -> &[usize] {
        &self.segment_offsets
    }

    /// Largest context length available for position `n`.
    pub fn c_eff(&self, n: usize) -> usize {
        n.min(self.c_max())
    }

    pub fn is_covered(&self, n: usize, c: usize) -> bool {
        self.plan.covers(n, c)
    }

    /// Largest covered context length `<= c_eff(n)`. Equal to `c_eff(n)` for
    /// stride 1.
    pub fn reference_context(&self, n: usize) -> usize {
        let ce = self.c_eff(n);
        // (n - c) mod stride == 0  <=>  c = n - j*stride
        let k = self.stride();
        let excess = (n - ce) % k;
        if excess == 0 {
            ce
        } else {
            ce - (k - excess)
        }
    }

    /// Covered context lengths for position `n`, ascending.
    pub fn covered_contexts(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let k = self.stride();
        let ce = self.c_eff(n);
        let first = (n - 1) % k + 1;
        (first..=ce).step_by(k)
    }

    /// Resolve a request to a covered cell, clamping `c` to the available
    /// context.
    pub fn resolve(&self, n: usize, c: usize) -> Result<(usize, usize), StoreError> {
        let max = self.doc_len() - 1;
        if n < 1 || n > max {
            return Err(StoreError::PositionOutOfRange { n, max });
        }
        if c < 1 {
            return Err(StoreError::EmptyContext);
        }
        let c = c.min(n).min(self.c_max());
        if !(n - c).is_multiple_of(self.stride()) {
            return Err(StoreError::NotCovered {
                n,
                c,
                stride: self.stride(),
            });
        }
        Ok((n, c))
    }

    /// Index of the segment holding cell `(n, c)` and the cell's row offset
    /// in the payload. The cell must be covered.
    pub fn locate(&self, n: usize, c: usize) -> Result<(usize, usize), StoreError> {
        let (n, c) = self.resolve(n, c)?;
        let start = n - c + 1;
        let segment = (start - 1) / self.stride();
        Ok((segment, self.segment_offsets[segment] + c - 1))
    }

    /// The stored log-distribution for `(n, min(c, n, c_max))`.
    pub fn cell_lookup(&self, n: usize, c: usize) -> Result<Vec<f64>, StoreError> {
        let mut out = vec![0.0; self.vocab_size];
        self.cell_into(n, c, &mut out)?;
        Ok(out)
    }

    pub fn cell_into(&self, n: usize, c: usize, out: &mut [f64]) -> Result<(), StoreError> {
        if out.len() != self.vocab_size {
            return Err(StoreError::RowLength {
                got: out.len(),
                expected: self.vocab_size,
            });
        }
        let (_, row) = self.locate(n, c)?;
        self.payload.read_into(row * self.vocab_size, out);
        Ok(())
    }

    /// Single log-probability of token `id` in cell `(n, c)`.
    pub fn cell_value(&self, n: usize, c: usize, id: usize) -> Result<f64, StoreError> {
        let (_, row) = self.locate(n, c)?;
        Ok(self.payload.get(row * self.vocab_size + id))
    }

    /// Raw row by payload row index, dequantized.
    pub fn row(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        self.payload.read_into(row * self.vocab_size, &mut out);
        out
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), StoreError> {
        let mut w = BufWriter::new(w);
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_FORMAT_VERSION.to_le_bytes())?;
        for v in [self.doc_len(), self.c_max(), self.stride(), self.vocab_size] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.dtype().code().to_le_bytes())?;
        w.write_all(&(self.plan.entries().len() as u64).to_le_bytes())?;
        for seg in self.plan.entries() {
            w.write_all(&(seg.start as u64).to_le_bytes())?;
            w.write_all(&(seg.len as u64).to_le_bytes())?;
        }
        match &self.payload {
            Payload::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            Payload::F16(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            Payload::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, StoreError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != STORE_FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let n = read_usize(&mut r)?;
        let c_max = read_usize(&mut r)?;
        let stride = read_usize(&mut r)?;
        let vocab_size = read_usize(&mut r)?;
        let code = read_u32(&mut r)?;
        let dtype = StoreDtype::from_code(code).ok_or(StoreError::UnknownDtype(code))?;
        let plan = plan_segments(n, c_max, stride).map_err(|e| StoreError::CorruptHeader(e.to_string()))?;
        let count = read_usize(&mut r)?;
        if count != plan.entries().len() {
            return Err(StoreError::CorruptHeader(format!(
                "segment table has {count} entries, plan has {}",
                plan.entries().len()
            )));
        }
        for (i, seg) in plan.entries().iter().enumerate() {
            let start = read_usize(&mut r)?;
            let len = read_usize(&mut r)?;
            if start != seg.start || len != seg.len {
                return Err(StoreError::CorruptHeader(format!(
                    "segment {i} is ({start}, {len}), expected ({}, {})",
                    seg.start, seg.len
                )));
            }
        }
        let (segment_offsets, rows) = row_offsets(&plan);
        let len = rows
            .checked_mul(vocab_size)
            .ok_or_else(|| StoreError::CorruptHeader("payload size overflows".into()))?;
        let mut bytes = vec![0u8; len * dtype.size_bytes()];
        r.read_exact(&mut bytes)?;
        let payload = match dtype {
            StoreDtype::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            StoreDtype::F16 => Payload::F16(
                bytes
                    .chunks_exact(2)
                    .map(|b| f16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            StoreDtype::F64 => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(StoreError::CorruptHeader("trailing bytes after payload".into()));
        }
        Ok(Self {
            plan,
            vocab_size,
            segment_offsets,
            payload,
        })
    }

    /// Write atomically: a temp file in the destination directory is renamed
    /// into place only once fully written.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        self.write_to(tmp.as_file_mut())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::read_from(File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize, StoreError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| StoreError::CorruptHeader("value exceeds address space".into()))
}

/// Mutable store under construction.
#[derive(Debug)]
pub struct StoreBuilder {
    plan: SegmentPlan,
    vocab_size: usize,
    segment_offsets: Vec<usize>,
    payload: Payload,
}

impl StoreBuilder {
    /// One writer per plan segment. Writers borrow disjoint payload regions
    /// and can be moved to different threads.
    pub fn segment_writers(&mut self) -> Vec<SegmentWriter<'_>> {
        let v = self.vocab_size;
        let segs = self.plan.entries();
        macro_rules! split {
            ($data:expr, $variant:ident) => {{
                let mut rest: &mut [_] = $data.as_mut_slice();
                let mut out = Vec::with_capacity(segs.len());
                for (index, seg) in segs.iter().enumerate() {
                    let (head, tail) = std::mem::take(&mut rest).split_at_mut(seg.len * v);
                    rest = tail;
                    out.push(SegmentWriter {
                        index,
                        segment: *seg,
                        vocab_size: v,
                        rows: RowSink::$variant(head),
                    });
                }
                out
            }};
        }
        match &mut self.payload {
            Payload::F32(d) => split!(d, F32),
            Payload::F16(d) => split!(d, F16),
            Payload::F64(d) => split!(d, F64),
        }
    }

    pub fn finalize(self) -> PredictionStore {
        PredictionStore {
            plan: self.plan,
            vocab_size: self.vocab_size,
            segment_offsets: self.segment_offsets,
            payload: self.payload,
        }
    }
}

#[derive(Debug)]
enum RowSink<'a> {
    F32(&'a mut [f32]),
    F16(&'a mut [f16]),
    F64(&'a mut [f64]),
}

/// Exclusive write access to the rows of one segment.
#[derive(Debug)]
pub struct SegmentWriter<'a> {
    pub index: usize,
    pub segment: Segment,
    vocab_size: usize,
    rows: RowSink<'a>,
}

impl SegmentWriter<'_> {
    /// Store the segment's rows, given flat as `len * |V|` log-probabilities.
    pub fn write(&mut self, flat: &[f64]) -> Result<(), StoreError> {
        let expected = self.segment.len * self.vocab_size;
        if flat.len() != expected {
            return Err(StoreError::RowCount {
                segment: self.index,
                got: flat.len() / self.vocab_size.max(1),
                expected: self.segment.len,
            });
        }
        match &mut self.rows {
            RowSink::F64(out) => out.copy_from_slice(flat),
            RowSink::F32(out) => out.iter_mut().zip(flat).for_each(|(o, x)| *o = *x as f32),
            RowSink::F16(out) => {
                for (o, x) in out
                    .chunks_exact_mut(self.vocab_size)
                    .zip(flat.chunks_exact(self.vocab_size))
                {
                    quantize_row_f16(x, o);
                }
            }
        }
        Ok(())
    }
}

fn f16_step(q: f16, toward_larger: bool) -> f16 {
    let bits = q.to_bits();
    let neg = bits & 0x8000 != 0;
    let mag = bits & 0x7fff;
    let new = match (neg, toward_larger) {
        (true, true) if mag == 0 => 0x0001,
        (true, true) => bits - 1,
        (true, false) => bits + 1,
        (false, true) => bits + 1,
        (false, false) if mag == 0 => 0x8001,
        (false, false) => bits - 1,
    };
    f16::from_bits(new)
}

/// Quantize a log-distribution to half precision, choosing the rounding
/// direction of each entry so the exp-sum of the stored row stays close to 1.
///
/// Every entry is one of the two half-precision neighbours of its input, so
/// an already-quantized row is left unchanged.
pub fn quantize_row_f16(row: &[f64], out: &mut [f16]) {
    struct Choice {
        idx: usize,
        p: f64,
        lo: f16,
        hi: f16,
        p_lo: f64,
        p_hi: f64,
    }
    let mut choices = Vec::with_capacity(row.len());
    for (idx, &x) in row.iter().enumerate() {
        let q = f16::from_f64(x);
        let qv = q.to_f64();
        if !x.is_finite() || !qv.is_finite() || qv == x {
            out[idx] = q;
            continue;
        }
        let (lo, hi) = if qv < x {
            (q, f16_step(q, true))
        } else {
            (f16_step(q, false), q)
        };
        if !lo.to_f64().is_finite() || !hi.to_f64().is_finite() {
            out[idx] = q;
            continue;
        }
        choices.push(Choice {
            idx,
            p: x.exp(),
            lo,
            hi,
            p_lo: lo.to_f64().exp(),
            p_hi: hi.to_f64().exp(),
        });
    }
    choices.sort_by(|a, b| (b.p_hi - b.p_lo).total_cmp(&(a.p_hi - a.p_lo)).then(a.idx.cmp(&b.idx)));
    let mut err = 0.0f64;
    for ch in &choices {
        let e_lo = err + ch.p_lo - ch.p;
        let e_hi = err + ch.p_hi - ch.p;
        if e_lo.abs() <= e_hi.abs() {
            out[ch.idx] = ch.lo;
            err = e_lo;
        } else {
            out[ch.idx] = ch.hi;
            err = e_hi;
        }
    }
}

/// `|sum_i exp(row_i) - 1|`.
pub fn exp_sum_error(row: &[f64]) -> f64 {
    (row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs()
}

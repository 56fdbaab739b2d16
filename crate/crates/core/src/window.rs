//! Gradient ring buffers and their two kernels.
//!
//! `sp` computes the scalar products `G·x` of every stored row with a dense
//! vector. `lcg` computes the linear combination `Gᵀc` of stored rows. The
//! sparse window keeps each row as `(indices, values)` with the same
//! per-block quotas in every row, so `lcg` can accumulate one block of
//! coordinates at a time into a private buffer and write it out without
//! contention.
//!
//! Both kernels are data-parallel under rayon, and every output element is
//! reduced in a fixed order, so results are bit-identical for any pool size.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::compress::{BlockLayout, Compressed, Densify, Precision, SparseCompressed};
use crate::error::{check_dim, EfcpError, Result};

/// Where a pushed row landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInsert {
    /// Physical row that now holds the new gradient.
    pub row: usize,
    /// Whether an older gradient was overwritten.
    pub evicted: bool,
}

/// Ring cursor shared by all window kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingCursor {
    capacity: usize,
    next: usize,
    filled: usize,
}

impl RingCursor {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EfcpError::Parameter {
                name: "m",
                reason: "window size must be at least 1".into(),
            });
        }
        Ok(Self {
            capacity,
            next: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_row(&self) -> usize {
        self.next
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_occupied(&self, row: usize) -> bool {
        row < self.filled
    }

    /// Claims the next physical row.
    pub fn advance(&mut self) -> RowInsert {
        let row = self.next;
        let evicted = self.filled == self.capacity;
        self.next = (self.next + 1) % self.capacity;
        self.filled = (self.filled + 1).min(self.capacity);
        RowInsert { row, evicted }
    }

    /// Occupied physical rows from oldest to newest.
    pub fn age_order(&self) -> Vec<usize> {
        if self.filled < self.capacity {
            (0..self.filled).collect()
        } else {
            (self.next..self.capacity).chain(0..self.next).collect()
        }
    }
}

/// Storage interface the preconditioners need from a gradient window.
///
/// Vectors indexed by row (`sp` output, `lcg` coefficients) use physical
/// row numbers; [`GradientWindow::age_order`] maps logical age to them.
pub trait GradientWindow: Send + Sync {
    fn capacity(&self) -> usize;
    fn dim(&self) -> usize;
    fn filled(&self) -> usize;
    fn age_order(&self) -> Vec<usize>;
    fn push(&mut self, c: &Compressed) -> Result<RowInsert>;
    /// `ω_r = ⟨g_r, x⟩` for occupied rows, zero elsewhere.
    fn sp(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `Σ_r c_r g_r` over occupied rows.
    fn lcg(&self, coeffs: &[f64]) -> Result<Vec<f64>>;
    /// Occupied rows expanded to dense vectors, oldest first.
    fn dense_rows(&self) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
enum ValueBuffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ValueBuffer {
    fn zeros(precision: Precision, len: usize) -> Self {
        match precision {
            Precision::F32 => ValueBuffer::F32(vec![0.0; len]),
            Precision::F64 => ValueBuffer::F64(vec![0.0; len]),
        }
    }

    fn precision(&self) -> Precision {
        match self {
            ValueBuffer::F32(_) => Precision::F32,
            ValueBuffer::F64(_) => Precision::F64,
        }
    }

    #[inline]
    fn get(&self, i: usize) -> f64 {
        match self {
            ValueBuffer::F32(v) => v[i] as f64,
            ValueBuffer::F64(v) => v[i],
        }
    }

    fn write(&mut self, start: usize, values: &[f64]) {
        match self {
            ValueBuffer::F32(v) => v[start..start + values.len()]
                .iter_mut()
                .zip(values)
                .for_each(|(d, s)| *d = *s as f32),
            ValueBuffer::F64(v) => v[start..start + values.len()].copy_from_slice(values),
        }
    }
}

/// Sparse ring buffer `G = (I, V)` of blockwise Top-k rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradWindow {
    layout: BlockLayout,
    density: f64,
    cursor: RingCursor,
    indices: Vec<u32>,
    values: ValueBuffer,
}

impl SparseGradWindow {
    pub fn new(
        capacity: usize,
        dim: usize,
        block_size: usize,
        density: f64,
        precision: Precision,
    ) -> Result<Self> {
        let layout = BlockLayout::new(dim, block_size, density)?;
        if dim > u32::MAX as usize {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "indices are 32-bit; d must be below 2^32".into(),
            });
        }
        let cursor = RingCursor::new(capacity)?;
        let len = capacity * layout.row_len();
        Ok(Self {
            layout,
            density,
            cursor,
            indices: vec![0; len],
            values: ValueBuffer::zeros(precision, len),
        })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn precision(&self) -> Precision {
        self.values.precision()
    }

    pub fn cursor(&self) -> RingCursor {
        self.cursor
    }

    /// Entries per row (`k'`).
    pub fn row_len(&self) -> usize {
        self.layout.row_len()
    }

    /// Writes `c` over the oldest row (or the next empty one).
    pub fn set_row(&mut self, c: &SparseCompressed) -> Result<RowInsert> {
        self.layout.validate(c)?;
        let insert = self.cursor.advance();
        let k = self.row_len();
        let start = insert.row * k;
        self.indices[start..start + k].copy_from_slice(&c.indices);
        self.values.write(start, &c.values);
        Ok(insert)
    }

    /// Indices and values of physical row `r` (values widened to f64).
    pub fn row(&self, r: usize) -> (Vec<u32>, Vec<f64>) {
        let k = self.row_len();
        let idx = self.indices[r * k..(r + 1) * k].to_vec();
        let vals = (r * k..(r + 1) * k).map(|i| self.values.get(i)).collect();
        (idx, vals)
    }

    /// Byte footprint of indices, values, error feedback and the two result
    /// buffers: `4·m·k' + value_bytes·m·k' + 4d + 4m + 4d`.
    pub fn memory_bytes(&self, value_bytes: usize) -> u64 {
        crate::memory::sparse_mfac_bytes(
            self.capacity() as u64,
            self.dim() as u64,
            self.row_len() as u64,
            value_bytes as u64,
        )
    }

    /// Serializes `(I, V, cursor)` in the little-endian `EFCPGW1` format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            self.capacity() as u64,
            self.dim() as u64,
            self.row_len() as u64,
            self.layout.block_size() as u64,
            self.cursor.next as u64,
            self.cursor.filled as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[self.precision().value_bytes() as u8])?;
        out.write_all(&self.density.to_le_bytes())?;
        for i in &self.indices {
            out.write_all(&i.to_le_bytes())?;
        }
        match &self.values {
            ValueBuffer::F32(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            ValueBuffer::F64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EfcpError::Format("bad magic".into()));
        }
        let mut header = [0u64; 6];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [m, d, k, block, next, filled] = header.map(|v| v as usize);
        let mut vb = [0u8; 1];
        input.read_exact(&mut vb)?;
        let precision = match vb[0] {
            4 => Precision::F32,
            8 => Precision::F64,
            other => {
                return Err(EfcpError::Format(format!(
                    "unsupported value width {other}"
                )))
            }
        };
        let mut db = [0u8; 8];
        input.read_exact(&mut db)?;
        let density = f64::from_le_bytes(db);

        let mut w = Self::new(m, d, block, density, precision)?;
        if w.row_len() != k {
            return Err(EfcpError::Format(format!(
                "row length {k} does not match layout ({})",
                w.row_len()
            )));
        }
        if filled > m || next >= m || (filled < m && next != filled) {
            return Err(EfcpError::Format(format!(
                "inconsistent cursor next={next} filled={filled} m={m}"
            )));
        }
        w.cursor.next = next;
        w.cursor.filled = filled;
        for i in w.indices.iter_mut() {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *i = u32::from_le_bytes(b);
        }
        match &mut w.values {
            ValueBuffer::F32(v) => {
                for x in v.iter_mut() {
                    let mut b = [0u8; 4];
                    input.read_exact(&mut b)?;
                    *x = f32::from_le_bytes(b);
                }
            }
            ValueBuffer::F64(v) => {
                for x in v.iter_mut() {
                    let mut b = [0u8; 8];
                    input.read_exact(&mut b)?;
                    *x = f64::from_le_bytes(b);
                }
            }
        }
        Ok(w)
    }
}

const CHECKPOINT_MAGIC: &[u8; 7] = b"EFCPGW1";

impl GradientWindow for SparseGradWindow {
    fn capacity(&self) -> usize {
        self.cursor.capacity()
    }

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn filled(&self) -> usize {
        self.cursor.filled()
    }

    fn age_order(&self) -> Vec<usize> {
        self.cursor.age_order()
    }

    fn push(&mut self, c: &Compressed) -> Result<RowInsert> {
        match c {
            Compressed::Sparse(s) => self.set_row(s),
            Compressed::Dense(_) => Err(EfcpError::BlockStructure(
                "sparse window requires a Top-k compressed row".into(),
            )),
        }
    }

    fn sp(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("sp", self.dim(), x.len())?;
        let k = self.row_len();
        Ok((0..self.capacity())
            .into_par_iter()
            .map(|r| {
                if !self.cursor.is_occupied(r) {
                    return 0.0;
                }
                let mut acc = 0.0;
                for j in r * k..(r + 1) * k {
                    acc += self.values.get(j) * x[self.indices[j] as usize];
                }
                acc
            })
            .collect())
    }

    fn lcg(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_dim("lcg", self.capacity(), coeffs.len())?;
        let k = self.row_len();
        let order = self.age_order();
        let block_size = self.layout.block_size();
        let mut out = vec![0.0; self.dim()];
        out.par_chunks_mut(block_size)
            .enumerate()
            .for_each(|(b, acc)| {
                let start = b * block_size;
                let slots = self.layout.slot_range(b);
                for &r in &order {
                    let coef = coeffs[r];
                    let base = r * k;
                    for j in slots.clone() {
                        let i = self.indices[base + j] as usize;
                        acc[i - start] += coef * self.values.get(base + j);
                    }
                }
            });
        Ok(out)
    }

    fn dense_rows(&self) -> Vec<Vec<f64>> {
        self.age_order()
            .into_iter()
            .map(|r| {
                let (idx, vals) = self.row(r);
                let mut row = vec![0.0; self.dim()];
                for (i, v) in idx.into_iter().zip(vals) {
                    row[i as usize] = v;
                }
                row
            })
            .collect()
    }
}

/// Column chunk for the dense `lcg`; fixed so the reduction order never
/// depends on the thread count.
const DENSE_LCG_CHUNK: usize = 4096;

/// Uncompressed `m × d` ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradWindow {
    dim: usize,
    cursor: RingCursor,
    rows: Vec<f64>,
}

impl DenseGradWindow {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            dim,
            cursor: RingCursor::new(capacity)?,
            rows: vec![0.0; capacity * dim],
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }
}

impl GradientWindow for DenseGradWindow {
    fn capacity(&self) -> usize {
        self.cursor.capacity()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn filled(&self) -> usize {
        self.cursor.filled()
    }

    fn age_order(&self) -> Vec<usize> {
        self.cursor.age_order()
    }

    fn push(&mut self, c: &Compressed) -> Result<RowInsert> {
        check_dim("DenseGradWindow::push", self.dim, c.dim())?;
        let dense = c.densify();
        let insert = self.cursor.advance();
        let d = self.dim;
        self.rows[insert.row * d..(insert.row + 1) * d].copy_from_slice(&dense);
        Ok(insert)
    }

    fn sp(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("sp", self.dim, x.len())?;
        Ok((0..self.capacity())
            .into_par_iter()
            .map(|r| {
                if self.cursor.is_occupied(r) {
                    crate::linalg::dot(self.row(r), x)
                } else {
                    0.0
                }
            })
            .collect())
    }

    fn lcg(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_dim("lcg", self.capacity(), coeffs.len())?;
        let order = self.age_order();
        let mut out = vec![0.0; self.dim];
        out.par_chunks_mut(DENSE_LCG_CHUNK)
            .enumerate()
            .for_each(|(b, acc)| {
                let start = b * DENSE_LCG_CHUNK;
                for &r in &order {
                    let coef = coeffs[r];
                    let row = &self.row(r)[start..start + acc.len()];
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += coef * g;
                    }
                }
            });
        Ok(out)
    }

    fn dense_rows(&self) -> Vec<Vec<f64>> {
        self.age_order()
            .into_iter()
            .map(|r| self.row(r).to_vec())
            .collect()
    }
}

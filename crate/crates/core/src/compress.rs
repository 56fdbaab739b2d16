//! Gradient compressors and the error-feedback accumulator.
//!
//! Two compressors are provided: blockwise Top-k sparsification, which
//! keeps a fixed quota of largest-magnitude entries in every block of
//! `block_size` coordinates, and single-step power iteration, which
//! factors an unfolded gradient tensor as `P Qᵀ` with a warm-started `Q`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EfcpError, Result};
use crate::linalg::{orthogonalize, DenseMatrix};

/// Storage precision for compressed gradient values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn value_bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds `v` to the nearest value representable in this precision.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

pub(crate) fn validate_density(density: f64) -> Result<()> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(EfcpError::Parameter {
            name: "density",
            reason: format!("must be in (0, 1], got {density}"),
        })
    }
}

/// Entries kept in a block of `width` coordinates: `max(1, round(density·width))`.
pub fn block_quota(width: usize, density: f64) -> usize {
    ((density * width as f64).round() as usize).clamp(1, width.max(1))
}

/// Per-block quotas and their offsets within a compressed row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    dim: usize,
    block_size: usize,
    quotas: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(dim: usize, block_size: usize, density: f64) -> Result<Self> {
        validate_density(density)?;
        if dim == 0 {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        if block_size == 0 {
            return Err(EfcpError::Parameter {
                name: "block_size",
                reason: "must be at least 1".into(),
            });
        }
        let n_blocks = dim.div_ceil(block_size);
        let quotas: Vec<usize> = (0..n_blocks)
            .map(|b| {
                let width = block_size.min(dim - b * block_size);
                block_quota(width, density)
            })
            .collect();
        let mut offsets = Vec::with_capacity(n_blocks + 1);
        offsets.push(0);
        for q in &quotas {
            offsets.push(offsets.last().unwrap() + q);
        }
        Ok(Self {
            dim,
            block_size,
            quotas,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.quotas.len()
    }

    pub fn quotas(&self) -> &[usize] {
        &self.quotas
    }

    /// Total entries per compressed row (`k'`).
    pub fn row_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Range of compressed-row slots belonging to block `b`.
    pub fn slot_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Range of coordinates covered by block `b`.
    pub fn coord_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(self.dim)
    }

    /// Checks that `c` has exactly this layout's quotas in every block.
    pub fn validate(&self, c: &SparseCompressed) -> Result<()> {
        if c.dim != self.dim || c.block_size != self.block_size {
            return Err(EfcpError::BlockStructure(format!(
                "expected d={} B_d={}, got d={} B_d={}",
                self.dim, self.block_size, c.dim, c.block_size
            )));
        }
        if c.indices.len() != self.row_len() || c.values.len() != self.row_len() {
            return Err(EfcpError::BlockStructure(format!(
                "expected {} entries, got {} indices / {} values",
                self.row_len(),
                c.indices.len(),
                c.values.len()
            )));
        }
        for b in 0..self.n_blocks() {
            let coords = self.coord_range(b);
            for &i in &c.indices[self.slot_range(b)] {
                if !coords.contains(&(i as usize)) {
                    return Err(EfcpError::BlockStructure(format!(
                        "index {i} outside block {b} ({coords:?})"
                    )));
                }
            }
        }
        if c.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EfcpError::BlockStructure(
                "indices are not strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Blockwise Top-k output.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCompressed {
    pub dim: usize,
    pub block_size: usize,
    /// Quota of a full block (`κ`).
    pub per_block_count: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseCompressed {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }
}

/// Keeps the `max(1, round(density·width))` largest-magnitude entries of
/// every block. Ties go to the lower index; kept values are copied verbatim.
pub fn topk_block(a: &[f64], density: f64, block_size: usize) -> Result<SparseCompressed> {
    let layout = BlockLayout::new(a.len(), block_size, density)?;
    Ok(topk_with_layout(a, &layout, density))
}

fn topk_with_layout(a: &[f64], layout: &BlockLayout, density: f64) -> SparseCompressed {
    let per_block: Vec<Vec<u32>> = (0..layout.n_blocks())
        .into_par_iter()
        .map(|b| {
            let coords = layout.coord_range(b);
            let quota = layout.quotas()[b];
            let block = &a[coords.clone()];
            let mut order: Vec<u32> = (0..block.len() as u32).collect();
            let by_magnitude = |x: &u32, y: &u32| {
                block[*y as usize]
                    .abs()
                    .total_cmp(&block[*x as usize].abs())
                    .then(x.cmp(y))
            };
            if quota < order.len() {
                order.select_nth_unstable_by(quota - 1, by_magnitude);
                order.truncate(quota);
            }
            order.sort_unstable();
            order.into_iter().map(|i| i + coords.start as u32).collect()
        })
        .collect();
    let indices: Vec<u32> = per_block.into_iter().flatten().collect();
    let values = indices.iter().map(|&i| a[i as usize]).collect();
    SparseCompressed {
        dim: layout.dim(),
        block_size: layout.block_size(),
        per_block_count: block_quota(layout.block_size().min(layout.dim()), density),
        indices,
        values,
    }
}

/// A compressed accumulator as fed to a gradient window.
#[derive(Debug, Clone, PartialEq)]
pub enum Compressed {
    Dense(Vec<f64>),
    Sparse(SparseCompressed),
}

impl Compressed {
    pub fn dim(&self) -> usize {
        match self {
            Compressed::Dense(v) => v.len(),
            Compressed::Sparse(s) => s.dim,
        }
    }
}

/// Expansion of a compressed value back to its dense form.
pub trait Densify {
    fn densify(&self) -> Vec<f64>;
}

impl Densify for Compressed {
    fn densify(&self) -> Vec<f64> {
        match self {
            Compressed::Dense(v) => v.clone(),
            Compressed::Sparse(s) => s.densify(),
        }
    }
}

impl Densify for SparseCompressed {
    fn densify(&self) -> Vec<f64> {
        SparseCompressed::densify(self)
    }
}

/// The `Compress` step applied to the error-feedback accumulator.
pub trait Compressor {
    fn compress(&self, a: &[f64]) -> Result<Compressed>;
}

/// Pass-through compressor used by the uncompressed optimizers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Compressor for Identity {
    fn compress(&self, a: &[f64]) -> Result<Compressed> {
        Ok(Compressed::Dense(a.to_vec()))
    }
}

/// Blockwise Top-k with values rounded to the window's storage precision.
#[derive(Debug, Clone)]
pub struct TopK {
    layout: BlockLayout,
    density: f64,
    precision: Precision,
}

impl TopK {
    pub fn new(dim: usize, density: f64, block_size: usize, precision: Precision) -> Result<Self> {
        Ok(Self {
            layout: BlockLayout::new(dim, block_size, density)?,
            density,
            precision,
        })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }
}

impl Compressor for TopK {
    fn compress(&self, a: &[f64]) -> Result<Compressed> {
        check_dim("TopK::compress", self.layout.dim(), a.len())?;
        let mut c = topk_with_layout(a, &self.layout, self.density);
        if self.precision != Precision::F64 {
            c.values
                .iter_mut()
                .for_each(|v| *v = self.precision.round(*v));
        }
        Ok(Compressed::Sparse(c))
    }
}

/// Error-feedback accumulator `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedback {
    xi: Vec<f64>,
    enabled: bool,
}

impl ErrorFeedback {
    pub fn new(dim: usize) -> Self {
        Self {
            xi: vec![0.0; dim],
            enabled: true,
        }
    }

    /// An accumulator that never carries residuals: `a = g` at every step.
    pub fn disabled(dim: usize) -> Self {
        Self {
            xi: vec![0.0; dim],
            enabled: false,
        }
    }

    pub fn error(&self) -> &[f64] {
        &self.xi
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn error_norm(&self) -> f64 {
        crate::linalg::norm(&self.xi)
    }

    /// `a ← ξ + g; c ← compress(a); ξ ← a − densify(c)`.
    pub fn step<C, F>(&mut self, g: &[f64], compress: F) -> Result<C>
    where
        C: Densify,
        F: FnOnce(&[f64]) -> Result<C>,
    {
        check_dim("ErrorFeedback::step", self.xi.len(), g.len())?;
        let a: Vec<f64> = if self.enabled {
            self.xi.iter().zip(g).map(|(x, gi)| x + gi).collect()
        } else {
            g.to_vec()
        };
        let c = compress(&a)?;
        let dense = c.densify();
        check_dim("ErrorFeedback::step (compressed)", a.len(), dense.len())?;
        if self.enabled {
            for ((xi, ai), ci) in self.xi.iter_mut().zip(&a).zip(&dense) {
                *xi = ai - ci;
            }
        }
        Ok(c)
    }

    /// [`ErrorFeedback::step`] with a [`Compressor`].
    pub fn step_with(&mut self, g: &[f64], compressor: &dyn Compressor) -> Result<Compressed> {
        self.step(g, |a| compressor.compress(a))
    }
}

/// Splits a tensor shape into the unfolded matrix dimensions `(p₁, p_{2:s})`.
pub fn unfold_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_first() {
        Some((&p1, rest)) if p1 > 0 && rest.iter().all(|&p| p > 0) => {
            Ok((p1, rest.iter().product::<usize>()))
        }
        _ => Err(EfcpError::Parameter {
            name: "shape",
            reason: format!("tensor shape must be non-empty with positive dims, got {shape:?}"),
        }),
    }
}

/// A gradient tensor factored as `P Qᵀ` over its unfolding.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCompressed {
    pub p: DenseMatrix,
    pub q: DenseMatrix,
    pub shape: Vec<usize>,
}

impl LowRankCompressed {
    pub fn rank(&self) -> usize {
        self.p.cols()
    }

    /// `P Qᵀ` in the row-major order of the original tensor.
    pub fn reconstruct(&self) -> Vec<f64> {
        let (rows, cols, rank) = (self.p.rows(), self.q.rows(), self.rank());
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let p_row = self.p.row(i);
            let out_row = &mut out[i * cols..(i + 1) * cols];
            for (j, o) in out_row.iter_mut().enumerate() {
                let q_row = self.q.row(j);
                let mut acc = 0.0;
                for k in 0..rank {
                    acc += p_row[k] * q_row[k];
                }
                *o = acc;
            }
        }
        out
    }
}

impl Densify for LowRankCompressed {
    fn densify(&self) -> Vec<f64> {
        self.reconstruct()
    }
}

/// One power-iteration step: `P = orth(g̃ Q_prev)`, `Q = g̃ᵀ P`.
///
/// `prev_q` is replaced by the new `Q` as the next warm start, except that
/// columns of the new `Q` which are exactly zero keep their previous value
/// so a zero gradient does not collapse the warm start permanently.
pub fn power_compress(
    g: &[f64],
    shape: &[usize],
    prev_q: &mut DenseMatrix,
) -> Result<LowRankCompressed> {
    let (p1, p2) = unfold_dims(shape)?;
    check_dim("power_compress (tensor size)", p1 * p2, g.len())?;
    check_dim("power_compress (Q rows)", p2, prev_q.rows())?;
    let rank = prev_q.cols();
    if rank == 0 || rank > p1.min(p2) {
        return Err(EfcpError::Parameter {
            name: "rank",
            reason: format!(
                "must be in [1, {}] for shape {shape:?}, got {rank}",
                p1.min(p2)
            ),
        });
    }
    let unfolded = DenseMatrix::new(p1, p2, g.to_vec())?;
    let p = orthogonalize(&unfolded.matmul(prev_q)?);
    let q = unfolded.transpose_matmul(&p)?;
    for j in 0..rank {
        let col = q.column(j);
        if col.iter().any(|&v| v != 0.0) {
            prev_q.set_column(j, &col);
        }
    }
    Ok(LowRankCompressed {
        p,
        q,
        shape: shape.to_vec(),
    })
}

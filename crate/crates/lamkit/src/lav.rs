//! Length-aware vectorization: sinusoidal segment position embeddings and
//! per-kernel length vectors.
//!
//! The embedding entry at dimension `i` uses the exponent `2i/|d|` with the
//! raw entry index `i` (even entries sine, odd entries cosine) rather than
//! the pair-shared exponent floor(i/2); downstream code treats this formula
//! as the contract.

use crate::error::{Error, Result};
use crate::numerics::{Tape, TapeId};

/// One sinusoidal position row:
/// `sin(pos / 10000^(2i/d))` for even `i`, `cos(...)` for odd `i`.
pub fn sinusoidal_pe(pos: usize, d_model: usize) -> Vec<f64> {
    let mut row = vec![0.0; d_model];
    for (i, slot) in row.iter_mut().enumerate() {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        *slot = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    row
}

/// Precomputed rows `0..=max_pos`, shared read-only.
#[derive(Clone, Debug)]
pub struct PositionTable {
    max_pos: usize,
    d_model: usize,
    values: Vec<f64>,
}

impl PositionTable {
    pub fn new(max_pos: usize, d_model: usize) -> Self {
        let mut values = Vec::with_capacity((max_pos + 1) * d_model);
        for pos in 0..=max_pos {
            values.extend(sinusoidal_pe(pos, d_model));
        }
        PositionTable {
            max_pos,
            d_model,
            values,
        }
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        assert!(pos <= self.max_pos, "position {pos} beyond table");
        &self.values[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Flat concatenation of rows `start..start + count`.
    pub fn rows_flat(&self, start: usize, count: usize) -> Vec<f64> {
        assert!(start + count <= self.max_pos + 1, "positions beyond table");
        self.values[start * self.d_model..(start + count) * self.d_model].to_vec()
    }
}

/// Add segment position embeddings to a kernel's segment vectors:
/// row `j` receives the embedding of 1-based position `j + 1`, restarting
/// at 1 for every kernel.
pub fn add_segment_positions(
    tape: &mut Tape,
    segment_vectors: TapeId,
    table: &PositionTable,
) -> Result<TapeId> {
    let (n, d) = tape.dims(segment_vectors);
    if d != table.d_model() {
        return Err(Error::shape(
            "add_segment_positions",
            format!("{n}x{d}"),
            format!("table d_model {}", table.d_model()),
        ));
    }
    if n > table.max_pos() {
        return Err(Error::invalid(format!(
            "add_segment_positions: {n} segments exceed table max position {}",
            table.max_pos()
        )));
    }
    tape.add_const(segment_vectors, table.rows_flat(1, n))
}

/// Per-kernel length vectors and the chunk counts that produced them.
#[derive(Clone, Debug)]
pub struct LengthVectors {
    /// One `1 x d` tape node per kernel, in kernel order.
    pub ids: Vec<TapeId>,
    pub chunk_counts: Vec<usize>,
}

/// Build one length vector per kernel: the column-wise mean of that
/// kernel's segment vectors (taken before position addition) plus the
/// position embedding of the kernel's chunk count.
pub fn compute_length_vectors(
    tape: &mut Tape,
    segment_vectors_per_kernel: &[TapeId],
    table: &PositionTable,
) -> Result<LengthVectors> {
    if segment_vectors_per_kernel.is_empty() {
        return Err(Error::invalid("compute_length_vectors: no kernels"));
    }
    let mut ids = Vec::with_capacity(segment_vectors_per_kernel.len());
    let mut chunk_counts = Vec::with_capacity(segment_vectors_per_kernel.len());
    for &seg in segment_vectors_per_kernel {
        let (n, d) = tape.dims(seg);
        if d != table.d_model() {
            return Err(Error::shape(
                "compute_length_vectors",
                format!("{n}x{d}"),
                format!("table d_model {}", table.d_model()),
            ));
        }
        if n > table.max_pos() {
            return Err(Error::invalid(format!(
                "compute_length_vectors: chunk count {n} exceeds table max position {}",
                table.max_pos()
            )));
        }
        let mean = tape.mean_rows(seg);
        let vec = tape.add_const(mean, table.row(n).to_vec())?;
        ids.push(vec);
        chunk_counts.push(n);
    }
    Ok(LengthVectors { ids, chunk_counts })
}

//! Fixed-window segmentation of token sequences into per-kernel,
//! CLS-prefixed, padded and masked segment batches.

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, CLS_ID, PAD_ID};
use crate::error::{Error, Result};

/// One kernel: window size `m` (tokens per segment body, excluding CLS),
/// stride, and a per-document segment cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub max_segments: usize,
}

impl KernelSpec {
    pub fn new(kernel_size: usize, stride: usize, max_segments: usize) -> Result<Self> {
        if kernel_size == 0 || stride == 0 || stride > kernel_size {
            return Err(Error::invalid(format!(
                "kernel spec requires 1 <= stride <= kernel_size, got m={kernel_size} s={stride}"
            )));
        }
        if max_segments == 0 {
            return Err(Error::invalid("kernel spec requires max_segments >= 1"));
        }
        Ok(KernelSpec {
            kernel_size,
            stride,
            max_segments,
        })
    }

    /// Default configuration: stride equal to the kernel size, so adjacent
    /// segments do not overlap.
    pub fn non_overlapping(kernel_size: usize, max_segments: usize) -> Result<Self> {
        KernelSpec::new(kernel_size, kernel_size, max_segments)
    }
}

/// Padded, masked segment matrix for one document under one kernel.
/// Row layout is `[CLS, body...]`; `token_mask` is false on PAD cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub kernel: KernelSpec,
    pub segments: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    pub n_segments: usize,
    /// Tail tokens dropped by the `max_segments` cap.
    pub truncated_tokens: usize,
}

/// Number of windows that cover a `token_count`-token document:
/// `min(max_segments, 1 if T <= m else 1 + ceil((T - m) / s))`.
pub fn count_segments(token_count: usize, kernel: &KernelSpec) -> usize {
    let m = kernel.kernel_size;
    let s = kernel.stride;
    let uncapped = if token_count <= m {
        1
    } else {
        1 + (token_count - m).div_ceil(s)
    };
    uncapped.min(kernel.max_segments)
}

/// Split a document into CLS-prefixed windows at offsets `0, s, 2s, ...`,
/// stopping once a window reaches the end of the sequence. The final
/// partial window is PAD-filled and masked; tokens beyond the segment cap
/// are dropped and counted.
pub fn segment_document(doc: &Document, kernel: &KernelSpec) -> Result<SegmentBatch> {
    segment_tokens(&doc.tokens, kernel)
}

pub fn segment_tokens(tokens: &[usize], kernel: &KernelSpec) -> Result<SegmentBatch> {
    if tokens.is_empty() {
        return Err(Error::invalid("segment_document: empty document"));
    }
    let m = kernel.kernel_size;
    let s = kernel.stride;
    let total = count_segments(tokens.len(), kernel);

    let mut segments = Vec::with_capacity(total);
    let mut token_mask = Vec::with_capacity(total);
    let mut covered_end = 0;
    for seg_idx in 0..total {
        let start = seg_idx * s;
        let mut row = Vec::with_capacity(m + 1);
        let mut mask = Vec::with_capacity(m + 1);
        row.push(CLS_ID);
        mask.push(true);
        for j in 0..m {
            if start + j < tokens.len() {
                row.push(tokens[start + j]);
                mask.push(true);
            } else {
                row.push(PAD_ID);
                mask.push(false);
            }
        }
        covered_end = covered_end.max((start + m).min(tokens.len()));
        segments.push(row);
        token_mask.push(mask);
    }
    Ok(SegmentBatch {
        kernel: *kernel,
        segments,
        token_mask,
        n_segments: total,
        truncated_tokens: tokens.len() - covered_end,
    })
}

/// Documents padded to a common segment count for mini-batching.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub kernel: KernelSpec,
    pub docs: Vec<SegmentBatch>,
    /// True (pre-padding) segment count per document.
    pub true_counts: Vec<usize>,
}

/// Pad every document to the largest segment count in the batch with
/// fully-masked all-PAD segments.
pub fn pad_and_batch(batches: Vec<SegmentBatch>) -> Result<PaddedBatch> {
    let kernel = batches
        .first()
        .map(|b| b.kernel)
        .ok_or_else(|| Error::invalid("pad_and_batch: empty batch list"))?;
    if let Some(bad) = batches.iter().find(|b| b.kernel != kernel) {
        return Err(Error::invalid(format!(
            "pad_and_batch: mixed kernels {:?} vs {:?}",
            kernel, bad.kernel
        )));
    }
    let width = kernel.kernel_size + 1;
    let max_count = batches.iter().map(|b| b.n_segments).max().unwrap_or(0);
    let true_counts: Vec<usize> = batches.iter().map(|b| b.n_segments).collect();
    let mut docs = batches;
    for doc in docs.iter_mut() {
        while doc.segments.len() < max_count {
            doc.segments.push(vec![PAD_ID; width]);
            doc.token_mask.push(vec![false; width]);
        }
    }
    Ok(PaddedBatch {
        kernel,
        docs,
        true_counts,
    })
}

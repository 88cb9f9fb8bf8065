//! Small pre-norm Transformer encoder used three ways: per-kernel segment
//! encoder (token-id input), document encoder and length encoder (vector
//! input).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lav::PositionTable;
use crate::numerics::{
    multi_head_attention, Activation, AttentionParamIds, ParameterStore, Tape, TapeId, Tensor2D,
};
use crate::segmentation::SegmentBatch;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    /// 0 for encoders over pre-built vectors (no token embedding).
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be positive and divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff must be positive"));
        }
        Ok(())
    }
}

/// What a parameter holds, which decides its initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

/// Enumerate `(name, rows, cols, kind)` for one encoder under `prefix`,
/// in the order the names sort.
pub fn encoder_param_shapes(prefix: &str, cfg: &EncoderConfig) -> Vec<(String, usize, usize, ParamKind)> {
    let d = cfg.d_model;
    let mut shapes = Vec::new();
    if cfg.vocab_size > 0 {
        shapes.push((format!("{prefix}.emb"), cfg.vocab_size, d, ParamKind::Weight));
    }
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        shapes.push((format!("{p}.ln1.g"), 1, d, ParamKind::Gain));
        shapes.push((format!("{p}.ln1.b"), 1, d, ParamKind::Bias));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{p}.attn.{w}"), d, d, ParamKind::Weight));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            shapes.push((format!("{p}.attn.{b}"), 1, d, ParamKind::Bias));
        }
        shapes.push((format!("{p}.ln2.g"), 1, d, ParamKind::Gain));
        shapes.push((format!("{p}.ln2.b"), 1, d, ParamKind::Bias));
        shapes.push((format!("{p}.ffn.w1"), d, cfg.d_ff, ParamKind::Weight));
        shapes.push((format!("{p}.ffn.b1"), 1, cfg.d_ff, ParamKind::Bias));
        shapes.push((format!("{p}.ffn.w2"), cfg.d_ff, d, ParamKind::Weight));
        shapes.push((format!("{p}.ffn.b2"), 1, d, ParamKind::Bias));
    }
    shapes.push((format!("{prefix}.lnf.g"), 1, d, ParamKind::Gain));
    shapes.push((format!("{prefix}.lnf.b"), 1, d, ParamKind::Bias));
    shapes
}

/// Scalar parameter count of one encoder:
/// `vocab*d + layers*(4d^2 + 4d + 2*d*d_ff + d + d_ff + 4d) + 2d`.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    cfg.vocab_size * d
        + cfg.layers * (4 * d * d + 4 * d + 2 * d * cfg.d_ff + d + cfg.d_ff + 4 * d)
        + 2 * d
}

/// Insert freshly initialized encoder parameters: weights ~ N(0, 0.02),
/// biases 0, norm gains 1. Draw order follows the shape enumeration, so a
/// given RNG state always produces the same values.
pub fn init_encoder_params(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for (name, rows, cols, kind) in encoder_param_shapes(prefix, cfg) {
        let data: Vec<f64> = match kind {
            ParamKind::Weight => (0..rows * cols).map(|_| normal.sample(rng)).collect(),
            ParamKind::Bias => vec![0.0; rows * cols],
            ParamKind::Gain => vec![1.0; rows * cols],
        };
        store.insert(name, Tensor2D::from_vec(rows, cols, data)?)?;
    }
    Ok(())
}

struct LayerParamIds {
    ln1_g: TapeId,
    ln1_b: TapeId,
    attn: AttentionParamIds,
    ln2_g: TapeId,
    ln2_b: TapeId,
    w1: TapeId,
    b1: TapeId,
    w2: TapeId,
    b2: TapeId,
}

/// Tape handles for one encoder's parameters, registered per forward pass.
pub struct EncoderParamIds {
    embedding: Option<TapeId>,
    layers: Vec<LayerParamIds>,
    lnf_g: TapeId,
    lnf_b: TapeId,
}

impl EncoderParamIds {
    pub fn register(
        tape: &mut Tape,
        store: &ParameterStore,
        prefix: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let embedding = if cfg.vocab_size > 0 {
            Some(tape.param(store, &format!("{prefix}.emb"))?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.l{l}");
            layers.push(LayerParamIds {
                ln1_g: tape.param(store, &format!("{p}.ln1.g"))?,
                ln1_b: tape.param(store, &format!("{p}.ln1.b"))?,
                attn: AttentionParamIds::register(tape, store, &format!("{p}.attn"))?,
                ln2_g: tape.param(store, &format!("{p}.ln2.g"))?,
                ln2_b: tape.param(store, &format!("{p}.ln2.b"))?,
                w1: tape.param(store, &format!("{p}.ffn.w1"))?,
                b1: tape.param(store, &format!("{p}.ffn.b1"))?,
                w2: tape.param(store, &format!("{p}.ffn.w2"))?,
                b2: tape.param(store, &format!("{p}.ffn.b2"))?,
            });
        }
        Ok(EncoderParamIds {
            embedding,
            layers,
            lnf_g: tape.param(store, &format!("{prefix}.lnf.g"))?,
            lnf_b: tape.param(store, &format!("{prefix}.lnf.b"))?,
        })
    }
}

/// Encoder input: token ids (embedded, with token-level sinusoidal
/// positions added) or pre-built vectors.
pub enum EncoderInput<'a> {
    TokenIds(&'a [usize]),
    Vectors(TapeId),
}

/// Inverted-scaling dropout recorded as a constant multiplicative mask.
/// A `None` RNG means evaluation mode (identity).
pub fn dropout(
    tape: &mut Tape,
    x: TapeId,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeId> {
    let rng = match rng {
        Some(r) if rate > 0.0 => r,
        _ => return Ok(x),
    };
    let (rows, cols) = tape.dims(x);
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| {
            if rng.random_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.mul_const(x, mask)
}

/// Run the encoder stack: optional embedding + token positions, then
/// `layers` pre-norm blocks (self-attention and feed-forward, each with a
/// residual), then a final norm. A zero-layer stack is the identity on the
/// embedded input. `positions` supplies token-level sinusoidal rows for
/// id input; when absent a table is built on the spot.
pub fn encoder_forward(
    tape: &mut Tape,
    input: EncoderInput<'_>,
    cfg: &EncoderConfig,
    ids: &EncoderParamIds,
    mask: &[bool],
    positions: Option<&PositionTable>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeId> {
    let mut x = match input {
        EncoderInput::TokenIds(tokens) => {
            let table = ids.embedding.ok_or_else(|| {
                Error::invalid("encoder_forward: token input without an embedding table")
            })?;
            let emb = tape.gather_rows(table, tokens)?;
            let local;
            let positions = match positions {
                Some(p) => p,
                None => {
                    local = PositionTable::new(tokens.len(), cfg.d_model);
                    &local
                }
            };
            let with_pos = tape.add_const(emb, positions.rows_flat(0, tokens.len()))?;
            dropout(tape, with_pos, cfg.dropout_rate, rng.as_deref_mut())?
        }
        EncoderInput::Vectors(v) => v,
    };
    let (rows, d) = tape.dims(x);
    if d != cfg.d_model {
        return Err(Error::shape(
            "encoder_forward",
            format!("d_model {}", cfg.d_model),
            format!("{rows}x{d}"),
        ));
    }
    if mask.len() != rows {
        return Err(Error::shape(
            "encoder_forward",
            format!("{rows} rows"),
            format!("{} mask entries", mask.len()),
        ));
    }

    for layer in &ids.layers {
        let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
        let attended = multi_head_attention(tape, normed, &layer.attn, cfg.heads, mask)?;
        let attended = dropout(tape, attended, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, attended)?;

        let normed = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
        let hidden = tape.matmul(normed, layer.w1)?;
        let hidden = tape.add_row_broadcast(hidden, layer.b1)?;
        let hidden = tape.activation(hidden, Activation::Gelu);
        let ff = tape.matmul(hidden, layer.w2)?;
        let ff = tape.add_row_broadcast(ff, layer.b2)?;
        let ff = dropout(tape, ff, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, ff)?;
    }
    if ids.layers.is_empty() {
        return Ok(x);
    }
    tape.layer_norm(x, ids.lnf_g, ids.lnf_b, LAYER_NORM_EPS)
}

/// Encode all of one kernel's segments in a single batched pass and return
/// their CLS vectors (`n_segments x d`). Row-wise sublayers run over the
/// concatenated segment rows; attention is block-diagonal per segment, so
/// the result equals encoding each segment separately.
pub fn encode_segments(
    tape: &mut Tape,
    batch: &SegmentBatch,
    cfg: &EncoderConfig,
    ids: &EncoderParamIds,
    positions: &PositionTable,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeId> {
    let table = ids.embedding.ok_or_else(|| {
        Error::invalid("encode_segments: segment encoder needs an embedding table")
    })?;
    let width = batch.kernel.kernel_size + 1;
    let n = batch.n_segments;
    let flat_tokens: Vec<usize> = batch.segments.iter().flatten().copied().collect();
    let flat_mask: Vec<bool> = batch.token_mask.iter().flatten().copied().collect();
    let blocks: Vec<(usize, usize)> = (0..n).map(|s| (s * width, (s + 1) * width)).collect();

    let emb = tape.gather_rows(table, &flat_tokens)?;
    let pe_rows = positions.rows_flat(0, width);
    let mut tiled = Vec::with_capacity(n * width * cfg.d_model);
    for _ in 0..n {
        tiled.extend_from_slice(&pe_rows);
    }
    let mut x = tape.add_const(emb, tiled)?;
    x = dropout(tape, x, cfg.dropout_rate, rng.as_deref_mut())?;

    for layer in &ids.layers {
        let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
        let attended = crate::numerics::multi_head_attention_blocks(
            tape,
            normed,
            &layer.attn,
            cfg.heads,
            &flat_mask,
            &blocks,
        )?;
        let attended = dropout(tape, attended, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, attended)?;

        let normed = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
        let hidden = tape.matmul(normed, layer.w1)?;
        let hidden = tape.add_row_broadcast(hidden, layer.b1)?;
        let hidden = tape.activation(hidden, Activation::Gelu);
        let ff = tape.matmul(hidden, layer.w2)?;
        let ff = tape.add_row_broadcast(ff, layer.b2)?;
        let ff = dropout(tape, ff, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, ff)?;
    }
    if !ids.layers.is_empty() {
        x = tape.layer_norm(x, ids.lnf_g, ids.lnf_b, LAYER_NORM_EPS)?;
    }
    let cls_rows: Vec<usize> = (0..n).map(|s| s * width).collect();
    tape.gather_rows(x, &cls_rows)
}

/// Stack row 0 (the CLS position) of each segment's encoder output into an
/// `n_segments x d` matrix, preserving segment order.
pub fn extract_cls(tape: &mut Tape, segment_outputs: &[TapeId]) -> Result<TapeId> {
    if segment_outputs.is_empty() {
        return Err(Error::invalid("extract_cls: no segments"));
    }
    let mut firsts = Vec::with_capacity(segment_outputs.len());
    for &out in segment_outputs {
        firsts.push(tape.slice_rows(out, 0, 1)?);
    }
    tape.concat_rows(&firsts)
}

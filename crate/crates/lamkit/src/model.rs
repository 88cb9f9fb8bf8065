//! Hierarchical integration: per-kernel segment encoding, length-aware
//! vectorization, document and length encoders, sum combination,
//! max-then-average pooling, and the classification head.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::encoder::{
    dropout, encode_segments, encoder_forward, encoder_param_count, encoder_param_shapes,
    init_encoder_params, EncoderConfig, EncoderInput, EncoderParamIds, ParamKind,
};
use crate::error::{Error, Result};
use crate::lav::{add_segment_positions, compute_length_vectors, PositionTable};
use crate::numerics::{Activation, ParameterStore, Tape, TapeId, Tensor2D};
use crate::segmentation::{segment_tokens, KernelSpec};

/// Full architecture: kernel set, the three encoder stacks, and the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernels: Vec<KernelSpec>,
    pub segment_encoder: EncoderConfig,
    pub document_encoder: EncoderConfig,
    pub length_encoder: EncoderConfig,
    pub class_count: usize,
    pub task_kind: TaskKind,
    pub classifier_dropout: f64,
    /// False in the ablations that strip segment positions, length vectors
    /// and the length encoder.
    pub use_length_vectorization: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: kernels {8, 16, 32} with caps {32, 16, 8},
    /// d_model 32, 2-layer segment and document encoders, 1-layer length
    /// encoder.
    pub fn desk_default(vocab_size: usize, class_count: usize, task_kind: TaskKind) -> Self {
        let kernels = vec![
            KernelSpec::non_overlapping(8, 32).expect("valid kernel"),
            KernelSpec::non_overlapping(16, 16).expect("valid kernel"),
            KernelSpec::non_overlapping(32, 8).expect("valid kernel"),
        ];
        let base = EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            dropout_rate: 0.1,
            vocab_size: 0,
        };
        ModelConfig {
            kernels,
            segment_encoder: EncoderConfig {
                vocab_size,
                ..base
            },
            document_encoder: base,
            length_encoder: EncoderConfig { layers: 1, ..base },
            class_count,
            task_kind,
            classifier_dropout: 0.1,
            use_length_vectorization: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::config("model needs at least one kernel"));
        }
        self.segment_encoder.validate()?;
        self.document_encoder.validate()?;
        self.length_encoder.validate()?;
        if self.segment_encoder.vocab_size == 0 {
            return Err(Error::config("segment encoder needs a vocabulary"));
        }
        let d = self.segment_encoder.d_model;
        if self.document_encoder.d_model != d || self.length_encoder.d_model != d {
            return Err(Error::config("all encoders must share d_model"));
        }
        if self.document_encoder.vocab_size != 0 || self.length_encoder.vocab_size != 0 {
            return Err(Error::config(
                "document and length encoders take vectors, not token ids",
            ));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(Error::config("classifier_dropout outside [0, 1)"));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.segment_encoder.d_model
    }

    /// Parameter name prefix for the encoder of one kernel size.
    pub fn kernel_prefix(kernel_size: usize) -> String {
        format!("seg{kernel_size:04}")
    }

    /// A position table long enough for token positions, segment positions
    /// and chunk counts under this config.
    pub fn position_table(&self) -> PositionTable {
        let span = self
            .kernels
            .iter()
            .map(|k| (k.kernel_size + 1).max(k.max_segments))
            .max()
            .unwrap_or(1);
        PositionTable::new(span, self.d_model())
    }

    /// Exact scalar parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model();
        let mut total = self.kernels.len() * encoder_param_count(&self.segment_encoder)
            + encoder_param_count(&self.document_encoder);
        if self.use_length_vectorization {
            total += encoder_param_count(&self.length_encoder);
        }
        total += d * d + d + d * self.class_count + self.class_count;
        total
    }
}

fn head_param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, ParamKind)> {
    let d = cfg.d_model();
    vec![
        ("head.w1".to_string(), d, d, ParamKind::Weight),
        ("head.b1".to_string(), 1, d, ParamKind::Bias),
        ("head.w2".to_string(), d, cfg.class_count, ParamKind::Weight),
        ("head.b2".to_string(), 1, cfg.class_count, ParamKind::Bias),
    ]
}

/// Every `(name, rows, cols, kind)` the model owns, in name order.
pub fn model_param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, ParamKind)> {
    let mut shapes = Vec::new();
    for kernel in &cfg.kernels {
        shapes.extend(encoder_param_shapes(
            &ModelConfig::kernel_prefix(kernel.kernel_size),
            &cfg.segment_encoder,
        ));
    }
    shapes.extend(encoder_param_shapes("doc", &cfg.document_encoder));
    if cfg.use_length_vectorization {
        shapes.extend(encoder_param_shapes("len", &cfg.length_encoder));
    }
    shapes.extend(head_param_shapes(cfg));
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

/// Fresh parameters drawn from `rng` in lexicographic name order.
pub fn init_model_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for kernel in &cfg.kernels {
        init_encoder_params(
            &mut store,
            &ModelConfig::kernel_prefix(kernel.kernel_size),
            &cfg.segment_encoder,
            rng,
        )?;
    }
    init_encoder_params(&mut store, "doc", &cfg.document_encoder, rng)?;
    if cfg.use_length_vectorization {
        init_encoder_params(&mut store, "len", &cfg.length_encoder, rng)?;
    }
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    for (name, rows, cols, kind) in head_param_shapes(cfg) {
        let data: Vec<f64> = match kind {
            ParamKind::Weight => (0..rows * cols)
                .map(|_| rand_distr::Distribution::sample(&normal, rng))
                .collect(),
            _ => vec![0.0; rows * cols],
        };
        store.insert(name, Tensor2D::from_vec(rows, cols, data)?)?;
    }
    debug_assert_eq!(store.param_count(), cfg.param_count());
    Ok(store)
}

struct ModelParamIds {
    segment: Vec<EncoderParamIds>,
    document: EncoderParamIds,
    length: Option<EncoderParamIds>,
    head_w1: TapeId,
    head_b1: TapeId,
    head_w2: TapeId,
    head_b2: TapeId,
}

impl ModelParamIds {
    fn register(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        let mut segment = Vec::with_capacity(cfg.kernels.len());
        for kernel in &cfg.kernels {
            segment.push(EncoderParamIds::register(
                tape,
                store,
                &ModelConfig::kernel_prefix(kernel.kernel_size),
                &cfg.segment_encoder,
            )?);
        }
        let document = EncoderParamIds::register(tape, store, "doc", &cfg.document_encoder)?;
        let length = if cfg.use_length_vectorization {
            Some(EncoderParamIds::register(
                tape,
                store,
                "len",
                &cfg.length_encoder,
            )?)
        } else {
            None
        };
        Ok(ModelParamIds {
            segment,
            document,
            length,
            head_w1: tape.param(store, "head.w1")?,
            head_b1: tape.param(store, "head.b1")?,
            head_w2: tape.param(store, "head.w2")?,
            head_b2: tape.param(store, "head.b2")?,
        })
    }
}

/// Knobs for one forward pass. `dropout_rng: None` means evaluation mode.
/// The two override flags exist for ablation-equivalence checks.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub zero_length_output: bool,
    pub disable_positions: bool,
}

impl ForwardOptions<'static> {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }
}

/// Tape handles for every intermediate stage of one document's forward.
pub struct DocumentTrace {
    /// Per-kernel segment vectors after position addition (`n_k x d`).
    pub segment_vectors: Vec<TapeId>,
    pub chunk_counts: Vec<usize>,
    pub length_vectors: Option<Vec<TapeId>>,
    pub document_encoded: TapeId,
    pub length_encoded: Option<TapeId>,
    pub integrated: TapeId,
    pub pooled: TapeId,
    pub logits: TapeId,
    /// Row spans of each kernel inside the concatenated sequence.
    pub kernel_ranges: Vec<(usize, usize)>,
    pub truncated_tokens: usize,
}

/// `integrated[row] = doc_out[row] + len_out[kernel_of[row]]`: each segment
/// receives its own kernel's encoded length vector.
pub fn integrate(
    tape: &mut Tape,
    doc_out: TapeId,
    len_out: TapeId,
    kernel_of: &[usize],
) -> Result<TapeId> {
    let (rows, _) = tape.dims(doc_out);
    let (k, _) = tape.dims(len_out);
    if kernel_of.len() != rows {
        return Err(Error::shape(
            "integrate",
            format!("{rows} rows"),
            format!("{} kernel assignments", kernel_of.len()),
        ));
    }
    if let Some(&bad) = kernel_of.iter().find(|&&i| i >= k) {
        return Err(Error::invalid(format!(
            "integrate: kernel index {bad} out of range for {k} kernels"
        )));
    }
    let expanded = tape.gather_rows(len_out, kernel_of)?;
    tape.add(doc_out, expanded)
}

/// Stage 1: column-wise max over each kernel's rows. Stage 2: column-wise
/// mean over the stacked per-kernel maxima.
pub fn hierarchical_pool(
    tape: &mut Tape,
    integrated: TapeId,
    kernel_ranges: &[(usize, usize)],
) -> Result<TapeId> {
    let (rows, _) = tape.dims(integrated);
    let mut expected_start = 0;
    for &(start, end) in kernel_ranges {
        if start != expected_start || end <= start {
            return Err(Error::invalid(format!(
                "hierarchical_pool: ranges must partition the rows, got {start}..{end}"
            )));
        }
        expected_start = end;
    }
    if expected_start != rows {
        return Err(Error::invalid(format!(
            "hierarchical_pool: ranges cover {expected_start} of {rows} rows"
        )));
    }
    let mut maxima = Vec::with_capacity(kernel_ranges.len());
    for &(start, end) in kernel_ranges {
        let span = tape.slice_rows(integrated, start, end - start)?;
        maxima.push(tape.max_rows(span));
    }
    let stacked = tape.concat_rows(&maxima)?;
    Ok(tape.mean_rows(stacked))
}

/// Two-layer head: linear, gelu, dropout, linear. Returns raw logits.
pub fn classify(
    tape: &mut Tape,
    document_vector: TapeId,
    store: &ParameterStore,
    cfg: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeId> {
    let ids = ModelParamIds::register(tape, store, cfg)?;
    classify_with(tape, document_vector, &ids, cfg, rng)
}

fn classify_with(
    tape: &mut Tape,
    document_vector: TapeId,
    ids: &ModelParamIds,
    cfg: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeId> {
    let hidden = tape.matmul(document_vector, ids.head_w1)?;
    let hidden = tape.add_row_broadcast(hidden, ids.head_b1)?;
    let hidden = tape.activation(hidden, Activation::Gelu);
    let hidden = dropout(tape, hidden, cfg.classifier_dropout, rng)?;
    let logits = tape.matmul(hidden, ids.head_w2)?;
    tape.add_row_broadcast(logits, ids.head_b2)
}

/// Task loss on raw logits: mean binary cross-entropy over classes for
/// multi-label, softmax cross-entropy for single-label.
pub fn loss_for(tape: &mut Tape, logits: TapeId, labels: &[bool], task: TaskKind) -> Result<TapeId> {
    let (rows, cols) = tape.dims(logits);
    if rows != 1 || cols != labels.len() {
        return Err(Error::shape(
            "loss_for",
            format!("1x{}", labels.len()),
            format!("{rows}x{cols}"),
        ));
    }
    match task {
        TaskKind::MultiLabel => {
            let targets: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            tape.bce_with_logits_mean(logits, &targets)
        }
        TaskKind::SingleLabel => {
            let positives: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect();
            match positives.as_slice() {
                [target] => tape.softmax_cross_entropy(logits, *target),
                _ => Err(Error::invalid(
                    "single-label loss needs exactly one positive label",
                )),
            }
        }
    }
}

/// Full forward for one document's token sequence.
pub fn forward_document(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    tokens: &[usize],
    positions: &PositionTable,
    opts: &mut ForwardOptions<'_>,
) -> Result<DocumentTrace> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward_document: empty document"));
    }
    let ids = ModelParamIds::register(tape, store, cfg)?;

    // Multi-kernel encoding: per-kernel CLS vectors, all of a kernel's
    // segments encoded in one batched block-diagonal pass.
    let mut pre_position = Vec::with_capacity(cfg.kernels.len());
    let mut chunk_counts = Vec::with_capacity(cfg.kernels.len());
    let mut truncated_tokens = 0;
    for (kernel, enc_ids) in cfg.kernels.iter().zip(&ids.segment) {
        let batch = segment_tokens(tokens, kernel)?;
        truncated_tokens += batch.truncated_tokens;
        pre_position.push(encode_segments(
            tape,
            &batch,
            &cfg.segment_encoder,
            enc_ids,
            positions,
            opts.dropout_rng.as_deref_mut(),
        )?);
        chunk_counts.push(batch.n_segments);
    }

    // Length vectors use the pre-position segment vectors.
    let length_vectors = if cfg.use_length_vectorization {
        Some(compute_length_vectors(tape, &pre_position, positions)?)
    } else {
        None
    };

    let mut segment_vectors = Vec::with_capacity(pre_position.len());
    for &seg in &pre_position {
        let with_pos = if cfg.use_length_vectorization && !opts.disable_positions {
            add_segment_positions(tape, seg, positions)?
        } else {
            seg
        };
        segment_vectors.push(with_pos);
    }

    let mut kernel_ranges = Vec::with_capacity(chunk_counts.len());
    let mut kernel_of = Vec::new();
    let mut offset = 0;
    for (i, &n) in chunk_counts.iter().enumerate() {
        kernel_ranges.push((offset, offset + n));
        kernel_of.extend(std::iter::repeat_n(i, n));
        offset += n;
    }

    let doc_in = tape.concat_rows(&segment_vectors)?;
    let document_encoded = encoder_forward(
        tape,
        EncoderInput::Vectors(doc_in),
        &cfg.document_encoder,
        &ids.document,
        &vec![true; offset],
        None,
        opts.dropout_rng.as_deref_mut(),
    )?;

    let (length_encoded, integrated) = match (&length_vectors, &ids.length) {
        (Some(lv), Some(len_ids)) => {
            let len_in = tape.concat_rows(&lv.ids)?;
            let mut encoded = encoder_forward(
                tape,
                EncoderInput::Vectors(len_in),
                &cfg.length_encoder,
                len_ids,
                &vec![true; lv.ids.len()],
                None,
                opts.dropout_rng.as_deref_mut(),
            )?;
            if opts.zero_length_output {
                encoded = tape.scale(encoded, 0.0);
            }
            let combined = integrate(tape, document_encoded, encoded, &kernel_of)?;
            (Some(encoded), combined)
        }
        _ => (None, document_encoded),
    };

    let pooled = hierarchical_pool(tape, integrated, &kernel_ranges)?;
    let logits = classify_with(tape, pooled, &ids, cfg, opts.dropout_rng.as_deref_mut())?;

    Ok(DocumentTrace {
        segment_vectors,
        chunk_counts,
        length_vectors: length_vectors.map(|lv| lv.ids),
        document_encoded,
        length_encoded,
        integrated,
        pooled,
        logits,
        kernel_ranges,
        truncated_tokens,
    })
}

/// Config plus parameters; the unit that trains, evaluates, and persists.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

const CHECKPOINT_MAGIC: &str = "LAMKIT-CHECKPOINT v1";

/// Header metadata stored with every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub variant: String,
    pub seed: u64,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            config: cfg.clone(),
            params: init_model_params(cfg, &mut rng)?,
        })
    }

    /// Deterministic evaluation-mode logits for one token sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let positions = self.config.position_table();
        let mut tape = Tape::new();
        let trace = forward_document(
            &mut tape,
            &self.params,
            &self.config,
            tokens,
            &positions,
            &mut ForwardOptions::eval(),
        )?;
        Ok(tape.value(trace.logits).to_vec())
    }

    /// Versioned text checkpoint: a magic line, the metadata as canonical
    /// JSON, then one `param <name> <rows> <cols>` block per parameter with
    /// full-precision decimal rows. Loads reproduce logits bitwise.
    pub fn save(&self, path: &Path, variant: &str, seed: u64) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            variant: variant.to_string(),
            seed,
        };
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&serde_json::to_string(&meta)?);
        out.push('\n');
        for (name, tensor) in self.params.iter() {
            out.push_str(&format!("param {name} {} {}\n", tensor.rows(), tensor.cols()));
            for r in 0..tensor.rows() {
                let row: Vec<String> = tensor.row(r).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint(format!(
                "{} is not a lamkit checkpoint",
                path.display()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("missing metadata line".to_string()))?,
        )?;
        meta.config.validate()?;

        let mut store = ParameterStore::new();
        loop {
            let header = lines
                .next()
                .ok_or_else(|| Error::Checkpoint("unterminated checkpoint".to_string()))?;
            if header == "end" {
                break;
            }
            let mut parts = header.split(' ');
            let (tag, name, rows, cols) = (
                parts.next(),
                parts.next(),
                parts.next(),
                parts.next(),
            );
            if tag != Some("param") {
                return Err(Error::Checkpoint(format!("unexpected line {header:?}")));
            }
            let name = name
                .ok_or_else(|| Error::Checkpoint("param line missing name".to_string()))?;
            let rows: usize = rows
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad rows in {header:?}")))?;
            let cols: usize = cols
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad cols in {header:?}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: missing value rows")))?;
                for v in line.split(' ') {
                    data.push(v.parse::<f64>().map_err(|_| {
                        Error::Checkpoint(format!("{name}: bad value {v:?}"))
                    })?);
                }
            }
            if data.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {rows}x{cols} values, got {}",
                    data.len()
                )));
            }
            store.insert(name, Tensor2D::from_vec(rows, cols, data)?)?;
        }

        // Shape-check against the config-derived expectation.
        let expected = model_param_shapes(&meta.config);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, config implies {}",
                store.len(),
                expected.len()
            )));
        }
        for (name, rows, cols, _) in expected {
            let t = store
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match config ({rows}, {cols})",
                    t.shape()
                )));
            }
        }
        Ok((
            Model {
                config: meta.config.clone(),
                params: store,
            },
            meta,
        ))
    }
}

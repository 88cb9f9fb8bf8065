//! Run configuration: a flat JSON object with dotted keys, canonical
//! serialized form, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::corpus::{generate_synthetic_corpus, load_jsonl_corpus, Corpus, SyntheticConfig, TaskKind};
use crate::error::{Error, Result};
use crate::evaluation::Variant;
use crate::model::ModelConfig;
use crate::segmentation::KernelSpec;
use crate::training::TrainConfig;

/// Where documents come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Synthetic(SyntheticConfig),
    Jsonl {
        path: PathBuf,
        class_count: usize,
        task_kind: TaskKind,
        min_freq: usize,
    },
}

/// Architecture knobs as they appear in config files; `ModelConfig` is
/// derived once the corpus (and so the vocabulary) is known.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub kernel_sizes: Vec<usize>,
    pub kernel_strides: Vec<usize>,
    pub max_segments: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub segment_layers: usize,
    pub document_layers: usize,
    pub length_layers: usize,
    pub dropout: f64,
    pub classifier_dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            kernel_sizes: vec![8, 16, 32],
            kernel_strides: vec![8, 16, 32],
            max_segments: vec![32, 16, 8],
            d_model: 32,
            heads: 2,
            d_ff: 64,
            segment_layers: 2,
            document_layers: 2,
            length_layers: 1,
            dropout: 0.1,
            classifier_dropout: 0.1,
        }
    }
}

/// Full description of a reproducible run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusSource::Synthetic(SyntheticConfig::default()),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            variants: vec![
                Variant::Full,
                Variant::WithoutMultiKernel,
                Variant::WithoutLengthVectors,
                Variant::WithoutBoth,
            ],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::config(format!("key {key:?} must be a non-negative integer")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::config(format!("key {key:?} must be a non-negative integer")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::config(format!("key {key:?} must be a number")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::config(format!("key {key:?} must be a string")))
}

fn as_usize_array(key: &str, v: &Value) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| Error::config(format!("key {key:?} must be an array")))?
        .iter()
        .map(|item| as_usize(key, item))
        .collect()
}

fn as_u64_array(key: &str, v: &Value) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| Error::config(format!("key {key:?} must be an array")))?
        .iter()
        .map(|item| as_u64(key, item))
        .collect()
}

impl RunConfig {
    /// Parse the flat dotted-key JSON form. Absent keys take defaults;
    /// unknown keys are errors naming the key.
    pub fn from_flat_json(text: &str) -> Result<RunConfig> {
        let map: BTreeMap<String, Value> = serde_json::from_str(text)?;
        let mut cfg = RunConfig::default();

        let kind = match map.get("corpus.kind") {
            Some(v) => as_str("corpus.kind", v)?.to_string(),
            None => "synthetic".to_string(),
        };
        match kind.as_str() {
            "synthetic" => {
                let mut syn = SyntheticConfig::default();
                if let Some(v) = map.get("corpus.seed") {
                    syn.seed = as_u64("corpus.seed", v)?;
                }
                if let Some(v) = map.get("corpus.n_docs") {
                    syn.n_docs = as_usize("corpus.n_docs", v)?;
                }
                if let Some(v) = map.get("corpus.len_min") {
                    syn.len_min = as_usize("corpus.len_min", v)?;
                }
                if let Some(v) = map.get("corpus.len_max") {
                    syn.len_max = as_usize("corpus.len_max", v)?;
                }
                if let Some(v) = map.get("corpus.class_count") {
                    syn.class_count = as_usize("corpus.class_count", v)?;
                }
                if let Some(v) = map.get("corpus.task_kind") {
                    syn.task_kind = TaskKind::parse(as_str("corpus.task_kind", v)?)?;
                }
                cfg.corpus = CorpusSource::Synthetic(syn);
            }
            "jsonl" => {
                let path = map
                    .get("corpus.path")
                    .ok_or_else(|| Error::config("corpus.kind \"jsonl\" requires corpus.path"))?;
                let class_count = map
                    .get("corpus.class_count")
                    .ok_or_else(|| Error::config("corpus.kind \"jsonl\" requires corpus.class_count"))?;
                let task_kind = match map.get("corpus.task_kind") {
                    Some(v) => TaskKind::parse(as_str("corpus.task_kind", v)?)?,
                    None => TaskKind::MultiLabel,
                };
                let min_freq = match map.get("corpus.min_freq") {
                    Some(v) => as_usize("corpus.min_freq", v)?,
                    None => 1,
                };
                cfg.corpus = CorpusSource::Jsonl {
                    path: PathBuf::from(as_str("corpus.path", path)?),
                    class_count: as_usize("corpus.class_count", class_count)?,
                    task_kind,
                    min_freq,
                };
            }
            other => {
                return Err(Error::config(format!(
                    "corpus.kind must be \"synthetic\" or \"jsonl\", got {other:?}"
                )));
            }
        }

        if let Some(v) = map.get("model.kernel_sizes") {
            cfg.model.kernel_sizes = as_usize_array("model.kernel_sizes", v)?;
            // Strides and caps follow the sizes unless given explicitly.
            cfg.model.kernel_strides = cfg.model.kernel_sizes.clone();
            if !map.contains_key("model.max_segments") {
                return Err(Error::config(
                    "model.kernel_sizes requires model.max_segments of equal length",
                ));
            }
        }
        if let Some(v) = map.get("model.kernel_strides") {
            cfg.model.kernel_strides = as_usize_array("model.kernel_strides", v)?;
        }
        if let Some(v) = map.get("model.max_segments") {
            cfg.model.max_segments = as_usize_array("model.max_segments", v)?;
        }
        if let Some(v) = map.get("model.d_model") {
            cfg.model.d_model = as_usize("model.d_model", v)?;
        }
        if let Some(v) = map.get("model.heads") {
            cfg.model.heads = as_usize("model.heads", v)?;
        }
        if let Some(v) = map.get("model.d_ff") {
            cfg.model.d_ff = as_usize("model.d_ff", v)?;
        }
        if let Some(v) = map.get("model.segment_layers") {
            cfg.model.segment_layers = as_usize("model.segment_layers", v)?;
        }
        if let Some(v) = map.get("model.document_layers") {
            cfg.model.document_layers = as_usize("model.document_layers", v)?;
        }
        if let Some(v) = map.get("model.length_layers") {
            cfg.model.length_layers = as_usize("model.length_layers", v)?;
        }
        if let Some(v) = map.get("model.dropout") {
            cfg.model.dropout = as_f64("model.dropout", v)?;
        }
        if let Some(v) = map.get("model.classifier_dropout") {
            cfg.model.classifier_dropout = as_f64("model.classifier_dropout", v)?;
        }

        if let Some(v) = map.get("train.learning_rate") {
            cfg.train.learning_rate = as_f64("train.learning_rate", v)?;
        }
        if let Some(v) = map.get("train.batch_size") {
            cfg.train.batch_size = as_usize("train.batch_size", v)?;
        }
        if let Some(v) = map.get("train.max_epochs") {
            cfg.train.max_epochs = as_usize("train.max_epochs", v)?;
        }
        if let Some(v) = map.get("train.patience") {
            cfg.train.patience = as_usize("train.patience", v)?;
        }
        if let Some(v) = map.get("train.weight_decay") {
            cfg.train.weight_decay = as_f64("train.weight_decay", v)?;
        }
        if let Some(v) = map.get("train.seed") {
            cfg.train.seed = as_u64("train.seed", v)?;
        }
        if let Some(v) = map.get("train.grad_clip") {
            let clip = as_f64("train.grad_clip", v)?;
            cfg.train.grad_clip = if clip > 0.0 { Some(clip) } else { None };
        }

        if let Some(v) = map.get("run.variants") {
            let names = v
                .as_array()
                .ok_or_else(|| Error::config("key \"run.variants\" must be an array"))?;
            cfg.variants = names
                .iter()
                .map(|n| Variant::parse(as_str("run.variants", n)?))
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(v) = map.get("run.seeds") {
            cfg.seeds = as_u64_array("run.seeds", v)?;
        }

        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown config key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.kernel_sizes.is_empty()
            || m.kernel_sizes.len() != m.kernel_strides.len()
            || m.kernel_sizes.len() != m.max_segments.len()
        {
            return Err(Error::config(
                "model.kernel_sizes, model.kernel_strides and model.max_segments must be non-empty and equally long",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds must not be empty"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("run.variants must not be empty"));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Canonical flat form: sorted keys, two-space indent, trailing
    /// newline. Parsing this output and re-emitting reproduces it byte for
    /// byte.
    pub fn to_flat_json(&self) -> String {
        let mut map: BTreeMap<String, Value> = BTreeMap::new();
        match &self.corpus {
            CorpusSource::Synthetic(s) => {
                map.insert("corpus.kind".into(), json!("synthetic"));
                map.insert("corpus.seed".into(), json!(s.seed));
                map.insert("corpus.n_docs".into(), json!(s.n_docs));
                map.insert("corpus.len_min".into(), json!(s.len_min));
                map.insert("corpus.len_max".into(), json!(s.len_max));
                map.insert("corpus.class_count".into(), json!(s.class_count));
                map.insert("corpus.task_kind".into(), json!(s.task_kind.as_str()));
            }
            CorpusSource::Jsonl {
                path,
                class_count,
                task_kind,
                min_freq,
            } => {
                map.insert("corpus.kind".into(), json!("jsonl"));
                map.insert("corpus.path".into(), json!(path.to_string_lossy()));
                map.insert("corpus.class_count".into(), json!(class_count));
                map.insert("corpus.task_kind".into(), json!(task_kind.as_str()));
                map.insert("corpus.min_freq".into(), json!(min_freq));
            }
        }
        map.insert("model.kernel_sizes".into(), json!(self.model.kernel_sizes));
        map.insert("model.kernel_strides".into(), json!(self.model.kernel_strides));
        map.insert("model.max_segments".into(), json!(self.model.max_segments));
        map.insert("model.d_model".into(), json!(self.model.d_model));
        map.insert("model.heads".into(), json!(self.model.heads));
        map.insert("model.d_ff".into(), json!(self.model.d_ff));
        map.insert("model.segment_layers".into(), json!(self.model.segment_layers));
        map.insert("model.document_layers".into(), json!(self.model.document_layers));
        map.insert("model.length_layers".into(), json!(self.model.length_layers));
        map.insert("model.dropout".into(), json!(self.model.dropout));
        map.insert(
            "model.classifier_dropout".into(),
            json!(self.model.classifier_dropout),
        );
        map.insert("train.learning_rate".into(), json!(self.train.learning_rate));
        map.insert("train.batch_size".into(), json!(self.train.batch_size));
        map.insert("train.max_epochs".into(), json!(self.train.max_epochs));
        map.insert("train.patience".into(), json!(self.train.patience));
        map.insert("train.weight_decay".into(), json!(self.train.weight_decay));
        map.insert("train.seed".into(), json!(self.train.seed));
        map.insert(
            "train.grad_clip".into(),
            json!(self.train.grad_clip.unwrap_or(0.0)),
        );
        map.insert(
            "run.variants".into(),
            json!(self.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>()),
        );
        map.insert("run.seeds".into(), json!(self.seeds));
        let mut text = serde_json::to_string_pretty(&map).expect("serializable map");
        text.push('\n');
        text
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_flat_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_flat_json())?;
        Ok(())
    }

    /// Load or generate the configured corpus.
    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::Synthetic(s) => generate_synthetic_corpus(s),
            CorpusSource::Jsonl {
                path,
                class_count,
                task_kind,
                min_freq,
            } => load_jsonl_corpus(path, *class_count, *task_kind, *min_freq),
        }
    }

    /// Instantiate the architecture against a known vocabulary size.
    pub fn model_config(&self, corpus: &Corpus) -> Result<ModelConfig> {
        let m = &self.model;
        let mut kernels = Vec::with_capacity(m.kernel_sizes.len());
        for ((&size, &stride), &cap) in m
            .kernel_sizes
            .iter()
            .zip(&m.kernel_strides)
            .zip(&m.max_segments)
        {
            kernels.push(KernelSpec::new(size, stride, cap)?);
        }
        let base = crate::encoder::EncoderConfig {
            layers: m.document_layers,
            heads: m.heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            dropout_rate: m.dropout,
            vocab_size: 0,
        };
        let cfg = ModelConfig {
            kernels,
            segment_encoder: crate::encoder::EncoderConfig {
                layers: m.segment_layers,
                vocab_size: corpus.vocab.size(),
                ..base
            },
            document_encoder: base,
            length_encoder: crate::encoder::EncoderConfig {
                layers: m.length_layers,
                ..base
            },
            class_count: corpus.class_count,
            task_kind: corpus.task_kind,
            classifier_dropout: m.classifier_dropout,
            use_length_vectorization: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const KNOWN_KEYS: [&str; 29] = [
    "corpus.kind",
    "corpus.path",
    "corpus.seed",
    "corpus.n_docs",
    "corpus.len_min",
    "corpus.len_max",
    "corpus.class_count",
    "corpus.task_kind",
    "corpus.min_freq",
    "model.kernel_sizes",
    "model.kernel_strides",
    "model.max_segments",
    "model.d_model",
    "model.heads",
    "model.d_ff",
    "model.segment_layers",
    "model.document_layers",
    "model.length_layers",
    "model.dropout",
    "model.classifier_dropout",
    "train.learning_rate",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.weight_decay",
    "train.seed",
    "train.grad_clip",
    "run.variants",
    "run.seeds",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_byte_identically() {
        let cfg = RunConfig::default();
        let a = cfg.to_flat_json();
        let parsed = RunConfig::from_flat_json(&a).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_flat_json(), a);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_flat_json(r#"{"model.d_modle": 16}"#).unwrap_err();
        assert!(err.to_string().contains("model.d_modle"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_flat_json(
            r#"{
                "corpus.n_docs": 50,
                "model.kernel_sizes": [4, 8],
                "model.max_segments": [8, 4],
                "train.seed": 7,
                "run.seeds": [3],
                "run.variants": ["full", "wo_both"]
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.kernel_sizes, vec![4, 8]);
        assert_eq!(cfg.model.kernel_strides, vec![4, 8]);
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(
            cfg.variants,
            vec![Variant::Full, Variant::WithoutBoth]
        );
        match cfg.corpus {
            CorpusSource::Synthetic(s) => assert_eq!(s.n_docs, 50),
            other => panic!("unexpected corpus {other:?}"),
        }
    }

    #[test]
    fn kernel_sizes_require_caps() {
        let err =
            RunConfig::from_flat_json(r#"{"model.kernel_sizes": [4, 8]}"#).unwrap_err();
        assert!(err.to_string().contains("max_segments"), "{err}");
    }

    #[test]
    fn jsonl_source_requires_path_and_classes() {
        assert!(RunConfig::from_flat_json(r#"{"corpus.kind": "jsonl"}"#).is_err());
        let cfg = RunConfig::from_flat_json(
            r#"{"corpus.kind": "jsonl", "corpus.path": "x.jsonl", "corpus.class_count": 5}"#,
        )
        .unwrap();
        match cfg.corpus {
            CorpusSource::Jsonl {
                class_count,
                min_freq,
                ..
            } => {
                assert_eq!(class_count, 5);
                assert_eq!(min_freq, 1);
            }
            other => panic!("unexpected corpus {other:?}"),
        }
    }

    #[test]
    fn variant_names_validated() {
        let err =
            RunConfig::from_flat_json(r#"{"run.variants": ["fulll"]}"#).unwrap_err();
        assert!(err.to_string().contains("fulll"), "{err}");
    }
}

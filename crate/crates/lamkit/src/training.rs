//! Deterministic mini-batch training with AdamW, early stopping, and
//! best-checkpoint selection on validation F1-micro.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{shuffled_indices, Corpus, Document, TaskKind};
use crate::error::{Error, Result};
use crate::evaluation::f1_scores;
use crate::model::{forward_document, ForwardOptions, Model, ModelConfig};
use crate::numerics::{sigmoid, ParameterStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            weight_decay: 0.01,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 || self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::config(
                "patience, max_epochs and batch_size must be >= 1",
            ));
        }
        if self.learning_rate <= 0.0 || self.eps <= 0.0 {
            return Err(Error::config("rates must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Per-parameter first/second moments and the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let len = tensor.rows() * tensor.cols();
            first.insert(name.clone(), vec![0.0; len]);
            second.insert(name.clone(), vec![0.0; len]);
        }
        OptimizerState {
            first,
            second,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled AdamW update from the gradients in `store`:
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
pub fn adamw_step(
    store: &mut ParameterStore,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let bias1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, tensor) in store.iter_mut() {
        let m = state
            .first
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state missing {name}")))?;
        let v = state
            .second
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state missing {name}")))?;
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::invalid(format!("parameter {name} has no gradient")))?
            .to_vec();
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps))
                + cfg.learning_rate * cfg.weight_decay * data[i];
        }
    }
    Ok(())
}

/// Best-checkpoint and patience bookkeeping: improvement means strictly
/// better validation F1-micro, so ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_score: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_score: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record one epoch's score; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best_score.is_none_or(|best| score > best);
        if improved {
            self.best_score = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best_score
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1_micro: f64,
    pub valid_f1_macro: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F1-micro.
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Tokens dropped by segment caps, summed over all training forwards.
    pub truncated_tokens: u64,
}

/// Per-document scores, hard predictions, and F1 metrics for one split.
#[derive(Clone, Debug)]
pub struct SplitEvaluation {
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<bool>>,
    pub f1_micro: f64,
    pub f1_macro: f64,
}

/// Deterministic evaluation-mode forward over `docs`. Multi-label
/// predictions are `sigmoid(logit) >= 0.5`; single-label takes the argmax.
pub fn evaluate_split(
    cfg: &ModelConfig,
    params: &ParameterStore,
    docs: &[Document],
) -> Result<SplitEvaluation> {
    if docs.is_empty() {
        return Err(Error::UndefinedMetric(
            "evaluate_split: empty document list".to_string(),
        ));
    }
    if let Some(bad) = docs.iter().find(|d| d.labels.len() != cfg.class_count) {
        return Err(Error::config(format!(
            "document {} carries {} labels, model expects {}",
            bad.id,
            bad.labels.len(),
            cfg.class_count
        )));
    }
    let positions = cfg.position_table();
    let mut scores = Vec::with_capacity(docs.len());
    let mut predictions = Vec::with_capacity(docs.len());
    for doc in docs {
        let mut tape = Tape::new();
        let trace = forward_document(
            &mut tape,
            params,
            cfg,
            &doc.tokens,
            &positions,
            &mut ForwardOptions::eval(),
        )?;
        let logits = tape.value(trace.logits);
        let (score_row, pred_row) = match cfg.task_kind {
            TaskKind::MultiLabel => {
                let s: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                let p: Vec<bool> = s.iter().map(|&v| v >= 0.5).collect();
                (s, p)
            }
            TaskKind::SingleLabel => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let s: Vec<f64> = exps.iter().map(|&e| e / z).collect();
                let best = s
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let p: Vec<bool> = (0..s.len()).map(|i| i == best).collect();
                (s, p)
            }
        };
        scores.push(score_row);
        predictions.push(pred_row);
    }
    let labels: Vec<Vec<bool>> = docs.iter().map(|d| d.labels.clone()).collect();
    let (f1_micro, f1_macro) = f1_scores(&predictions, &labels)?;
    Ok(SplitEvaluation {
        scores,
        predictions,
        f1_micro,
        f1_macro,
    })
}

impl Model {
    pub fn evaluate(&self, docs: &[Document]) -> Result<SplitEvaluation> {
        evaluate_split(&self.config, &self.params, docs)
    }
}

/// Train on the corpus train split, validating per epoch: shuffle with a
/// seeded RNG, iterate mini-batches (forward, loss, backward, clip, step),
/// stop when validation F1-micro fails to improve for `patience`
/// consecutive epochs, and keep the best epoch's parameters.
pub fn train(corpus: &Corpus, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if corpus.train.is_empty() || corpus.valid.is_empty() {
        return Err(Error::invalid("train: empty train or valid split"));
    }
    if corpus.class_count != model_cfg.class_count {
        return Err(Error::config(format!(
            "corpus has {} classes, model expects {}",
            corpus.class_count, model_cfg.class_count
        )));
    }

    // One RNG drives init, shuffling and dropout, in that order.
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = crate::model::init_model_params(model_cfg, &mut rng)?;
    let mut optimizer = OptimizerState::new(&params);
    let positions = model_cfg.position_table();

    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut best_params = params.clone();
    let mut history = Vec::new();
    let mut truncated_tokens = 0u64;

    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let order = shuffled_indices(corpus.train.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            params.zero_grads();
            let inv_batch = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &doc_idx in batch {
                let doc = &corpus.train[doc_idx];
                let mut tape = Tape::new();
                let trace = forward_document(
                    &mut tape,
                    &params,
                    model_cfg,
                    &doc.tokens,
                    &positions,
                    &mut ForwardOptions {
                        dropout_rng: Some(&mut rng),
                        zero_length_output: false,
                        disable_positions: false,
                    },
                )?;
                truncated_tokens += trace.truncated_tokens as u64;
                let loss = crate::model::loss_for(
                    &mut tape,
                    trace.logits,
                    &doc.labels,
                    model_cfg.task_kind,
                )?;
                let scaled = tape.scale(loss, inv_batch);
                let value = tape.scalar(scaled)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                batch_loss += value;
                tape.backward(scaled, &mut params)?;
            }
            if let Some(clip) = train_cfg.grad_clip {
                let norm = params.grad_norm();
                if norm > clip {
                    params.scale_grads(clip / norm);
                }
            }
            adamw_step(&mut params, &mut optimizer, train_cfg)?;
            epoch_loss += batch_loss;
            n_batches += 1;
        }

        let valid = evaluate_split(model_cfg, &params, &corpus.valid)?;
        let (improved, stop) = stopper.observe(epoch, valid.f1_micro);
        if improved {
            best_params = params.clone();
        }
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            valid_f1_micro: valid.f1_micro,
            valid_f1_macro: valid.f1_macro,
            seconds: started.elapsed().as_secs_f64(),
        });
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        model: Model {
            config: model_cfg.clone(),
            params: best_params,
        },
        history,
        best_epoch: stopper.best_epoch(),
        truncated_tokens,
    })
}

/// History file: one row per epoch.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,valid_f1_micro,valid_f1_macro,seconds\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.valid_f1_micro, row.valid_f1_macro, row.seconds
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticConfig};
    use crate::encoder::EncoderConfig;
    use crate::numerics::Tensor2D;
    use crate::segmentation::KernelSpec;

    fn store_with(value: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor2D::from_vec(1, 1, vec![value]).unwrap())
            .unwrap();
        store
    }

    fn step_cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            grad_clip: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut store = store_with(0.0);
        store.accumulate_grad("w", &[1.0]).unwrap();
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &step_cfg(0.1, 0.0)).unwrap();
        let theta = store.get("w").unwrap().data()[0];
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((theta - expected).abs() < 1e-15, "{theta} vs {expected}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut store = store_with(1.0);
        store.accumulate_grad("w", &[1.0]).unwrap();
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &step_cfg(0.1, 0.01)).unwrap();
        let theta = store.get("w").unwrap().data()[0];
        // Same Adam move as above plus the decoupled -lr*wd*theta term.
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001;
        assert!((theta - expected).abs() < 1e-15, "{theta} vs {expected}");
    }

    #[test]
    fn adamw_zero_grad_leaves_parameter() {
        let mut store = store_with(0.7);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &step_cfg(0.1, 0.0)).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adamw_without_decay_matches_adam_oracle() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor2D::from_vec(1, 3, vec![0.2, -0.4, 1.0]).unwrap())
            .unwrap();
        let mut state = OptimizerState::new(&store);
        let cfg = step_cfg(0.05, 0.0);

        // Straight-line Adam, updated alongside.
        let mut theta = [0.2, -0.4, 1.0];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        let grads = [
            [0.3, -1.0, 0.8],
            [0.1, 0.2, -0.2],
            [-0.7, 0.5, 0.05],
            [0.0, 0.0, 1.0],
        ];
        for (t, g) in grads.iter().enumerate() {
            store.zero_grads();
            store.accumulate_grad("w", g).unwrap();
            adamw_step(&mut store, &mut state, &cfg).unwrap();
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                theta[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..3 {
                let got = store.get("w").unwrap().data()[i];
                assert!((got - theta[i]).abs() <= 1e-12, "step {t}: {got} vs {}", theta[i]);
            }
        }
    }

    #[test]
    fn adamw_requires_matching_state() {
        let mut store = store_with(0.0);
        let mut state = OptimizerState::new(&store);
        store
            .insert("extra", Tensor2D::zeros(1, 1))
            .unwrap();
        assert!(adamw_step(&mut store, &mut state, &step_cfg(0.1, 0.0)).is_err());
    }

    #[test]
    fn patience_counts_consecutive_non_improving_epochs() {
        // Valid F1 sequence [0.5, 0.4, 0.4, 0.4] with patience 3 stops
        // after epoch 4 with best = epoch 1.
        let mut stopper = EarlyStopping::new(3);
        assert_eq!(stopper.observe(1, 0.5), (true, false));
        assert_eq!(stopper.observe(2, 0.4), (false, false));
        assert_eq!(stopper.observe(3, 0.4), (false, false));
        assert_eq!(stopper.observe(4, 0.4), (false, true));
        assert_eq!(stopper.best_epoch(), 1);

        // Ties keep the earlier epoch.
        let mut stopper = EarlyStopping::new(2);
        stopper.observe(1, 0.6);
        stopper.observe(2, 0.6);
        assert_eq!(stopper.best_epoch(), 1);

        // A recovery resets the stale counter.
        let mut stopper = EarlyStopping::new(2);
        assert_eq!(stopper.observe(1, 0.5), (true, false));
        assert_eq!(stopper.observe(2, 0.4), (false, false));
        assert_eq!(stopper.observe(3, 0.7), (true, false));
        assert_eq!(stopper.best_epoch(), 3);
    }

    fn tiny_corpus(n: usize) -> Corpus {
        generate_synthetic_corpus(&SyntheticConfig {
            seed: 3,
            n_docs: n,
            len_min: 10,
            len_max: 48,
            class_count: 3,
            task_kind: TaskKind::MultiLabel,
        })
        .unwrap()
    }

    fn tiny_model_cfg(vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(vocab, 3, TaskKind::MultiLabel);
        cfg.kernels = vec![
            KernelSpec::non_overlapping(4, 8).unwrap(),
            KernelSpec::non_overlapping(8, 4).unwrap(),
        ];
        let enc = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout_rate: 0.1,
            vocab_size: 0,
        };
        cfg.segment_encoder = EncoderConfig {
            vocab_size: vocab,
            ..enc
        };
        cfg.document_encoder = enc;
        cfg.length_encoder = enc;
        cfg
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus = tiny_corpus(60);
        let model_cfg = tiny_model_cfg(corpus.vocab.size());
        let train_cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let a = train(&corpus, &model_cfg, &train_cfg).unwrap();
        let b = train(&corpus, &model_cfg, &train_cfg).unwrap();

        assert!(
            a.history.last().unwrap().train_loss < a.history[0].train_loss,
            "loss should drop: {:?}",
            a.history.iter().map(|h| h.train_loss).collect::<Vec<_>>()
        );

        // Identical history (timings aside) and identical parameters.
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.valid_f1_micro, y.valid_f1_micro);
            assert_eq!(x.valid_f1_macro, y.valid_f1_macro);
        }
        for (name, tensor) in a.model.params.iter() {
            assert_eq!(tensor.data(), b.model.params.get(name).unwrap().data());
        }

        // Best epoch attains the max validation score in the history.
        let best = a
            .history
            .iter()
            .map(|h| h.valid_f1_micro)
            .fold(f64::NEG_INFINITY, f64::max);
        let recorded = a
            .history
            .iter()
            .find(|h| h.epoch == a.best_epoch)
            .unwrap()
            .valid_f1_micro;
        assert_eq!(best, recorded);
    }

    #[test]
    fn gradients_zeroed_between_batches() {
        let corpus = tiny_corpus(20);
        let cfg = tiny_model_cfg(corpus.vocab.size());
        let model = Model::init(&cfg, 9).unwrap();
        let positions = cfg.position_table();
        let doc = &corpus.train[0];

        let mut params = model.params.clone();
        let norm_of_single = |params: &mut ParameterStore| -> f64 {
            params.zero_grads();
            let mut tape = Tape::new();
            let trace = forward_document(
                &mut tape,
                params,
                &cfg,
                &doc.tokens,
                &positions,
                &mut ForwardOptions::eval(),
            )
            .unwrap();
            let loss =
                crate::model::loss_for(&mut tape, trace.logits, &doc.labels, cfg.task_kind)
                    .unwrap();
            tape.backward(loss, params).unwrap();
            params.grad_norm()
        };
        let first = norm_of_single(&mut params);
        let second = norm_of_single(&mut params);
        assert_eq!(first, second);
    }

    #[test]
    fn evaluate_split_contracts() {
        let corpus = tiny_corpus(24);
        let cfg = tiny_model_cfg(corpus.vocab.size());
        let model = Model::init(&cfg, 2).unwrap();

        assert!(matches!(
            model.evaluate(&[]),
            Err(Error::UndefinedMetric(_))
        ));

        let eval_a = model.evaluate(&corpus.valid).unwrap();
        let eval_b = model.evaluate(&corpus.valid).unwrap();
        assert_eq!(eval_a.scores, eval_b.scores);
        assert_eq!(eval_a.predictions, eval_b.predictions);

        // Saturated logits map to hard predictions.
        let s = [sigmoid(-20.0), sigmoid(20.0)];
        assert!(s[0] < 0.5 && s[1] >= 0.5);

        // Class-count mismatch is rejected.
        let mut bad = corpus.valid[0].clone();
        bad.labels = vec![true; 7];
        assert!(model.evaluate(&[bad]).is_err());
    }

    #[test]
    fn mismatched_class_count_fails_before_training() {
        let corpus = tiny_corpus(20);
        let mut cfg = tiny_model_cfg(corpus.vocab.size());
        cfg.class_count = 5;
        assert!(train(&corpus, &cfg, &TrainConfig::default()).is_err());
    }

    #[test]
    fn history_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(
            &path,
            &[EpochStats {
                epoch: 1,
                train_loss: 0.5,
                valid_f1_micro: 0.25,
                valid_f1_macro: 0.125,
                seconds: 0.75,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,valid_f1_micro,valid_f1_macro,seconds\n1,0.5,0.25,0.125,0.75\n"
        );
    }
}

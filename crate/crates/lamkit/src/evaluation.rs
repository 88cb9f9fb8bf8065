//! Metrics (micro/macro F1 and ROC-AUC), length-quartile stratified
//! evaluation, ablation-variant construction, and the multi-seed
//! experiment runner with CSV/JSON reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{evaluate_split, train, EpochStats, TrainConfig};

/// Micro F1 over globally pooled counts and macro F1 as the unweighted
/// per-class mean; a class with no TP, FP or FN contributes 0 to macro.
pub fn f1_scores(predictions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "f1_scores",
            format!("{} prediction rows", predictions.len()),
            format!("{} label rows", labels.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("f1_scores: no documents".to_string()));
    }
    let classes = labels[0].len();
    for (p, l) in predictions.iter().zip(labels) {
        if p.len() != classes || l.len() != classes {
            return Err(Error::shape(
                "f1_scores",
                format!("{classes} classes"),
                format!("{}/{} classes", p.len(), l.len()),
            ));
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut macro_sum = 0.0;
    for c in 0..classes {
        let (mut ctp, mut cfp, mut cfn) = (0usize, 0usize, 0usize);
        for (p, l) in predictions.iter().zip(labels) {
            match (p[c], l[c]) {
                (true, true) => ctp += 1,
                (true, false) => cfp += 1,
                (false, true) => cfn += 1,
                (false, false) => {}
            }
        }
        tp += ctp;
        fp += cfp;
        fn_ += cfn;
        macro_sum += f1(ctp, cfp, cfn);
    }
    Ok((f1(tp, fp, fn_), macro_sum / classes as f64))
}

/// Mann-Whitney AUC with ties counted 0.5, via midranks.
fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Micro AUC over the flattened (document, class) pairs; macro AUC as the
/// mean over classes that have both a positive and a negative, skipping
/// degenerate classes.
pub fn auc_scores(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc_scores",
            format!("{} score rows", scores.len()),
            format!("{} label rows", labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("auc_scores: no documents".to_string()));
    }
    let classes = labels[0].len();
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != classes || l.len() != classes {
            return Err(Error::shape(
                "auc_scores",
                format!("{classes} classes"),
                format!("{}/{} classes", s.len(), l.len()),
            ));
        }
    }

    let flat_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_labels: Vec<bool> = labels.iter().flatten().copied().collect();
    let micro = binary_auc(&flat_scores, &flat_labels).ok_or_else(|| {
        Error::UndefinedMetric("auc_scores: need at least one positive and one negative".to_string())
    })?;

    let mut macro_sum = 0.0;
    let mut macro_classes = 0usize;
    for c in 0..classes {
        let col_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let col_labels: Vec<bool> = labels.iter().map(|row| row[c]).collect();
        if let Some(auc) = binary_auc(&col_scores, &col_labels) {
            macro_sum += auc;
            macro_classes += 1;
        }
    }
    if macro_classes == 0 {
        return Err(Error::UndefinedMetric(
            "auc_scores: every class is single-valued".to_string(),
        ));
    }
    Ok((micro, macro_sum / macro_classes as f64))
}

/// Equal-count length strata of a document list.
#[derive(Clone, Debug)]
pub struct QuarterSplit {
    /// Indices into the input list, one vector per quarter.
    pub quarters: [Vec<usize>; 4],
    /// Min/max token count inside each quarter.
    pub boundaries: [(usize, usize); 4],
}

/// Stable-sort by (token_count, id) and cut into 4 contiguous groups whose
/// sizes differ by at most one, larger groups first.
pub fn quarter_split(docs: &[Document]) -> Result<QuarterSplit> {
    if docs.len() < 4 {
        return Err(Error::invalid(format!(
            "quarter_split: need at least 4 documents, got {}",
            docs.len()
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| {
        docs[a]
            .token_count()
            .cmp(&docs[b].token_count())
            .then_with(|| docs[a].id.cmp(&docs[b].id))
    });
    let base = docs.len() / 4;
    let remainder = docs.len() % 4;
    let mut quarters: [Vec<usize>; 4] = Default::default();
    let mut boundaries = [(0usize, 0usize); 4];
    let mut cursor = 0;
    for q in 0..4 {
        let size = base + usize::from(q < remainder);
        let slice = &order[cursor..cursor + size];
        boundaries[q] = (
            docs[slice[0]].token_count(),
            docs[slice[size - 1]].token_count(),
        );
        quarters[q] = slice.to_vec();
        cursor += size;
    }
    Ok(QuarterSplit {
        quarters,
        boundaries,
    })
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    WithoutMultiKernel,
    WithoutLengthVectors,
    WithoutBoth,
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::Full,
    Variant::WithoutMultiKernel,
    Variant::WithoutLengthVectors,
    Variant::WithoutBoth,
];

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutMultiKernel => "wo_mk",
            Variant::WithoutLengthVectors => "wo_lav",
            Variant::WithoutBoth => "wo_both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "wo_mk" => Ok(Variant::WithoutMultiKernel),
            "wo_lav" => Ok(Variant::WithoutLengthVectors),
            "wo_both" => Ok(Variant::WithoutBoth),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Derive an ablated config: `wo_mk` keeps only the largest kernel,
/// `wo_lav` drops segment positions, length vectors and the length
/// encoder, `wo_both` applies both.
pub fn build_ablation(base: &ModelConfig, variant: Variant) -> Result<ModelConfig> {
    base.validate()?;
    let mut cfg = base.clone();
    if matches!(variant, Variant::WithoutMultiKernel | Variant::WithoutBoth) {
        let largest = *cfg
            .kernels
            .iter()
            .max_by_key(|k| k.kernel_size)
            .ok_or_else(|| Error::config("empty kernel set"))?;
        cfg.kernels = vec![largest];
    }
    if matches!(variant, Variant::WithoutLengthVectors | Variant::WithoutBoth) {
        cfg.use_length_vectorization = false;
    }
    Ok(cfg)
}

/// One report line: metrics for one (variant, seed, split, quarter) cell.
/// Quarter 0 is the whole split.
#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub quarter: usize,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub auc_micro: f64,
    pub auc_macro: f64,
    pub boundary_low: usize,
    pub boundary_high: usize,
}

/// Everything produced by one trained run.
#[derive(Clone, Debug)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn metrics_row(
    variant: Variant,
    seed: u64,
    split: &str,
    quarter: usize,
    boundary: (usize, usize),
    scores: &[Vec<f64>],
    predictions: &[Vec<bool>],
    labels: &[Vec<bool>],
) -> Result<ReportRow> {
    let (f1_micro, f1_macro) = f1_scores(predictions, labels)?;
    let (auc_micro, auc_macro) = auc_scores(scores, labels)?;
    Ok(ReportRow {
        variant: variant.as_str().to_string(),
        seed,
        split: split.to_string(),
        quarter,
        f1_micro,
        f1_macro,
        auc_micro,
        auc_macro,
        boundary_low: boundary.0,
        boundary_high: boundary.1,
    })
}

/// Train one variant on one seed and evaluate the test split overall and
/// per length quarter.
pub fn run_single(
    corpus: &Corpus,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<EvaluationReport> {
    let cfg = build_ablation(base_cfg, variant)?;
    let run_train_cfg = TrainConfig { seed, ..*train_cfg };
    let outcome = train(corpus, &cfg, &run_train_cfg)?;

    let test = &corpus.test;
    let eval = evaluate_split(&cfg, &outcome.model.params, test)?;
    let labels: Vec<Vec<bool>> = test.iter().map(|d| d.labels.clone()).collect();
    let lengths: Vec<usize> = test.iter().map(|d| d.token_count()).collect();
    let overall_bounds = (
        *lengths.iter().min().unwrap_or(&0),
        *lengths.iter().max().unwrap_or(&0),
    );

    let mut rows = vec![metrics_row(
        variant,
        seed,
        "test",
        0,
        overall_bounds,
        &eval.scores,
        &eval.predictions,
        &labels,
    )?];

    let quarters = quarter_split(test)?;
    for (q, indices) in quarters.quarters.iter().enumerate() {
        let scores: Vec<Vec<f64>> = indices.iter().map(|&i| eval.scores[i].clone()).collect();
        let preds: Vec<Vec<bool>> = indices.iter().map(|&i| eval.predictions[i].clone()).collect();
        let labs: Vec<Vec<bool>> = indices.iter().map(|&i| labels[i].clone()).collect();
        rows.push(metrics_row(
            variant,
            seed,
            "test",
            q + 1,
            quarters.boundaries[q],
            &scores,
            &preds,
            &labs,
        )?);
    }

    Ok(EvaluationReport {
        variant,
        seed,
        rows,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

pub const REPORT_HEADER: &str =
    "variant,seed,split,quarter,f1_micro,f1_macro,auc_micro,auc_macro,boundary_low,boundary_high";

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.split,
            r.quarter,
            r.f1_micro,
            r.f1_macro,
            r.auc_micro,
            r.auc_macro,
            r.boundary_low,
            r.boundary_high
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct AggregateCell {
    mean: BTreeMap<String, f64>,
    per_seed: BTreeMap<String, Vec<f64>>,
    boundary_low: usize,
    boundary_high: usize,
}

/// Canonical-JSON aggregate: per variant and quarter, the per-seed metric
/// vectors (seed order) and their means.
pub fn write_aggregate_json(path: &Path, rows: &[ReportRow], seeds: &[u64]) -> Result<()> {
    let mut tree: BTreeMap<String, BTreeMap<String, AggregateCell>> = BTreeMap::new();
    for row in rows {
        let by_quarter = tree.entry(row.variant.clone()).or_default();
        let cell = by_quarter
            .entry(format!("q{}", row.quarter))
            .or_insert_with(|| AggregateCell {
                mean: BTreeMap::new(),
                per_seed: BTreeMap::new(),
                boundary_low: row.boundary_low,
                boundary_high: row.boundary_high,
            });
        for (metric, value) in [
            ("f1_micro", row.f1_micro),
            ("f1_macro", row.f1_macro),
            ("auc_micro", row.auc_micro),
            ("auc_macro", row.auc_macro),
        ] {
            cell.per_seed.entry(metric.to_string()).or_default().push(value);
        }
    }
    for by_quarter in tree.values_mut() {
        for cell in by_quarter.values_mut() {
            for (metric, values) in &cell.per_seed {
                cell.mean.insert(
                    metric.clone(),
                    values.iter().sum::<f64>() / values.len() as f64,
                );
            }
        }
    }
    #[derive(Serialize)]
    struct Aggregate<'a> {
        seeds: &'a [u64],
        variants: BTreeMap<String, BTreeMap<String, AggregateCell>>,
    }
    let doc = Aggregate {
        seeds,
        variants: tree,
    };
    let mut file = std::fs::File::create(path)?;
    file.write_all(serde_json::to_string_pretty(&doc)?.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Train every (variant, seed) pair and emit `report.csv`,
/// `aggregate.json` and per-run history files under `out_dir`. Runs are
/// independent and deterministic, so they execute in parallel; outputs are
/// assembled in (variant, seed) order. On failure the completed rows are
/// still flushed before the error propagates.
pub fn run_experiment(
    corpus: &Corpus,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<EvaluationReport>> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::config("run_experiment: need at least one variant and one seed"));
    }
    std::fs::create_dir_all(out_dir)?;
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;

    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<EvaluationReport>> = jobs
        .par_iter()
        .map(|&(variant, seed)| run_single(corpus, base_cfg, train_cfg, variant, seed))
        .collect();

    let mut reports = Vec::new();
    let mut failure = None;
    for result in results {
        match result {
            Ok(report) => reports.push(report),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    let rows: Vec<ReportRow> = reports.iter().flat_map(|r| r.rows.clone()).collect();
    write_report_csv(&out_dir.join("report.csv"), &rows)?;
    write_aggregate_json(&out_dir.join("aggregate.json"), &rows, seeds)?;
    for report in &reports {
        crate::training::write_history_csv(
            &runs_dir.join(format!("{}-seed{}.history.csv", report.variant, report.seed)),
            &report.history,
        )?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticConfig, TaskKind};
    use crate::encoder::encoder_param_count;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Definition-level oracles, no shared code with the implementations.
    fn oracle_f1(predictions: &[Vec<bool>], labels: &[Vec<bool>]) -> (f64, f64) {
        let classes = labels[0].len();
        let per_class_f1 = |c: usize| -> f64 {
            let tp = predictions
                .iter()
                .zip(labels)
                .filter(|(p, l)| p[c] && l[c])
                .count() as f64;
            let pred_pos = predictions.iter().filter(|p| p[c]).count() as f64;
            let true_pos = labels.iter().filter(|l| l[c]).count() as f64;
            if pred_pos == 0.0 && true_pos == 0.0 {
                return 0.0;
            }
            let precision = if pred_pos == 0.0 { 0.0 } else { tp / pred_pos };
            let recall = if true_pos == 0.0 { 0.0 } else { tp / true_pos };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        };
        let tp: f64 = (0..classes)
            .map(|c| {
                predictions
                    .iter()
                    .zip(labels)
                    .filter(|(p, l)| p[c] && l[c])
                    .count() as f64
            })
            .sum();
        let pred_pos: f64 = predictions.iter().flatten().filter(|&&b| b).count() as f64;
        let true_pos: f64 = labels.iter().flatten().filter(|&&b| b).count() as f64;
        let micro = if pred_pos + true_pos == 0.0 {
            0.0
        } else {
            let p = if pred_pos == 0.0 { 0.0 } else { tp / pred_pos };
            let r = if true_pos == 0.0 { 0.0 } else { tp / true_pos };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        let macro_f1 = (0..classes).map(per_class_f1).sum::<f64>() / classes as f64;
        (micro, macro_f1)
    }

    fn oracle_pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        if pairs == 0.0 {
            None
        } else {
            Some(wins / pairs)
        }
    }

    fn oracle_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<(f64, f64)> {
        let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
        let micro = oracle_pairwise_auc(&flat_s, &flat_l)?;
        let classes = labels[0].len();
        let mut sum = 0.0;
        let mut count = 0;
        for c in 0..classes {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            if let Some(a) = oracle_pairwise_auc(&s, &l) {
                sum += a;
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        Some((micro, sum / count as f64))
    }

    #[test]
    fn f1_hand_cases() {
        // Perfect predictions.
        let labels = vec![vec![true, false], vec![false, true]];
        let (micro, macro_) = f1_scores(&labels, &labels).unwrap();
        assert_eq!((micro, macro_), (1.0, 1.0));

        // Global TP=2, FP=1, FN=1 -> micro 2/3.
        let predictions = vec![vec![true, true], vec![true, false]];
        let labels = vec![vec![true, false], vec![true, true]];
        let (micro, _) = f1_scores(&predictions, &labels).unwrap();
        assert!((micro - 2.0 / 3.0).abs() < 1e-15);

        // All-negative predictions with positives present.
        let predictions = vec![vec![false, false]];
        let labels = vec![vec![true, false]];
        let (micro, macro_) = f1_scores(&predictions, &labels).unwrap();
        assert_eq!(micro, 0.0);
        assert_eq!(macro_, 0.0);

        assert!(f1_scores(&predictions, &[vec![true]]).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        // Perfect ranking.
        let scores = vec![vec![0.9], vec![0.8], vec![0.2], vec![0.1]];
        let labels = vec![vec![true], vec![true], vec![false], vec![false]];
        let (micro, macro_) = auc_scores(&scores, &labels).unwrap();
        assert_eq!((micro, macro_), (1.0, 1.0));

        // 2 pos, 2 neg, one inverted pair of the 4: AUC = 0.75.
        let scores = vec![vec![0.9], vec![0.3], vec![0.4], vec![0.1]];
        let labels = vec![vec![true], vec![true], vec![false], vec![false]];
        let (micro, _) = auc_scores(&scores, &labels).unwrap();
        assert!((micro - 0.75).abs() < 1e-15);

        // Identical scores everywhere: all ties, AUC = 0.5.
        let scores = vec![vec![0.5], vec![0.5], vec![0.5]];
        let labels = vec![vec![true], vec![false], vec![false]];
        let (micro, macro_) = auc_scores(&scores, &labels).unwrap();
        assert_eq!((micro, macro_), (0.5, 0.5));

        // Micro undefined without both a positive and a negative.
        let labels = vec![vec![true], vec![true]];
        assert!(matches!(
            auc_scores(&vec![vec![0.1], vec![0.2]], &labels),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn macro_auc_skips_degenerate_classes() {
        // Class 1 is all-positive: skipped, macro equals class 0's AUC.
        let scores = vec![vec![0.9, 0.3], vec![0.1, 0.6]];
        let labels = vec![vec![true, true], vec![false, true]];
        let (_, macro_) = auc_scores(&scores, &labels).unwrap();
        assert_eq!(macro_, 1.0);
    }

    #[test]
    fn metrics_match_oracles_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(515);
        for _ in 0..1000 {
            let docs = rng.random_range(1..=12);
            let classes = rng.random_range(1..=6);
            let mut predictions = Vec::new();
            let mut labels = Vec::new();
            let mut scores = Vec::new();
            for _ in 0..docs {
                predictions.push((0..classes).map(|_| rng.random_range(0..2) == 1).collect::<Vec<bool>>());
                labels.push((0..classes).map(|_| rng.random_range(0..2) == 1).collect::<Vec<bool>>());
                // Coarse grid makes ties common.
                scores.push(
                    (0..classes)
                        .map(|_| rng.random_range(0..5) as f64 / 4.0)
                        .collect::<Vec<f64>>(),
                );
            }
            let (micro, macro_) = f1_scores(&predictions, &labels).unwrap();
            let (om, oma) = oracle_f1(&predictions, &labels);
            assert!((micro - om).abs() <= 1e-9, "micro {micro} vs oracle {om}");
            assert!((macro_ - oma).abs() <= 1e-9, "macro {macro_} vs oracle {oma}");

            match (auc_scores(&scores, &labels), oracle_auc(&scores, &labels)) {
                (Ok((am, ama)), Some((om, oma))) => {
                    assert!((am - om).abs() <= 1e-9, "auc micro {am} vs {om}");
                    assert!((ama - oma).abs() <= 1e-9, "auc macro {ama} vs {oma}");
                }
                (Err(_), None) => {}
                (got, want) => panic!("definedness mismatch: {got:?} vs {want:?}"),
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn f1_invariant_under_class_permutation(
            rows in proptest::collection::vec(proptest::collection::vec(proptest::bool::ANY, 4), 2..10),
            labels in proptest::collection::vec(proptest::collection::vec(proptest::bool::ANY, 4), 2..10),
        ) {
            let n = rows.len().min(labels.len());
            let predictions = &rows[..n];
            let labels = &labels[..n];
            let perm = [2usize, 0, 3, 1];
            let permute = |v: &[Vec<bool>]| -> Vec<Vec<bool>> {
                v.iter().map(|row| perm.iter().map(|&i| row[i]).collect()).collect()
            };
            let (m1, ma1) = f1_scores(predictions, labels).unwrap();
            let (m2, ma2) = f1_scores(&permute(predictions), &permute(labels)).unwrap();
            proptest::prop_assert!((m1 - m2).abs() < 1e-12);
            proptest::prop_assert!((ma1 - ma2).abs() < 1e-12);

            // Macro and micro are also invariant under document permutation.
            let mut rev_p: Vec<Vec<bool>> = predictions.to_vec();
            rev_p.reverse();
            let mut rev_l: Vec<Vec<bool>> = labels.to_vec();
            rev_l.reverse();
            let (m3, ma3) = f1_scores(&rev_p, &rev_l).unwrap();
            proptest::prop_assert!((m1 - m3).abs() < 1e-12);
            proptest::prop_assert!((ma1 - ma3).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 4..40),
        ) {
            let scores: Vec<Vec<f64>> = raw.iter().map(|(s, _)| vec![*s]).collect();
            let labels: Vec<Vec<bool>> = raw.iter().map(|(_, l)| vec![*l]).collect();
            let transformed: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| vec![(3.0 * r[0] + 1.0).exp()])
                .collect();
            match (auc_scores(&scores, &labels), auc_scores(&transformed, &labels)) {
                (Ok((a, am)), Ok((b, bm))) => {
                    proptest::prop_assert!((a - b).abs() < 1e-12);
                    proptest::prop_assert!((am - bm).abs() < 1e-12);
                }
                (Err(_), Err(_)) => {}
                other => proptest::prop_assert!(false, "definedness changed: {other:?}"),
            }
        }
    }

    fn doc(id: &str, len: usize) -> Document {
        Document {
            id: id.to_string(),
            tokens: vec![4; len],
            labels: vec![true, false],
        }
    }

    #[test]
    fn quarters_partition_and_balance() {
        let docs: Vec<Document> = (1..=8).map(|n| doc(&format!("d{n}"), n)).collect();
        let qs = quarter_split(&docs).unwrap();
        let lengths: Vec<Vec<usize>> = qs
            .quarters
            .iter()
            .map(|q| q.iter().map(|&i| docs[i].token_count()).collect())
            .collect();
        assert_eq!(lengths, vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]]);
        assert_eq!(qs.boundaries, [(1, 2), (3, 4), (5, 6), (7, 8)]);

        // 9 documents: remainder-first sizes (3, 2, 2, 2).
        let docs: Vec<Document> = (1..=9).map(|n| doc(&format!("d{n}"), n)).collect();
        let qs = quarter_split(&docs).unwrap();
        let sizes: Vec<usize> = qs.quarters.iter().map(|q| q.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2]);

        // Equal lengths: ties broken by id, sizes still balanced.
        let docs: Vec<Document> = (0..10).map(|n| doc(&format!("d{n}"), 5)).collect();
        let qs = quarter_split(&docs).unwrap();
        let sizes: Vec<usize> = qs.quarters.iter().map(|q| q.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);

        // Partition: disjoint union covers the input.
        let mut seen: Vec<usize> = qs.quarters.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        assert!(quarter_split(&docs[..3]).is_err());
    }

    #[test]
    fn ablation_structure() {
        let base = ModelConfig::desk_default(50, 4, TaskKind::MultiLabel);

        let wo_mk = build_ablation(&base, Variant::WithoutMultiKernel).unwrap();
        assert_eq!(wo_mk.kernels.len(), 1);
        assert_eq!(wo_mk.kernels[0].kernel_size, 32);
        assert!(wo_mk.use_length_vectorization);

        let wo_lav = build_ablation(&base, Variant::WithoutLengthVectors).unwrap();
        assert_eq!(
            base.param_count() - wo_lav.param_count(),
            encoder_param_count(&base.length_encoder)
        );

        // wo_both of a single-kernel config equals its wo_lav.
        let mut single = base.clone();
        single.kernels = vec![base.kernels[2]];
        let a = build_ablation(&single, Variant::WithoutBoth).unwrap();
        let b = build_ablation(&single, Variant::WithoutLengthVectors).unwrap();
        assert_eq!(a, b);

        assert_eq!(build_ablation(&base, Variant::Full).unwrap(), base);
    }

    #[test]
    fn experiment_emits_expected_rows() {
        let corpus = generate_synthetic_corpus(&SyntheticConfig {
            seed: 5,
            n_docs: 60,
            len_min: 8,
            len_max: 40,
            class_count: 3,
            task_kind: TaskKind::MultiLabel,
        })
        .unwrap();
        let mut cfg = ModelConfig::desk_default(corpus.vocab.size(), 3, TaskKind::MultiLabel);
        cfg.kernels = vec![
            crate::segmentation::KernelSpec::non_overlapping(4, 6).unwrap(),
            crate::segmentation::KernelSpec::non_overlapping(8, 3).unwrap(),
        ];
        cfg.segment_encoder.layers = 1;
        cfg.segment_encoder.d_model = 8;
        cfg.segment_encoder.d_ff = 16;
        cfg.document_encoder = crate::encoder::EncoderConfig {
            vocab_size: 0,
            ..cfg.segment_encoder
        };
        cfg.length_encoder = cfg.document_encoder;
        cfg.segment_encoder.vocab_size = corpus.vocab.size();
        let train_cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };

        let dir = tempfile::tempdir().unwrap();
        let reports = run_experiment(
            &corpus,
            &cfg,
            &train_cfg,
            &[Variant::Full, Variant::WithoutBoth],
            &[1],
            dir.path(),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        for report in &reports {
            assert_eq!(report.rows.len(), 5, "overall plus four quarters");
        }
        // Quarter boundaries agree with quarter_split on the test split.
        let qs = quarter_split(&corpus.test).unwrap();
        for report in &reports {
            for (q, row) in report.rows[1..].iter().enumerate() {
                assert_eq!(
                    (row.boundary_low, row.boundary_high),
                    qs.boundaries[q]
                );
            }
        }
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("aggregate.json").exists());
        assert!(dir.path().join("runs/full-seed1.history.csv").exists());
    }
}

//! Tokenization, corpus ingestion, and a synthetic length-correlated
//! corpus generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

/// Token/id bijection with fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// One `token<TAB>id` line per entry, reserved ids first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, token) in self.tokens.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (token, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::corpus(i + 1, "vocabulary line missing tab"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::corpus(i + 1, format!("bad vocabulary id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::corpus(i + 1, format!("vocabulary ids not dense at {id}")));
            }
            tokens.push(token.to_string());
        }
        for (id, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(|s| s.as_str()) != Some(*reserved) {
                return Err(Error::invalid(format!(
                    "vocabulary file missing reserved token {reserved} at id {id}"
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

/// Lowercased alphanumeric runs; whitespace and punctuation separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Build a vocabulary over tokens with frequency >= `min_freq`, assigning
/// ids after the reserved range in (frequency desc, token asc) order.
pub fn build_vocab(texts: &[String], min_freq: usize) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::invalid("build_vocab: empty text list"));
    }
    if min_freq < 1 {
        return Err(Error::invalid("build_vocab: min_freq must be >= 1"));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for token in tokenize(text) {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, count)| *count >= min_freq)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocabulary::with_reserved();
    for (token, _) in entries {
        vocab.push(token);
    }
    Ok(vocab)
}

/// Tokenize and map to ids; out-of-vocabulary tokens become `UNK_ID`.
pub fn encode_text(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid("encode_text: empty document"));
    }
    Ok(tokens
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect())
}

/// Task target structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiLabel,
    SingleLabel,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::MultiLabel => "multi_label",
            TaskKind::SingleLabel => "single_label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi_label" => Ok(TaskKind::MultiLabel),
            "single_label" => Ok(TaskKind::SingleLabel),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token-id sequence with a stable id and multi-hot labels. CLS/SEP are
/// added at segmentation, never stored here.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    pub labels: Vec<bool>,
}

impl Document {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
    pub class_count: usize,
    pub task_kind: TaskKind,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Document] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn total_docs(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    fn check_ids_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for doc in self
            .train
            .iter()
            .chain(self.valid.iter())
            .chain(self.test.iter())
        {
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::invalid(format!("duplicate document id {}", doc.id)));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    text: String,
    labels: Vec<usize>,
    split: String,
}

fn labels_to_multihot(
    labels: &[usize],
    class_count: usize,
    task_kind: TaskKind,
    line: usize,
) -> Result<Vec<bool>> {
    let mut hot = vec![false; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(Error::corpus(
                line,
                format!("label index {l} >= class count {class_count}"),
            ));
        }
        hot[l] = true;
    }
    if task_kind == TaskKind::SingleLabel && hot.iter().filter(|&&b| b).count() != 1 {
        return Err(Error::corpus(
            line,
            "single-label document must carry exactly one label",
        ));
    }
    Ok(hot)
}

/// Load a JSON-lines corpus. Each line holds `id`, `text`, `labels`
/// (class-index array) and `split` ("train" | "valid" | "test"). The
/// vocabulary is built from the train split only.
pub fn load_jsonl_corpus(
    path: &Path,
    class_count: usize,
    task_kind: TaskKind,
    min_freq: usize,
) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records: Vec<(usize, JsonlRecord)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line)
            .map_err(|e| Error::corpus(i + 1, format!("malformed record: {e}")))?;
        records.push((i + 1, record));
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "no documents in {}",
            path.display()
        )));
    }

    let train_texts: Vec<String> = records
        .iter()
        .filter(|(_, r)| r.split == "train")
        .map(|(_, r)| r.text.clone())
        .collect();
    if train_texts.is_empty() {
        return Err(Error::invalid("corpus has no train split"));
    }
    let vocab = build_vocab(&train_texts, min_freq)?;

    let mut corpus = Corpus {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        class_count,
        task_kind,
        vocab,
    };
    for (line, record) in records {
        let tokens = encode_text(&record.text, &corpus.vocab)
            .map_err(|e| Error::corpus(line, e.to_string()))?;
        let labels = labels_to_multihot(&record.labels, class_count, task_kind, line)?;
        let doc = Document {
            id: record.id,
            tokens,
            labels,
        };
        match record.split.as_str() {
            "train" => corpus.train.push(doc),
            "valid" => corpus.valid.push(doc),
            "test" => corpus.test.push(doc),
            other => {
                return Err(Error::corpus(line, format!("unknown split {other:?}")));
            }
        }
    }
    corpus.check_ids_unique()?;
    Ok(corpus)
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub class_count: usize,
    pub task_kind: TaskKind,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 1,
            n_docs: 1000,
            len_min: 20,
            len_max: 640,
            class_count: 4,
            task_kind: TaskKind::MultiLabel,
        }
    }
}

const FILLER_POOL: usize = 200;
/// Planting probability for the length-coupled class 0, by length quartile.
const LENGTH_CLASS_RATE: [f64; 4] = [0.15, 0.35, 0.65, 0.85];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Theoretical log-uniform quartile bucket (0..4) of a length.
fn length_bucket(len: usize, len_min: usize, len_max: usize) -> usize {
    if len_max == len_min {
        return 0;
    }
    let lo = (len_min as f64).ln();
    let hi = (len_max as f64).ln();
    let frac = ((len as f64).ln() - lo) / (hi - lo);
    match frac {
        f if f < 0.25 => 0,
        f if f < 0.5 => 1,
        f if f < 0.75 => 2,
        _ => 3,
    }
}

/// Generate a deterministic corpus whose labels depend on planted
/// signature keywords (uniformly positioned, so signal lives beyond any
/// single kernel window) and, for class 0, on the document's length
/// quartile; ~10% of tokens are markers naming that quartile. Fillers are
/// drawn from a Zipf-distributed pool. Splits are 70/15/15 by id hash.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    if cfg.len_min < 1 || cfg.len_min > cfg.len_max {
        return Err(Error::invalid(format!(
            "generate_synthetic_corpus: bad length range {}..{}",
            cfg.len_min, cfg.len_max
        )));
    }
    if cfg.class_count < 2 {
        return Err(Error::invalid(
            "generate_synthetic_corpus: class_count must be >= 2",
        ));
    }
    if cfg.n_docs < 1 {
        return Err(Error::invalid("generate_synthetic_corpus: n_docs must be >= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf = rand_distr::Zipf::new(FILLER_POOL as f64, 1.1)
        .map_err(|e| Error::invalid(format!("zipf: {e}")))?;

    let mut texts: Vec<(String, String, Vec<bool>)> = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let id = format!("doc{i:05}");
        // Log-uniform length.
        let u = rng.random_range((cfg.len_min as f64).ln()..=(cfg.len_max as f64).ln());
        let len = (u.exp().round() as usize).clamp(cfg.len_min, cfg.len_max);
        let bucket = length_bucket(len, cfg.len_min, cfg.len_max);

        // Labels first, then plant accordingly.
        let mut labels = vec![false; cfg.class_count];
        match cfg.task_kind {
            TaskKind::MultiLabel => {
                for (c, label) in labels.iter_mut().enumerate() {
                    let p = if c == 0 { LENGTH_CLASS_RATE[bucket] } else { 0.5 };
                    *label = rng.random_range(0.0..1.0) < p;
                }
            }
            TaskKind::SingleLabel => {
                let mut weights: Vec<f64> = vec![1.0; cfg.class_count];
                weights[0] = 4.0 * LENGTH_CLASS_RATE[bucket];
                let total: f64 = weights.iter().sum();
                let mut draw = rng.random_range(0.0..total);
                let mut chosen = cfg.class_count - 1;
                for (c, w) in weights.iter().enumerate() {
                    if draw < *w {
                        chosen = c;
                        break;
                    }
                    draw -= w;
                }
                labels[chosen] = true;
            }
        }

        // Zipf filler stream.
        let mut tokens: Vec<String> = (0..len)
            .map(|_| {
                let rank = zipf.sample(&mut rng) as usize;
                format!("w{:03}", rank.clamp(1, FILLER_POOL) - 1)
            })
            .collect();

        // Length-quartile markers on ~10% of positions.
        let n_markers = (len / 10).max(1);
        let marker = format!("lenq{}", bucket + 1);
        let marker_positions = rand::seq::index::sample(&mut rng, len, n_markers.min(len));
        for p in marker_positions.iter() {
            tokens[p] = marker.clone();
        }

        // Signature keywords for positive classes, uniform positions,
        // distinct so one class never erases another's only copy.
        let positive: Vec<usize> = (0..cfg.class_count).filter(|&c| labels[c]).collect();
        if !positive.is_empty() {
            let copies_per_class = 1 + len / 100;
            let wanted = (positive.len() * copies_per_class).min(len);
            let positions = rand::seq::index::sample(&mut rng, len, wanted);
            for (slot, p) in positions.iter().enumerate() {
                // Round-robin guarantees every positive class appears once
                // before extra copies are spent.
                let class = positive[slot % positive.len()];
                tokens[p] = format!("sig{class}");
            }
        }

        texts.push((id, tokens.join(" "), labels));
    }

    // 70/15/15 split by id-hash ranking.
    let mut order: Vec<usize> = (0..cfg.n_docs).collect();
    order.sort_by_key(|&i| (fnv1a(texts[i].0.as_bytes()), i));
    let n_train = cfg.n_docs * 70 / 100;
    let n_valid = cfg.n_docs * 15 / 100;
    let mut split_of = vec![Split::Test; cfg.n_docs];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let train_texts: Vec<String> = texts
        .iter()
        .zip(&split_of)
        .filter(|(_, s)| **s == Split::Train)
        .map(|((_, text, _), _)| text.clone())
        .collect();
    if train_texts.is_empty() {
        return Err(Error::invalid("synthetic corpus too small for a train split"));
    }
    let vocab = build_vocab(&train_texts, 1)?;

    let mut corpus = Corpus {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        class_count: cfg.class_count,
        task_kind: cfg.task_kind,
        vocab,
    };
    for ((id, text, labels), split) in texts.into_iter().zip(split_of) {
        let tokens = encode_text(&text, &corpus.vocab)?;
        let doc = Document { id, tokens, labels };
        match split {
            Split::Train => corpus.train.push(doc),
            Split::Valid => corpus.valid.push(doc),
            Split::Test => corpus.test.push(doc),
        }
    }
    corpus.check_ids_unique()?;
    Ok(corpus)
}

/// Nearest-rank quantile of a sorted slice: the `ceil(p*n)`-th value.
pub fn nearest_rank_quantile(sorted: &[usize], p: f64) -> usize {
    assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Length and label statistics for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitStats {
    pub q25: usize,
    pub q50: usize,
    pub q75: usize,
    pub mean_len: f64,
    pub size: usize,
    pub label_count: usize,
}

pub fn split_stats(docs: &[Document], class_count: usize) -> Result<SplitStats> {
    if docs.is_empty() {
        return Err(Error::invalid("split_stats: empty split"));
    }
    let mut lengths: Vec<usize> = docs.iter().map(|d| d.token_count()).collect();
    lengths.sort_unstable();
    let total: usize = lengths.iter().sum();
    Ok(SplitStats {
        q25: nearest_rank_quantile(&lengths, 0.25),
        q50: nearest_rank_quantile(&lengths, 0.50),
        q75: nearest_rank_quantile(&lengths, 0.75),
        mean_len: total as f64 / docs.len() as f64,
        size: docs.len(),
        label_count: class_count,
    })
}

/// Shuffle helper used by the training loop; lives here so all corpus
/// ordering concerns share one RNG discipline.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_folds_case_and_punctuation() {
        assert_eq!(tokenize("A  b"), tokenize("a b"));
        assert_eq!(tokenize("Hello, world!"), vec!["hello", "world"]);
        assert_eq!(tokenize("x2-y3"), vec!["x2", "y3"]);
        assert!(tokenize("  \t ...").is_empty());
    }

    #[test]
    fn vocab_orders_by_frequency_then_token() {
        let texts = vec!["a b".to_string(), "a c".to_string()];
        let vocab = build_vocab(&texts, 1).unwrap();
        assert_eq!(vocab.id("a"), Some(4));
        assert_eq!(vocab.id("b"), Some(5));
        assert_eq!(vocab.id("c"), Some(6));
        assert_eq!(vocab.size(), 7);

        let vocab2 = build_vocab(&texts, 2).unwrap();
        assert_eq!(vocab2.id("a"), Some(4));
        assert_eq!(vocab2.id("b"), None);
        assert_eq!(vocab2.size(), 5);

        let again = build_vocab(&texts, 1).unwrap();
        assert_eq!(vocab, again);
    }

    #[test]
    fn encode_maps_oov_to_unk_and_rejects_empty() {
        let vocab = build_vocab(&["a b".to_string()], 1).unwrap();
        assert_eq!(
            encode_text("a b", &vocab).unwrap(),
            vec![vocab.id("a").unwrap(), vocab.id("b").unwrap()]
        );
        assert_eq!(
            encode_text("a z", &vocab).unwrap(),
            vec![vocab.id("a").unwrap(), UNK_ID]
        );
        assert!(encode_text("   ", &vocab).is_err());
    }

    #[test]
    fn encode_decode_round_trip_on_in_vocab_tokens() {
        let texts = vec!["alpha beta gamma alpha".to_string()];
        let vocab = build_vocab(&texts, 1).unwrap();
        let ids = encode_text(&texts[0], &vocab).unwrap();
        let decoded: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
        let reencoded = encode_text(&decoded.join(" "), &vocab).unwrap();
        assert_eq!(ids, reencoded);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let vocab = build_vocab(&["a b c a".to_string()], 1).unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\n<unk>\t1\n<cls>\t2\n<sep>\t3\n"));
    }

    fn write_jsonl(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn jsonl_loads_one_doc_per_split() {
        let (_dir, path) = write_jsonl(&[
            r#"{"id":"a","text":"alpha beta","labels":[0],"split":"train"}"#,
            r#"{"id":"b","text":"alpha gamma","labels":[1],"split":"valid"}"#,
            r#"{"id":"c","text":"beta beta","labels":[2],"split":"test"}"#,
        ]);
        let corpus = load_jsonl_corpus(&path, 3, TaskKind::MultiLabel, 1).unwrap();
        assert_eq!(corpus.train.len(), 1);
        assert_eq!(corpus.valid.len(), 1);
        assert_eq!(corpus.test.len(), 1);
        // Vocabulary from the train split only: "gamma" is OOV.
        assert_eq!(corpus.valid[0].tokens[1], UNK_ID);
    }

    #[test]
    fn jsonl_rejects_bad_label_with_line_number() {
        let (_dir, path) = write_jsonl(&[
            r#"{"id":"a","text":"alpha","labels":[0],"split":"train"}"#,
            r#"{"id":"b","text":"beta","labels":[5],"split":"test"}"#,
        ]);
        let err = load_jsonl_corpus(&path, 3, TaskKind::MultiLabel, 1).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn jsonl_rejects_missing_text_with_line_number() {
        let (_dir, path) = write_jsonl(&[
            r#"{"id":"a","text":"alpha","labels":[0],"split":"train"}"#,
            r#"{"id":"b","labels":[0],"split":"test"}"#,
        ]);
        let err = load_jsonl_corpus(&path, 3, TaskKind::MultiLabel, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("malformed"), "{msg}");
    }

    #[test]
    fn jsonl_rejects_duplicate_ids() {
        let (_dir, path) = write_jsonl(&[
            r#"{"id":"a","text":"alpha","labels":[0],"split":"train"}"#,
            r#"{"id":"a","text":"beta","labels":[1],"split":"test"}"#,
        ]);
        assert!(load_jsonl_corpus(&path, 3, TaskKind::MultiLabel, 1).is_err());
    }

    #[test]
    fn synthetic_lengths_stay_in_range() {
        let cfg = SyntheticConfig {
            seed: 1,
            n_docs: 100,
            len_min: 20,
            len_max: 200,
            class_count: 3,
            task_kind: TaskKind::MultiLabel,
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(corpus.total_docs(), 100);
        for doc in corpus
            .train
            .iter()
            .chain(corpus.valid.iter())
            .chain(corpus.test.iter())
        {
            assert!(doc.token_count() >= 20 && doc.token_count() <= 200);
        }
        assert_eq!(corpus.train.len(), 70);
        assert_eq!(corpus.valid.len(), 15);
        assert_eq!(corpus.test.len(), 15);
    }

    #[test]
    fn synthetic_signature_implies_label() {
        let cfg = SyntheticConfig {
            seed: 7,
            n_docs: 60,
            len_min: 20,
            len_max: 120,
            class_count: 3,
            task_kind: TaskKind::MultiLabel,
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        for doc in corpus
            .train
            .iter()
            .chain(corpus.valid.iter())
            .chain(corpus.test.iter())
        {
            for c in 0..cfg.class_count {
                let sig_id = corpus.vocab.id(&format!("sig{c}"));
                let contains = sig_id.is_some_and(|id| doc.tokens.contains(&id));
                if contains {
                    assert!(doc.labels[c], "doc {} has sig{c} but no label", doc.id);
                }
                if doc.labels[c] {
                    // The plant may be OOV only if the class never appears
                    // in the train split, which these sizes rule out.
                    assert!(contains, "doc {} labeled {c} but signature missing", doc.id);
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig::default();
        let small = SyntheticConfig {
            n_docs: 80,
            len_max: 100,
            ..cfg
        };
        let a = generate_synthetic_corpus(&small).unwrap();
        let b = generate_synthetic_corpus(&small).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn synthetic_degenerate_ranges_rejected() {
        let mut cfg = SyntheticConfig::default();
        cfg.len_min = 50;
        cfg.len_max = 20;
        assert!(generate_synthetic_corpus(&cfg).is_err());
        let mut cfg = SyntheticConfig::default();
        cfg.class_count = 1;
        assert!(generate_synthetic_corpus(&cfg).is_err());
    }

    #[test]
    fn label_priors_within_band() {
        let cfg = SyntheticConfig {
            n_docs: 400,
            ..SyntheticConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let all: Vec<&Document> = corpus
            .train
            .iter()
            .chain(corpus.valid.iter())
            .chain(corpus.test.iter())
            .collect();
        for c in 0..cfg.class_count {
            let positives = all.iter().filter(|d| d.labels[c]).count();
            let rate = positives as f64 / all.len() as f64;
            assert!(
                (0.2..=0.8).contains(&rate),
                "class {c} positive rate {rate}"
            );
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = SyntheticConfig {
            n_docs: 120,
            ..SyntheticConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let mut seen = HashSet::new();
        for doc in corpus
            .train
            .iter()
            .chain(corpus.valid.iter())
            .chain(corpus.test.iter())
        {
            assert!(seen.insert(doc.id.clone()), "id {} in two splits", doc.id);
        }
        assert_eq!(seen.len(), 120);
    }

    #[test]
    fn quantiles_use_nearest_rank() {
        let lengths: Vec<usize> = (1..=8).collect();
        assert_eq!(nearest_rank_quantile(&lengths, 0.25), 2);
        assert_eq!(nearest_rank_quantile(&lengths, 0.50), 4);
        assert_eq!(nearest_rank_quantile(&lengths, 0.75), 6);
    }

    #[test]
    fn stats_schema() {
        let docs: Vec<Document> = (1..=8)
            .map(|n| Document {
                id: format!("d{n}"),
                tokens: vec![UNK_ID; n],
                labels: vec![true, false],
            })
            .collect();
        let stats = split_stats(&docs, 2).unwrap();
        assert_eq!(
            stats,
            SplitStats {
                q25: 2,
                q50: 4,
                q75: 6,
                mean_len: 4.5,
                size: 8,
                label_count: 2
            }
        );
        assert!(split_stats(&[], 2).is_err());
    }
}

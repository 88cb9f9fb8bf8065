use lamkit::corpus::{generate_synthetic_corpus, SyntheticConfig, TaskKind};
use lamkit::model::{forward_document, ForwardOptions, Model, ModelConfig};
use lamkit::numerics::Tape;
use std::time::Instant;

fn main() {
    let corpus = generate_synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let cfg = ModelConfig::desk_default(corpus.vocab.size(), 4, TaskKind::MultiLabel);
    let model = Model::init(&cfg, 1).unwrap();
    let positions = cfg.position_table();
    let docs: Vec<_> = corpus.train.iter().take(50).collect();

    let t0 = Instant::now();
    let mut n_nodes = 0usize;
    for doc in &docs {
        let mut tape = Tape::new();
        let _ = forward_document(&mut tape, &model.params, &cfg, &doc.tokens, &positions, &mut ForwardOptions::eval()).unwrap();
        n_nodes += tape.len();
    }
    let fwd = t0.elapsed();

    let mut params = model.params.clone();
    let t1 = Instant::now();
    for doc in &docs {
        let mut tape = Tape::new();
        let trace = forward_document(&mut tape, &params, &cfg, &doc.tokens, &positions, &mut ForwardOptions::eval()).unwrap();
        let loss = lamkit::model::loss_for(&mut tape, trace.logits, &doc.labels, cfg.task_kind).unwrap();
        tape.backward(loss, &mut params).unwrap();
    }
    let both = t1.elapsed();
    println!("50 docs: forward {:?} ({} nodes/doc avg), fwd+bwd {:?}", fwd, n_nodes / docs.len(), both);
}

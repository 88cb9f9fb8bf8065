use lamkit::corpus::{generate_synthetic_corpus, SyntheticConfig, TaskKind};
use lamkit::encoder::{encode_segments, EncoderParamIds};
use lamkit::model::{Model, ModelConfig};
use lamkit::numerics::Tape;
use lamkit::segmentation::segment_tokens;
use std::time::Instant;

fn main() {
    let corpus = generate_synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let cfg = ModelConfig::desk_default(corpus.vocab.size(), 4, TaskKind::MultiLabel);
    let model = Model::init(&cfg, 1).unwrap();
    let positions = cfg.position_table();
    let docs: Vec<_> = corpus.train.iter().take(100).collect();

    // Segment-encoder stage only.
    let t0 = Instant::now();
    let mut nodes = 0usize;
    for doc in &docs {
        let mut tape = Tape::new();
        let ids: Vec<EncoderParamIds> = cfg
            .kernels
            .iter()
            .map(|k| {
                EncoderParamIds::register(
                    &mut tape,
                    &model.params,
                    &ModelConfig::kernel_prefix(k.kernel_size),
                    &cfg.segment_encoder,
                )
                .unwrap()
            })
            .collect();
        for (k, id) in cfg.kernels.iter().zip(&ids) {
            let batch = segment_tokens(&doc.tokens, k).unwrap();
            let _ = encode_segments(&mut tape, &batch, &cfg.segment_encoder, id, &positions, None).unwrap();
        }
        nodes += tape.len();
    }
    println!("segment encoders fwd only: {:?}/doc, {} nodes/doc", t0.elapsed() / 100, nodes / 100);

    // Param registration alone.
    let t1 = Instant::now();
    for _ in &docs {
        let mut tape = Tape::new();
        for k in &cfg.kernels {
            let _ = EncoderParamIds::register(&mut tape, &model.params, &ModelConfig::kernel_prefix(k.kernel_size), &cfg.segment_encoder).unwrap();
        }
        let _ = EncoderParamIds::register(&mut tape, &model.params, "doc", &cfg.document_encoder).unwrap();
        let _ = EncoderParamIds::register(&mut tape, &model.params, "len", &cfg.length_encoder).unwrap();
    }
    println!("param registration: {:?}/doc", t1.elapsed() / 100);
}

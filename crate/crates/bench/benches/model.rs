use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vartune::model::{sample, PromptVocab, SamplerConfig, VarConfig, VarModel};
use vartune::personalize::{default_scale_weights, weighted_ce_loss};
use vartune::tokenizer::{Codebook, ScaleSchedule};
use vartune::workbench::{random_tokens, SyntheticSpec};
use vartune::Tape;

fn desk_model() -> VarModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vocab = PromptVocab::new(SyntheticSpec::default().vocabulary()).unwrap();
    VarModel::new(
        VarConfig::default(),
        ScaleSchedule::desk_default(),
        Codebook::random(64, 16, 0.5, &mut rng),
        vocab,
        &mut rng,
    )
    .unwrap()
}

fn forward(c: &mut Criterion) {
    let model = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(model.schedule(), model.vocab_size(), &mut rng);
    let prompt = model.encode_prompt("a circle on white").unwrap();
    let w = default_scale_weights(model.schedule().len());
    c.bench_function("forward_desk", |b| {
        b.iter(|| black_box(model.forward_ids(&tokens, &prompt).unwrap()))
    });
    c.bench_function("train_step_desk", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |_, _| true);
            let logits = model
                .full_logits_on(&mut tape, &bound, &tokens, &prompt)
                .unwrap();
            let loss = weighted_ce_loss(&mut tape, logits, &tokens, model.schedule(), &w).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn sampling(c: &mut Criterion) {
    let model = desk_model();
    let cfg = SamplerConfig::default();
    c.bench_function("sample_desk_cfg", |b| {
        b.iter(|| black_box(sample(&model, "a circle on white", &cfg).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward, sampling
}
criterion_main!(benches);

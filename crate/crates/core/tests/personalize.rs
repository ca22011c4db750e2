use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vartune::model::{PromptVocab, Role, SamplerConfig, VarConfig, VarModel};
use vartune::personalize::{
    default_scale_weights, finetune, prior_distill_loss, prior_preservation_loss, select_trainable,
    weighted_ce_loss, ClassBank, FinetuneConfig, SubjectSet, Variant,
};
use vartune::tokenizer::{AutoencoderConfig, AutoencoderWeights, ScaleSchedule};
use vartune::workbench::{generate_synthetic_dataset, micro_model, random_tokens, SyntheticSpec};
use vartune::{Error, Tape, Tensor};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn scale_ce(logits: &[f64], targets: &[usize], v: usize) -> f64 {
    let total: f64 = logits
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| -log_softmax(row)[t])
        .sum();
    total / targets.len() as f64
}

fn scale_kl(teacher: &[f64], student: &[f64], v: usize) -> f64 {
    let rows = teacher.len() / v;
    let mut total = 0.0;
    for (t, s) in teacher.chunks(v).zip(student.chunks(v)) {
        let (lt, ls) = (log_softmax(t), log_softmax(s));
        total += lt
            .iter()
            .zip(&ls)
            .map(|(p, q)| p.exp() * (p - q))
            .sum::<f64>();
    }
    total / rows as f64
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_class: 4,
        ..SyntheticSpec::default()
    }
}

/// Untrained tokenizer and a two-block desk model sharing its codebook.
fn setup(seed: u64) -> (AutoencoderWeights, VarModel, SubjectSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = AutoencoderWeights::init(AutoencoderConfig::default(), &mut rng).unwrap();
    let spec = small_spec();
    let model = VarModel::new(
        VarConfig {
            depth: 2,
            width: 32,
            heads: 2,
            ffn: 64,
            max_prompt_len: 8,
        },
        tok.schedule().clone(),
        tok.codebook().clone(),
        PromptVocab::new(spec.vocabulary()).unwrap(),
        &mut rng,
    )
    .unwrap();
    let data = generate_synthetic_dataset(&spec).unwrap();
    let subjects = SubjectSet {
        images: data.subject_images(),
        subject_prompt: spec.subject_prompt(),
        class_prompt: spec.class_prompt(),
    };
    (tok, model, subjects)
}

fn random_logits(rng: &mut ChaCha8Rng, schedule: &ScaleSchedule, v: usize) -> Tensor {
    Tensor::randn([schedule.total_positions(), v], 2.0, rng)
}

fn wce(
    logits: &Tensor,
    tokens: &vartune::tokenizer::MultiScaleTokens,
    schedule: &ScaleSchedule,
    w: &[f64],
) -> vartune::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = weighted_ce_loss(&mut tape, l, tokens, schedule, w)?;
    Ok(tape.value(loss).item())
}

#[test]
fn halved_fine_scales_subtract_half_their_cross_entropy() {
    let schedule = ScaleSchedule::desk_default();
    let v = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&schedule, v, &mut rng);
    let logits = random_logits(&mut rng, &schedule, v);
    let w = default_scale_weights(5);
    assert_eq!(w, vec![1.0, 1.0, 1.0, 0.5, 0.5]);
    let off = schedule.offsets();
    let ce: Vec<f64> = (0..5)
        .map(|k| {
            let rows = &logits.data()[off[k] * v..(off[k] + schedule.extent(k).area()) * v];
            scale_ce(rows, tokens.scale(k).tokens(), v)
        })
        .collect();
    let unit: f64 = ce.iter().sum();
    let got = wce(&logits, &tokens, &schedule, &w).unwrap();
    assert!((got - (unit - 0.5 * (ce[3] + ce[4]))).abs() < 1e-12);
    assert!((wce(&logits, &tokens, &schedule, &[1.0; 5]).unwrap() - unit).abs() < 1e-12);
}

#[test]
fn first_scale_only_weights_ignore_later_logits() {
    let schedule = ScaleSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = random_tokens(&schedule, 16, &mut rng);
    let logits = random_logits(&mut rng, &schedule, 16);
    let w = [1.0, 0.0, 0.0, 0.0, 0.0];
    let mut moved = logits.clone();
    for x in &mut moved.data_mut()[16..] {
        *x = rng.random_range(-9.0..9.0);
    }
    let a = wce(&logits, &tokens, &schedule, &w).unwrap();
    let b = wce(&moved, &tokens, &schedule, &w).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn weight_vector_errors() {
    let schedule = ScaleSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = random_tokens(&schedule, 8, &mut rng);
    let logits = random_logits(&mut rng, &schedule, 8);
    assert!(matches!(
        wce(&logits, &tokens, &schedule, &[1.0; 4]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        wce(&logits, &tokens, &schedule, &[0.5, 1.0, 1.0, 1.0, 1.0]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn role_selection() {
    let model = micro_model(&[1, 2], 2, 0).unwrap();
    let all = select_trainable(&model, &["all"]).unwrap();
    assert_eq!(all.trainable_count(&model), model.num_params());
    let mask = select_trainable(&model, &["ca", "ffn", "subject_embedding"]).unwrap();
    for (name, p) in model.params() {
        let expected = matches!(p.role, Role::CrossAttn | Role::Ffn | Role::Subject);
        assert_eq!(mask.is_trainable(name), expected, "{name}");
    }
    assert!(matches!(
        select_trainable(&model, &["conv"]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn distillation_matches_an_independent_recomputation() {
    let teacher = micro_model(&[1, 2, 3], 2, 7).unwrap();
    let sampler = SamplerConfig {
        cfg_scale: 1.0,
        seed: 3,
        ..SamplerConfig::default()
    };
    assert_eq!(
        prior_distill_loss(&teacher, &teacher.clone(), "a circle", &sampler).unwrap(),
        0.0
    );

    let mut student = teacher.clone();
    let name = "blocks.1.ffn.fc1.w";
    let mut w = student.param(name).unwrap().clone();
    w.data_mut()[5] += 0.1;
    student.set_param(name, w).unwrap();
    let got = prior_distill_loss(&teacher, &student, "a circle", &sampler).unwrap();
    assert!(got > 0.0);

    let traj = vartune::model::sample(&teacher, "a circle", &sampler).unwrap();
    let tl = teacher.forward_logits(&traj, "a circle").unwrap();
    let sl = student.forward_logits(&traj, "a circle").unwrap();
    let v = tl.vocab_size();
    let oracle: f64 = (0..tl.num_scales())
        .map(|k| scale_kl(tl.scale(k), sl.scale(k), v))
        .sum();
    assert!((got - oracle).abs() <= 1e-10, "{got} vs {oracle}");

    let other = micro_model(&[1, 2], 2, 7).unwrap();
    assert!(matches!(
        prior_distill_loss(&teacher, &other, "a circle", &sampler),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distillation_is_non_negative(seed in 0u64..1000, delta in -0.5f64..0.5) {
        let teacher = micro_model(&[1, 2, 3], 1, seed).unwrap();
        let mut student = teacher.clone();
        let mut w = student.param("blocks.0.ca.q.w").unwrap().clone();
        for x in w.data_mut() {
            *x += delta;
        }
        student.set_param("blocks.0.ca.q.w", w).unwrap();
        let cfg = SamplerConfig { cfg_scale: 1.0, seed, ..SamplerConfig::default() };
        prop_assert!(prior_distill_loss(&teacher, &student, "a square", &cfg).unwrap() >= 0.0);
    }
}

#[test]
fn preservation_loss_is_the_models_own_cross_entropy() {
    let model = micro_model(&[1, 2, 3], 1, 11).unwrap();
    let bank = ClassBank::generate(&model, "a circle", 3, &SamplerConfig::default()).unwrap();
    assert_eq!(bank.entries.len(), 3);
    for i in 0..3 {
        let got = prior_preservation_loss(&model, &bank, i).unwrap();
        let logits = model.forward_ids(&bank.entries[i], &bank.prompt).unwrap();
        let v = logits.vocab_size();
        let oracle: f64 = (0..3)
            .map(|k| scale_ce(logits.scale(k), bank.entries[i].scale(k).tokens(), v))
            .sum();
        assert!(got.is_finite() && got > 0.0);
        assert!((got - oracle).abs() < 1e-12);
    }
    let empty = ClassBank {
        prompt: bank.prompt.clone(),
        entries: vec![],
    };
    assert!(matches!(
        prior_preservation_loss(&model, &empty, 0),
        Err(Error::Contract(_))
    ));
}

fn smoothed(xs: &[f64]) -> (f64, f64) {
    let n = 10;
    let head = xs[..n].iter().sum::<f64>() / n as f64;
    let tail = xs[xs.len() - n..].iter().sum::<f64>() / n as f64;
    (head, tail)
}

#[test]
fn pure_subject_fitting_lowers_the_subject_loss() {
    let (tok, model, subjects) = setup(0);
    let cfg = FinetuneConfig {
        iterations: 50,
        variant: Variant::None,
        distill_lambda: 0.0,
        ..FinetuneConfig::default()
    };
    let out = finetune(&model, &tok, &subjects, &cfg).unwrap();
    let losses: Vec<f64> = out.rows.iter().map(|r| r.loss_wce).collect();
    let (head, tail) = smoothed(&losses);
    assert!(tail < head, "{head} -> {tail}");
    assert!(out.rows.iter().all(|r| r.loss_distill == 0.0));
}

#[test]
fn finetuning_never_writes_frozen_parameters() {
    let (tok, model, subjects) = setup(1);
    for (variant, lora) in [
        (Variant::Distill, None),
        (Variant::Ppl, None),
        (Variant::None, Some(2)),
    ] {
        let cfg = FinetuneConfig {
            iterations: 8,
            variant,
            lora_rank: lora,
            bank_size: 2,
            ..FinetuneConfig::default()
        };
        let out = finetune(&model, &tok, &subjects, &cfg).unwrap();
        assert_eq!(out.rows.len(), 8);
        if variant == Variant::Distill {
            assert_eq!(out.rows[0].loss_distill, 0.0);
        }
        for (name, p) in model.params() {
            let after = out.tuned.param(name).unwrap();
            if out.mask.is_trainable(name) {
                continue;
            }
            assert!(after.bit_eq(&p.value), "{variant:?} moved frozen `{name}`");
        }
        // adapters start at B = 0, so any nonzero B also counts as movement
        let moved = out.mask.trainable_names().any(|n| {
            let after = out.tuned.param(n).unwrap();
            match out.orig.param(n) {
                Some(before) => !after.bit_eq(before),
                None => n.ends_with(".lora_b") && after.data().iter().any(|&x| x != 0.0),
            }
        });
        assert!(moved);
    }
}

#[test]
fn finetune_config_rejects_unknown_keys_and_bad_weights() {
    assert!(serde_json::from_str::<FinetuneConfig>(r#"{"iterations": 3, "lamda": 1}"#).is_err());
    let cfg: FinetuneConfig = serde_json::from_str(r#"{"iterations": 3}"#).unwrap();
    assert_eq!(cfg.iterations, 3);
    assert_eq!(cfg.variant, Variant::Distill);
    let (tok, model, subjects) = setup(2);
    let bad = FinetuneConfig {
        scale_weights: Some(vec![1.0, 1.0, 1.0, 1.0, 0.0]),
        ..FinetuneConfig::default()
    };
    assert!(finetune(&model, &tok, &subjects, &bad).is_err());
}

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{scale_ce_terms, BoundParams, PromptVocab, VarConfig, VarModel};
use crate::personalize::{default_scale_weights, distill_terms, weighted_ce_loss};
use crate::tensor::{finite_diff_check, GradCheck, Tape, Tensor, Var};
use crate::tokenizer::{
    dequantize_prefix, quantize_traced, Codebook, FeatureMap, MultiScaleTokens, ScaleSchedule,
    TokenMap,
};

use super::{decode_checkpoint, encode_checkpoint};

/// Small random model for gradient and identity checks.
pub fn micro_model(sides: &[usize], depth: usize, seed: u64) -> Result<VarModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = ScaleSchedule::square(sides)?;
    let codebook = Codebook::random(8, 4, 0.5, &mut rng);
    let vocab = PromptVocab::new(
        ["<null>", "a", "circle", "square", "on", "white", "<S*>"]
            .map(String::from)
            .to_vec(),
    )?;
    let config = VarConfig {
        depth,
        width: 8,
        heads: 2,
        ffn: 16,
        max_prompt_len: 4,
    };
    VarModel::new(config, schedule, codebook, vocab, &mut rng)
}

pub fn random_tokens<R: Rng + ?Sized>(
    schedule: &ScaleSchedule,
    vocab: usize,
    rng: &mut R,
) -> MultiScaleTokens {
    MultiScaleTokens::new(
        schedule
            .extents()
            .iter()
            .map(|&e| {
                let t = (0..e.area()).map(|_| rng.random_range(0..vocab)).collect();
                TokenMap::new(e, t).expect("area matches")
            })
            .collect(),
    )
}

/// Central-difference check of `loss` with respect to the named tensors.
pub fn model_gradcheck<F>(
    model: &VarModel,
    names: &[String],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &VarModel, &BoundParams) -> Result<Var>,
{
    let start: Vec<Tensor> = names
        .iter()
        .map(|n| {
            model
                .param(n)
                .cloned()
                .ok_or_else(|| crate::error::contract(format!("no `{n}`")))
        })
        .collect::<Result<_>>()?;
    finite_diff_check(&start, h, max_coords, seed, |params, want| {
        let mut m = model.clone();
        for (n, p) in names.iter().zip(params) {
            m.set_param(n, p.clone())?;
        }
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, |n, _| names.iter().any(|x| x == n));
        let l = loss(&mut tape, &m, &bound)?;
        let value = tape.value(l).item();
        if !want {
            return Ok((value, None));
        }
        let mut g = tape.backward(l)?;
        let grads = names
            .iter()
            .map(|n| {
                let shape = m.param(n).expect("bound").shape().to_vec();
                g.take(bound.get(n)).unwrap_or_else(|| Tensor::zeros(shape))
            })
            .collect();
        Ok((value, Some(grads)))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn all_names(model: &VarModel) -> Vec<String> {
    model.params().keys().cloned().collect()
}

const GRAD_TOL: f64 = 1e-4;

/// Fast gradient and invariant suite.
pub fn selfcheck() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let model = micro_model(&[1, 2, 3], 1, 1)?;
    let tokens = random_tokens(model.schedule(), model.vocab_size(), &mut rng);
    let prompt = model.encode_prompt("<S*> circle")?;
    let w = default_scale_weights(model.schedule().len());
    let g = model_gradcheck(
        &model,
        &all_names(&model),
        1e-4,
        Some(3),
        1,
        |tape, m, b| {
            let logits = m.full_logits_on(tape, b, &tokens, &prompt)?;
            weighted_ce_loss(tape, logits, &tokens, m.schedule(), &w)
        },
    )?;
    out.push(check(
        "gradient: weighted cross-entropy",
        g.max_rel_error < GRAD_TOL,
        format!("max relative error {:.2e}", g.max_rel_error),
    ));

    // an unrelated student keeps the gradients well above round-off
    let student = micro_model(&[1, 2, 3], 1, 2)?;
    let teacher = model.forward_ids(&tokens, &prompt)?.all().clone();
    let g = model_gradcheck(
        &student,
        &all_names(&student),
        1e-4,
        Some(3),
        2,
        |tape, m, b| {
            let s = m.full_logits_on(tape, b, &tokens, &prompt)?;
            let tv = tape.constant(teacher.clone());
            let terms = distill_terms(tape, tv, s, m.schedule())?;
            sum(tape, terms)
        },
    )?;
    out.push(check(
        "gradient: prior distillation",
        g.max_rel_error < GRAD_TOL,
        format!("max relative error {:.2e}", g.max_rel_error),
    ));

    let two = micro_model(&[1, 2], 2, 3)?;
    let t2 = random_tokens(two.schedule(), two.vocab_size(), &mut rng);
    let p2 = two.encode_prompt("a square")?;
    let g = model_gradcheck(&two, &all_names(&two), 1e-4, Some(3), 3, |tape, m, b| {
        let logits = m.full_logits_on(tape, b, &t2, &p2)?;
        let terms = scale_ce_terms(tape, logits, &t2, m.schedule())?;
        sum(tape, terms)
    })?;
    out.push(check(
        "gradient: pretraining loss",
        g.max_rel_error < GRAD_TOL,
        format!("max relative error {:.2e}", g.max_rel_error),
    ));

    let schedule = ScaleSchedule::desk_default();
    let mut exact = true;
    let mut monotone = true;
    for _ in 0..10 {
        let cb = Codebook::random(32, 8, 0.6, &mut rng);
        let data = (0..schedule.final_extent().area() * 8)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = FeatureMap::new(schedule.final_extent(), 8, data)?;
        let trace = quantize_traced(&f, &cb, &schedule)?;
        let mut prev = f64::INFINITY;
        for k in 0..=schedule.len() {
            let p = dequantize_prefix(&trace.tokens, &cb, &schedule, k)?;
            if k < schedule.len() {
                exact &= f
                    .data()
                    .iter()
                    .zip(p.data())
                    .zip(trace.residuals[k].data())
                    .all(|((a, b), r)| (a - b).to_bits() == r.to_bits());
            }
            let e = f.mse(&p);
            monotone &= e <= prev;
            prev = e;
        }
    }
    out.push(check(
        "telescoping residuals",
        exact,
        "10 random features".into(),
    ));
    out.push(check(
        "prefix error non-increasing",
        monotone,
        "10 random features".into(),
    ));

    let cond = model.forward_logits(&tokens, "<S*> circle")?;
    let null = model.forward_ids(&tokens, &PromptVocab::null_prompt())?;
    let g1 = model.guided_logits(&tokens, "<S*> circle", 1.0)?;
    let g0 = model.guided_logits(&tokens, "<S*> circle", 0.0)?;
    out.push(check(
        "guidance endpoints",
        g1.bit_eq(cond.all()) && g0.bit_eq(null.all()),
        "s = 0 and s = 1".into(),
    ));

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_, _| true);
    let s = model.full_logits_on(&mut tape, &b, &tokens, &prompt)?;
    let tv = tape.constant(teacher);
    let terms = distill_terms(&mut tape, tv, s, model.schedule())?;
    let zero = terms.iter().all(|t| tape.value(*t).item() == 0.0);
    out.push(check("distillation zero at identity", zero, String::new()));

    let tensors: BTreeMap<String, Tensor> = model.to_tensors();
    let back = decode_checkpoint(&encode_checkpoint(&tensors))?;
    let same = back.len() == tensors.len()
        && tensors
            .iter()
            .all(|(k, v)| back.get(k).is_some_and(|w| w.bit_eq(v)));
    out.push(check(
        "checkpoint round trip",
        same,
        format!("{} tensors", tensors.len()),
    ));
    Ok(out)
}

fn sum(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("non-empty");
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

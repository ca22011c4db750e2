use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{build_scale_inputs, forward_on, scale_ce_terms, BoundParams};
use super::{PromptVocab, VarModel};
use crate::error::{contract, Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use crate::tokenizer::MultiScaleTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing the prompt by the null prompt.
    pub null_prob: f64,
    /// Probability of using the example's short prompt instead of the full one.
    pub short_prompt_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            null_prob: 0.1,
            short_prompt_prob: 0.3,
            seed: 0,
        }
    }
}

/// A tokenised image with its full and short prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub tokens: MultiScaleTokens,
    pub prompt: String,
    pub short_prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainRow {
    pub step: usize,
    /// Batch mean of the summed per-scale cross-entropies.
    pub loss: f64,
    pub per_scale: Vec<f64>,
}

impl PretrainRow {
    pub fn csv(rows: &[Self]) -> String {
        let k = rows.first().map_or(0, |r| r.per_scale.len());
        let mut out = String::from("step,loss");
        for i in 1..=k {
            let _ = write!(out, ",ce_{i}");
        }
        out.push('\n');
        for r in rows {
            let _ = write!(out, "{},{}", r.step, r.loss);
            for v in &r.per_scale {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Unit-weight next-scale cross-entropy training with prompt dropout.
pub fn pretrain(
    model: &mut VarModel,
    data: &[PretrainExample],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainRow>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(contract("pretrain: need data and a positive batch size"));
    }
    for p in [cfg.null_prob, cfg.short_prompt_prob] {
        if !(0.0..=1.0).contains(&p) {
            return Err(contract("pretrain: probabilities must lie in [0, 1]"));
        }
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = data
        .iter()
        .map(|e| {
            e.tokens.validate(model.schedule(), model.vocab_size())?;
            Ok((
                model.encode_prompt(&e.prompt)?,
                model.encode_prompt(&e.short_prompt)?,
            ))
        })
        .collect::<Result<_>>()?;
    let k = model.schedule().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut tape = Tape::new();
        let b = BoundParams::with(&mut tape, model, |_, _| true);
        let mut total = None;
        let mut per_scale = vec![0.0; k];
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..data.len());
            let r: f64 = rng.random();
            let prompt = if r < cfg.null_prob {
                PromptVocab::null_prompt()
            } else if r < cfg.null_prob + (1.0 - cfg.null_prob) * cfg.short_prompt_prob {
                encoded[i].1.clone()
            } else {
                encoded[i].0.clone()
            };
            let tokens = &data[i].tokens;
            let inputs = build_scale_inputs(tokens.maps(), model.codebook(), model.schedule(), k)?;
            let logits = forward_on(&mut tape, &b, model, &inputs, &prompt)?;
            let terms = scale_ce_terms(&mut tape, logits, tokens, model.schedule())?;
            for (acc, t) in per_scale.iter_mut().zip(&terms) {
                *acc += tape.value(*t).item() / cfg.batch_size as f64;
            }
            for t in terms {
                total = Some(match total {
                    None => t,
                    Some(s) => tape.add(s, t)?,
                });
            }
        }
        let total = total.expect("batch is non-empty");
        let loss = tape.scale(total, 1.0 / cfg.batch_size as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!(
                "pretraining loss is {value} at step {step}"
            )));
        }
        let vars: Vec<(String, crate::tensor::Var)> =
            b.iter().map(|(n, v)| (n.clone(), *v)).collect();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<(String, Tensor)> = vars
            .into_iter()
            .filter_map(|(n, v)| grads.take(v).map(|g| (n, g)))
            .collect();
        let params = model.params_mut();
        let mut updates = Vec::with_capacity(grads.len());
        let mut it = params.iter_mut().peekable();
        for (name, g) in &grads {
            // both sequences are name-sorted
            while it.peek().is_some_and(|(n, _)| *n != name) {
                it.next();
            }
            let (n, p) = it.next().expect("gradient names come from the model");
            updates.push((n.as_str(), &mut p.value, g));
        }
        opt.step(updates)?;
        rows.push(PretrainRow {
            step,
            loss: value,
            per_scale,
        });
    }
    Ok(rows)
}

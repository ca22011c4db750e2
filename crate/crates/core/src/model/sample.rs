use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{build_scale_inputs, forward_on, BoundParams, ScaleLogits};
use super::{PromptVocab, VarModel};
use crate::error::{contract, Result};
use crate::tensor::{softmax_row, Tape};
use crate::tokenizer::{MultiScaleTokens, TokenMap};

/// Temperatures below this select the arg-max token.
const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 1.5,
            temperature: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(contract("cfg_scale must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(contract("temperature must be finite and > 0"));
        }
        if self.top_k == Some(0) {
            return Err(contract("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// `l_null + s (l_cond - l_null)`, evaluated as `(1 - s) l_null + s l_cond`
/// so that `s = 0` and `s = 1` reproduce the inputs exactly.
pub fn guide_logits(cond: &[f64], null: &[f64], s: f64) -> Vec<f64> {
    cond.iter()
        .zip(null)
        .map(|(c, n)| (1.0 - s) * n + s * c)
        .collect()
}

/// Tokens plus the mean entropy of each scale's sampling distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub tokens: MultiScaleTokens,
    pub entropy: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one index from a row of guided logits; returns it with the
/// entropy of the distribution it was drawn from.
fn draw(row: &[f64], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> (usize, f64) {
    if cfg.temperature < ARGMAX_TEMPERATURE {
        return (argmax(row), 0.0);
    }
    let mut scaled: Vec<f64> = row.iter().map(|l| l / cfg.temperature).collect();
    if let Some(k) = cfg.top_k.filter(|&k| k < row.len()) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        for &i in &order[k..] {
            scaled[i] = f64::NEG_INFINITY;
        }
    }
    let mut p = vec![0.0; row.len()];
    softmax_row(&scaled, &mut p);
    let entropy = -p
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return (i, entropy);
            }
        }
    }
    (last, entropy)
}

/// Logits for scales `0..m` given the first `m - 1` token maps.
pub(crate) fn prefix_logits(
    model: &VarModel,
    maps: &[TokenMap],
    m: usize,
    prompt: &[usize],
) -> Result<ScaleLogits> {
    let inputs = build_scale_inputs(maps, model.codebook(), model.schedule(), m)?;
    let mut tape = Tape::new();
    let b = BoundParams::constants(&mut tape, model);
    let logits = forward_on(&mut tape, &b, model, &inputs, prompt)?;
    Ok(ScaleLogits::new(
        model.schedule(),
        m,
        tape.value(logits).clone(),
    ))
}

pub(crate) fn sample_ids(
    model: &VarModel,
    prompt: &[usize],
    cfg: &SamplerConfig,
) -> Result<SampleTrace> {
    cfg.validate()?;
    model.check_prompt(prompt)?;
    let null = PromptVocab::null_prompt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = model.schedule();
    let v = model.vocab_size();
    let mut maps = Vec::with_capacity(schedule.len());
    let mut entropy = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let cond = prefix_logits(model, &maps, k + 1, prompt)?;
        let guided = if cfg.cfg_scale == 1.0 {
            cond.scale(k).to_vec()
        } else {
            let uncond = prefix_logits(model, &maps, k + 1, &null)?;
            guide_logits(cond.scale(k), uncond.scale(k), cfg.cfg_scale)
        };
        let mut tokens = Vec::with_capacity(guided.len() / v);
        let mut h = 0.0;
        for row in guided.chunks(v) {
            let (t, e) = draw(row, cfg, &mut rng);
            tokens.push(t);
            h += e;
        }
        entropy.push(h / tokens.len() as f64);
        maps.push(TokenMap::new(schedule.extent(k), tokens)?);
    }
    Ok(SampleTrace {
        tokens: MultiScaleTokens::new(maps),
        entropy,
    })
}

/// Scale-by-scale sampling with classifier-free guidance.
pub fn sample_traced(model: &VarModel, prompt: &str, cfg: &SamplerConfig) -> Result<SampleTrace> {
    let ids = model.encode_prompt(prompt)?;
    sample_ids(model, &ids, cfg)
}

pub fn sample(model: &VarModel, prompt: &str, cfg: &SamplerConfig) -> Result<MultiScaleTokens> {
    Ok(sample_traced(model, prompt, cfg)?.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_endpoints_are_exact() {
        let cond = [0.1, -3.7, 2.2e5, 1e-300];
        let null = [9.3, 0.4, -1.5, 7.0];
        assert_eq!(guide_logits(&cond, &null, 1.0), cond);
        assert_eq!(guide_logits(&cond, &null, 0.0), null);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn top_one_is_argmax() {
        let cfg = SamplerConfig {
            top_k: Some(1),
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(draw(&[0.5, 2.0, 1.9], &cfg, &mut rng).0, 1);
        }
    }
}

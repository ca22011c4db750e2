use std::collections::BTreeMap;

use super::{Param, VarModel};
use crate::error::{contract, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{lift, Codebook, FeatureMap, MultiScaleTokens, ScaleSchedule, TokenMap};

/// Input grid of one scale.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleInput {
    /// Scale 1 reads the learned start map.
    Start,
    /// Accumulated reconstruction of earlier scales at this scale's extent.
    Features(FeatureMap),
}

/// Inputs for scales `0..m`, which depend on `tokens[..m - 1]` only.
pub fn build_scale_inputs(
    tokens: &[TokenMap],
    codebook: &Codebook,
    schedule: &ScaleSchedule,
    m: usize,
) -> Result<Vec<ScaleInput>> {
    if m == 0 || m > schedule.len() {
        return Err(contract(format!(
            "cannot build {m} scale inputs for a {}-scale schedule",
            schedule.len()
        )));
    }
    if tokens.len() + 1 < m {
        return Err(contract(format!(
            "{m} scale inputs need {} token maps, got {}",
            m - 1,
            tokens.len()
        )));
    }
    for (k, t) in tokens.iter().take(m - 1).enumerate() {
        if t.extent() != schedule.extent(k) {
            return Err(contract(format!(
                "scale {k}: token extent differs from schedule"
            )));
        }
        if let Some(&bad) = t.tokens().iter().find(|&&i| i >= codebook.len()) {
            return Err(crate::Error::Index {
                index: bad,
                bound: codebook.len(),
            });
        }
    }
    let c = codebook.channels();
    let fin = schedule.final_extent();
    let mut accum = vec![0.0; fin.area() * c];
    let mut out = vec![ScaleInput::Start];
    for k in 1..m {
        let up = lift(&tokens[k - 1], codebook, schedule, k - 1);
        accum.iter_mut().zip(&up).for_each(|(a, u)| *a += u);
        let full = FeatureMap::new(fin, c, accum.clone())?;
        out.push(ScaleInput::Features(full.resample(schedule.down(k))?));
    }
    Ok(out)
}

/// Row-major `n x n` mask over the first `m` scales: position `i` may
/// attend to `j` iff `scale(j) <= scale(i)`.
pub fn block_causal_mask(schedule: &ScaleSchedule, m: usize) -> Vec<bool> {
    let scale_of = scale_index(schedule, m);
    let n = scale_of.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = scale_of[j] <= scale_of[i];
        }
    }
    mask
}

fn scale_index(schedule: &ScaleSchedule, m: usize) -> Vec<usize> {
    (0..m)
        .flat_map(|k| std::iter::repeat_n(k, schedule.extent(k).area()))
        .collect()
}

/// Tape handles for a model's tensors.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn constants(tape: &mut Tape, model: &VarModel) -> Self {
        Self::with(tape, model, |_, _| false)
    }

    pub fn with(
        tape: &mut Tape,
        model: &VarModel,
        trainable: impl Fn(&str, &Param) -> bool,
    ) -> Self {
        let vars = model
            .params()
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), trainable(name, p))))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn linear(tape: &mut Tape, b: &BoundParams, x: Var, name: &str) -> Result<Var> {
    let mut y = tape.matmul(x, b.get(&format!("{name}.w")))?;
    if let (Some(la), Some(lb)) = (
        b.try_get(&format!("{name}.lora_a")),
        b.try_get(&format!("{name}.lora_b")),
    ) {
        let xa = tape.matmul(x, la)?;
        let delta = tape.matmul(xa, lb)?;
        y = tape.add(y, delta)?;
    }
    tape.add_row(y, b.get(&format!("{name}.b")))
}

fn layer_norm(tape: &mut Tape, b: &BoundParams, x: Var, name: &str) -> Result<Var> {
    tape.layer_norm(x, b.get(&format!("{name}.g")), b.get(&format!("{name}.b")))
}

fn attention(
    tape: &mut Tape,
    b: &BoundParams,
    prefix: &str,
    xq: Var,
    xkv: Var,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, b, xq, &format!("{prefix}.q"))?;
    let k = linear(tape, b, xkv, &format!("{prefix}.k"))?;
    let v = linear(tape, b, xkv, &format!("{prefix}.v"))?;
    let dh = tape.value(q).cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = match mask {
            Some(m) => tape.masked_softmax(s, m)?,
            None => tape.softmax(s),
        };
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, b, cat, &format!("{prefix}.o"))
}

/// Logits `[sum_{k < m} h_k w_k x V]` for the scales covered by `inputs`.
pub(crate) fn forward_on(
    tape: &mut Tape,
    b: &BoundParams,
    model: &VarModel,
    inputs: &[ScaleInput],
    prompt: &[usize],
) -> Result<Var> {
    model.check_prompt(prompt)?;
    let schedule = model.schedule();
    let cfg = model.config();
    let m = inputs.len();
    if m == 0 || m > schedule.len() {
        return Err(contract("forward: bad number of scale inputs"));
    }
    let mut feats = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        match (k, input) {
            (0, ScaleInput::Start) => {}
            (k, ScaleInput::Features(f)) if k > 0 && f.extent() == schedule.extent(k) => {
                feats.extend_from_slice(f.data());
            }
            _ => return Err(contract(format!("forward: scale input {k} is malformed"))),
        }
    }
    let mut parts = vec![b.get("embed.start")];
    if m > 1 {
        let c = model.codebook().channels();
        let rows = feats.len() / c;
        let f = tape.constant(Tensor::new([rows, c], feats)?);
        parts.push(linear(tape, b, f, "embed.in_proj")?);
    }
    let x = tape.concat_rows(&parts)?;
    let scale_of = scale_index(schedule, m);
    let n = scale_of.len();
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(b.get("embed.pos"), &positions)?;
    let x = tape.add(x, pos)?;
    let se = tape.gather_rows(b.get("embed.scale"), &scale_of)?;
    let mut x = tape.add(x, se)?;

    let table = tape.concat_rows(&[b.get("text.embed"), b.get("text.subject")])?;
    let words = tape.gather_rows(table, prompt)?;
    let slots: Vec<usize> = (0..prompt.len()).collect();
    let tpos = tape.gather_rows(b.get("text.pos"), &slots)?;
    let ctx = tape.add(words, tpos)?;

    let mask = block_causal_mask(schedule, m);
    for i in 0..cfg.depth {
        let h = layer_norm(tape, b, x, &format!("blocks.{i}.ln1"))?;
        let a = attention(
            tape,
            b,
            &format!("blocks.{i}.sa"),
            h,
            h,
            Some(&mask),
            cfg.heads,
        )?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, b, x, &format!("blocks.{i}.ln2"))?;
        let a = attention(tape, b, &format!("blocks.{i}.ca"), h, ctx, None, cfg.heads)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, b, x, &format!("blocks.{i}.ln3"))?;
        let h = linear(tape, b, h, &format!("blocks.{i}.ffn.fc1"))?;
        let h = tape.gelu(h);
        let h = linear(tape, b, h, &format!("blocks.{i}.ffn.fc2"))?;
        x = tape.add(x, h)?;
    }
    let x = layer_norm(tape, b, x, "head.ln")?;
    linear(tape, b, x, "head")
}

/// Per-scale views of a `[positions x V]` logit matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLogits {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    logits: Tensor,
}

impl ScaleLogits {
    pub(crate) fn new(schedule: &ScaleSchedule, m: usize, logits: Tensor) -> Self {
        let offsets = schedule.offsets()[..m].to_vec();
        let sizes = schedule.extents()[..m].iter().map(|e| e.area()).collect();
        Self {
            offsets,
            sizes,
            logits,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.sizes.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.cols()
    }

    pub fn all(&self) -> &Tensor {
        &self.logits
    }

    /// `[h_k w_k x V]` logits of scale `k`, row-major.
    pub fn scale(&self, k: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.logits.data()[self.offsets[k] * v..(self.offsets[k] + self.sizes[k]) * v]
    }

    pub fn scale_tensor(&self, k: usize) -> Tensor {
        Tensor::from_parts(
            vec![self.sizes[k], self.vocab_size()],
            self.scale(k).to_vec(),
        )
    }
}

/// Rows of scale `k` inside a full-sequence matrix.
pub fn scale_rows(tape: &mut Tape, x: Var, schedule: &ScaleSchedule, k: usize) -> Result<Var> {
    let off = schedule.offsets()[k];
    let idx: Vec<usize> = (off..off + schedule.extent(k).area()).collect();
    tape.gather_rows(x, &idx)
}

/// Mean cross-entropy of each scale, in scale order, for full-schedule logits.
pub fn scale_ce_terms(
    tape: &mut Tape,
    logits: Var,
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
) -> Result<Vec<Var>> {
    tokens.validate(schedule, tape.value(logits).cols())?;
    if tape.value(logits).rows() != schedule.total_positions() {
        return Err(contract("logits do not cover the full schedule"));
    }
    (0..schedule.len())
        .map(|k| {
            let rows = scale_rows(tape, logits, schedule, k)?;
            tape.softmax_cross_entropy(rows, tokens.scale(k).tokens())
        })
        .collect()
}

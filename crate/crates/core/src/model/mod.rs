//! Next-scale prediction transformer.
//!
//! Scale `k` is predicted from the accumulated reconstruction of scales
//! `< k`, resampled to scale `k`'s extent. All scales are processed in one
//! pass under a block-causal mask; prompts enter through cross-attention.

mod forward;
mod pretrain;
mod prompt;
mod sample;

pub use forward::{
    block_causal_mask, build_scale_inputs, scale_ce_terms, scale_rows, BoundParams, ScaleInput,
    ScaleLogits,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainExample, PretrainRow};
pub use prompt::{PromptVocab, NULL_WORD, SUBJECT_WORD};
pub(crate) use sample::sample_ids;
pub use sample::{guide_logits, sample, sample_traced, SampleTrace, SamplerConfig};

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{Codebook, MultiScaleTokens, ScaleSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_prompt_len: usize,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            ffn: 256,
            max_prompt_len: 8,
        }
    }
}

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.ffn == 0 || self.max_prompt_len == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(contract("width must be a positive multiple of heads"));
        }
        Ok(())
    }
}

/// Parameter groups addressable by tuning masks and weight reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Block self-attention projections.
    #[serde(rename = "sa")]
    SelfAttn,
    /// Block cross-attention projections.
    #[serde(rename = "ca")]
    CrossAttn,
    Ffn,
    /// Layer-norm gains and biases.
    Norm,
    /// Token-input embedder, positional and scale tables, prompt table.
    Embed,
    /// Shared output projection.
    Head,
    /// The subject word's embedding row.
    Subject,
    /// Low-rank adapter factors.
    Lora,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::SelfAttn,
        Role::CrossAttn,
        Role::Ffn,
        Role::Norm,
        Role::Embed,
        Role::Head,
        Role::Subject,
        Role::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::SelfAttn => "sa",
            Role::CrossAttn => "ca",
            Role::Ffn => "ffn",
            Role::Norm => "norm",
            Role::Embed => "embed",
            Role::Head => "head",
            Role::Subject => "subject",
            Role::Lora => "lora",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == name || (name == "subject_embedding" && *r == Role::Subject))
            .ok_or_else(|| contract(format!("unknown role `{name}`")))
    }

    /// Role and block index implied by a parameter name.
    pub fn of(name: &str) -> Result<(Role, Option<usize>)> {
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            let block = block_of(name);
            return Ok((Role::Lora, block));
        }
        if let Some(rest) = name.strip_prefix("blocks.") {
            let (idx, tail) = rest
                .split_once('.')
                .ok_or_else(|| contract(format!("bad parameter name `{name}`")))?;
            let block = idx
                .parse()
                .map_err(|_| contract(format!("bad block index in `{name}`")))?;
            let role = match tail.split('.').next() {
                Some("sa") => Role::SelfAttn,
                Some("ca") => Role::CrossAttn,
                Some("ffn") => Role::Ffn,
                Some("ln1" | "ln2" | "ln3") => Role::Norm,
                _ => return Err(contract(format!("bad parameter name `{name}`"))),
            };
            return Ok((role, Some(block)));
        }
        let role = match name {
            "text.subject" => Role::Subject,
            "head.ln.g" | "head.ln.b" => Role::Norm,
            "head.w" | "head.b" => Role::Head,
            n if n.starts_with("embed.") || n.starts_with("text.") => Role::Embed,
            _ => return Err(contract(format!("bad parameter name `{name}`"))),
        };
        Ok((role, None))
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

/// One named tensor with its role tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub role: Role,
    pub block: Option<usize>,
}

/// Transformer weights, prompt vocabulary and the (frozen) tokenizer
/// codebook used to build scale inputs.
#[derive(Clone, Debug)]
pub struct VarModel {
    config: VarConfig,
    schedule: ScaleSchedule,
    codebook: Codebook,
    vocab: PromptVocab,
    params: BTreeMap<String, Param>,
}

/// Names of the linear layers inside block `i`, with `(d_in, d_out)`.
fn block_linears(i: usize, c: &VarConfig) -> Vec<(String, usize, usize)> {
    let d = c.width;
    let mut out = Vec::new();
    for part in ["sa", "ca"] {
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("blocks.{i}.{part}.{proj}"), d, d));
        }
    }
    out.push((format!("blocks.{i}.ffn.fc1"), d, c.ffn));
    out.push((format!("blocks.{i}.ffn.fc2"), c.ffn, d));
    out
}

impl VarModel {
    pub fn new<R: Rng + ?Sized>(
        config: VarConfig,
        schedule: ScaleSchedule,
        codebook: Codebook,
        vocab: PromptVocab,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if codebook.is_empty() {
            return Err(contract("empty codebook"));
        }
        let subject = vocab
            .subject_index()
            .ok_or_else(|| contract("prompt vocabulary lacks the subject word"))?;
        let d = config.width;
        let v = codebook.len();
        let depth_scale = 1.0 / (2.0 * config.depth as f64).sqrt();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut linear = |name: &str, din: usize, dout: usize, gain: f64, rng: &mut R| {
            let std = gain / (din as f64).sqrt();
            tensors.push((format!("{name}.w"), Tensor::randn([din, dout], std, rng)));
            tensors.push((format!("{name}.b"), Tensor::zeros([dout])));
        };
        linear("embed.in_proj", codebook.channels(), d, 1.0, rng);
        for i in 0..config.depth {
            for (name, din, dout) in block_linears(i, &config) {
                let gain = if name.ends_with(".o") || name.ends_with(".fc2") {
                    depth_scale
                } else {
                    1.0
                };
                linear(&name, din, dout, gain, rng);
            }
        }
        linear("head", d, v, 1.0, rng);
        for i in 0..config.depth {
            for ln in ["ln1", "ln2", "ln3"] {
                tensors.push((format!("blocks.{i}.{ln}.g"), Tensor::full([d], 1.0)));
                tensors.push((format!("blocks.{i}.{ln}.b"), Tensor::zeros([d])));
            }
        }
        tensors.push(("head.ln.g".into(), Tensor::full([d], 1.0)));
        tensors.push(("head.ln.b".into(), Tensor::zeros([d])));
        let n1 = schedule.extent(0).area();
        tensors.push(("embed.start".into(), Tensor::randn([n1, d], 0.5, rng)));
        tensors.push((
            "embed.pos".into(),
            Tensor::randn([schedule.total_positions(), d], 0.1, rng),
        ));
        tensors.push((
            "embed.scale".into(),
            Tensor::randn([schedule.len(), d], 0.1, rng),
        ));
        tensors.push(("text.embed".into(), Tensor::randn([subject, d], 0.5, rng)));
        tensors.push((
            "text.pos".into(),
            Tensor::randn([config.max_prompt_len, d], 0.1, rng),
        ));
        tensors.push(("text.subject".into(), Tensor::randn([1, d], 0.5, rng)));

        let mut params = BTreeMap::new();
        for (name, value) in tensors {
            let (role, block) = Role::of(&name)?;
            params.insert(name, Param { value, role, block });
        }
        Ok(Self {
            config,
            schedule,
            codebook,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &VarConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn vocab(&self) -> &PromptVocab {
        &self.vocab
    }

    /// Codebook size `V`, the width of every logit row.
    pub fn vocab_size(&self) -> usize {
        self.codebook.len()
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    /// Overwrites one tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("no parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(contract(format!("shape mismatch for `{name}`")));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn count_by_role(&self) -> BTreeMap<Role, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.values() {
            *out.entry(p.role).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Encodes a prompt and checks it fits the positional table.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(prompt)?;
        self.check_prompt(&ids)?;
        Ok(ids)
    }

    pub(crate) fn check_prompt(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_prompt_len {
            return Err(contract(format!(
                "prompt has {} words, limit {}",
                ids.len(),
                self.config.max_prompt_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Index {
                index: bad,
                bound: self.vocab.len(),
            });
        }
        Ok(())
    }

    /// Copies the embedding row of `word` into the subject row.
    pub fn init_subject_from(&mut self, word: &str) -> Result<()> {
        let idx = self.vocab.index(word)?;
        if Some(idx) == self.vocab.subject_index() {
            return Err(contract("cannot initialise the subject row from itself"));
        }
        let row = self.params["text.embed"].value.row(idx).to_vec();
        let d = row.len();
        self.set_param("text.subject", Tensor::new([1, d], row)?)
    }

    /// Teacher-forced logits for all `K` scales under `prompt`.
    pub fn forward_logits(&self, tokens: &MultiScaleTokens, prompt: &str) -> Result<ScaleLogits> {
        let ids = self.encode_prompt(prompt)?;
        self.forward_ids(tokens, &ids)
    }

    pub fn forward_ids(&self, tokens: &MultiScaleTokens, prompt: &[usize]) -> Result<ScaleLogits> {
        tokens.validate(&self.schedule, self.vocab_size())?;
        let inputs = build_scale_inputs(
            tokens.maps(),
            &self.codebook,
            &self.schedule,
            self.schedule.len(),
        )?;
        let mut tape = Tape::new();
        let b = BoundParams::constants(&mut tape, self);
        let logits = forward::forward_on(&mut tape, &b, self, &inputs, prompt)?;
        Ok(ScaleLogits::new(
            &self.schedule,
            inputs.len(),
            tape.value(logits).clone(),
        ))
    }

    /// Teacher-forced logits under `prompt` guided against the null prompt
    /// with strength `s`.
    pub fn guided_logits(&self, tokens: &MultiScaleTokens, prompt: &str, s: f64) -> Result<Tensor> {
        let cond = self.forward_logits(tokens, prompt)?;
        let null = self.forward_ids(tokens, &PromptVocab::null_prompt())?;
        let data = guide_logits(cond.all().data(), null.all().data(), s);
        Tensor::new(cond.all().shape().to_vec(), data)
    }

    /// Puts every tensor on `tape`; `trainable` decides which receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str, &Param) -> bool) -> BoundParams {
        BoundParams::with(tape, self, trainable)
    }

    /// Logits for the scales covered by `inputs`, recorded on `tape`.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &[ScaleInput],
        prompt: &[usize],
    ) -> Result<Var> {
        forward::forward_on(tape, bound, self, inputs, prompt)
    }

    /// Teacher-forced logits of all scales on `tape`.
    pub fn full_logits_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &MultiScaleTokens,
        prompt: &[usize],
    ) -> Result<Var> {
        tokens.validate(&self.schedule, self.vocab_size())?;
        let inputs = build_scale_inputs(
            tokens.maps(),
            &self.codebook,
            &self.schedule,
            self.schedule.len(),
        )?;
        forward::forward_on(tape, bound, self, &inputs, prompt)
    }

    /// Named tensors for checkpointing, including architecture metadata,
    /// the prompt vocabulary and the tokenizer codebook.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect();
        let c = &self.config;
        let mut meta = vec![
            c.depth as f64,
            c.width as f64,
            c.heads as f64,
            c.ffn as f64,
            c.max_prompt_len as f64,
        ];
        for e in self.schedule.extents() {
            meta.push(e.h as f64);
            meta.push(e.w as f64);
        }
        out.insert(
            "meta.var".into(),
            Tensor::from_parts(vec![meta.len()], meta),
        );
        let vocab: Vec<f64> = self.vocab.to_bytes().into_iter().map(f64::from).collect();
        out.insert(
            "meta.vocab".into(),
            Tensor::from_parts(vec![vocab.len()], vocab),
        );
        out.insert("var.codebook".into(), self.codebook.table().clone());
        out
    }

    pub fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        let meta = tensors
            .remove("meta.var")
            .ok_or_else(|| corrupt("missing meta.var"))?;
        let m = meta.data();
        if m.len() < 7 || (m.len() - 5) % 2 != 0 {
            return Err(corrupt("malformed meta.var"));
        }
        let config = VarConfig {
            depth: m[0] as usize,
            width: m[1] as usize,
            heads: m[2] as usize,
            ffn: m[3] as usize,
            max_prompt_len: m[4] as usize,
        };
        let extents = m[5..]
            .chunks(2)
            .map(|p| crate::tensor::Extent::new(p[0] as usize, p[1] as usize))
            .collect();
        let schedule = ScaleSchedule::new(extents).map_err(|e| corrupt(&e.to_string()))?;
        let vocab = tensors
            .remove("meta.vocab")
            .ok_or_else(|| corrupt("missing meta.vocab"))?;
        let bytes: Vec<u8> = vocab.data().iter().map(|&b| b as u8).collect();
        let vocab = PromptVocab::from_bytes(&bytes)?;
        let table = tensors
            .remove("var.codebook")
            .ok_or_else(|| corrupt("missing var.codebook"))?;
        if table.shape().len() != 2 {
            return Err(corrupt("codebook must be a matrix"));
        }
        let codebook = Codebook::from_trained(table);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, schedule, codebook, vocab, &mut rng)
            .map_err(|e| corrupt(&e.to_string()))?;
        for (name, p) in model.params.iter_mut() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| corrupt(&format!("missing tensor `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(corrupt(&format!("tensor `{name}` has the wrong shape")));
            }
            p.value = t;
        }
        // Remaining tensors must be adapter factors of existing linears.
        for (name, t) in tensors {
            let base = name
                .strip_suffix(".lora_a")
                .or_else(|| name.strip_suffix(".lora_b"))
                .ok_or_else(|| corrupt(&format!("unexpected tensor `{name}`")))?;
            let w = model
                .param(&format!("{base}.w"))
                .ok_or_else(|| corrupt(&format!("adapter `{name}` has no base weight")))?;
            let (din, dout) = (w.rows(), w.cols());
            let ok = match t.shape() {
                [a, b] if name.ends_with("lora_a") => *a == din && *b > 0,
                [a, b] if name.ends_with("lora_b") => *a > 0 && *b == dout,
                _ => false,
            };
            if !ok {
                return Err(corrupt(&format!("adapter `{name}` has the wrong shape")));
            }
            let (role, block) = Role::of(&name)?;
            model.params.insert(
                name,
                Param {
                    value: t,
                    role,
                    block,
                },
            );
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_from_names() {
        assert_eq!(
            Role::of("blocks.3.ca.q.w").unwrap(),
            (Role::CrossAttn, Some(3))
        );
        assert_eq!(Role::of("blocks.0.ln2.g").unwrap(), (Role::Norm, Some(0)));
        assert_eq!(Role::of("head.ln.b").unwrap(), (Role::Norm, None));
        assert_eq!(Role::of("head.w").unwrap(), (Role::Head, None));
        assert_eq!(Role::of("text.subject").unwrap(), (Role::Subject, None));
        assert_eq!(
            Role::of("blocks.1.ffn.fc1.lora_a").unwrap(),
            (Role::Lora, Some(1))
        );
        assert!(Role::of("blocks.x.sa.q.w").is_err());
        assert!(Role::parse("attention").is_err());
    }
}

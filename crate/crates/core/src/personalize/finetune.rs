use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distill::{distill_loss_on, preservation_loss_on, ClassBank};
use super::{
    default_scale_weights, lora, mask_for_roles, select_trainable, weighted_ce_loss, TuningMask,
};
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::model::{sample_ids, Role, SamplerConfig, VarModel, SUBJECT_WORD};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::tokenizer::AutoencoderWeights;
use crate::workbench::augment;

/// Regulariser added to the subject loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// KL to the original model along its own class-prompt trajectories.
    Distill,
    /// Cross-entropy on a bank of class samples from the original model.
    Ppl,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// Subject images per step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Defaults to `default_scale_weights(K)`.
    pub scale_weights: Option<Vec<f64>>,
    pub variant: Variant,
    pub distill_lambda: f64,
    /// Teacher trajectories per step.
    pub distill_batch: usize,
    /// Sampling used for teacher trajectories and the class bank.
    pub teacher: SamplerConfig,
    pub bank_size: usize,
    pub roles: Vec<String>,
    pub augment: bool,
    pub max_zoom: f64,
    /// Trains low-rank adapters on every attention and FFN linear instead
    /// of the weights themselves.
    pub lora_rank: Option<usize>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 1,
            optimizer: AdamWConfig::default(),
            scale_weights: None,
            variant: Variant::Distill,
            distill_lambda: 1.0,
            distill_batch: 1,
            teacher: SamplerConfig {
                cfg_scale: 1.0,
                ..SamplerConfig::default()
            },
            bank_size: 16,
            roles: super::DEFAULT_ROLES
                .iter()
                .map(|r| r.name().to_string())
                .collect(),
            augment: true,
            max_zoom: 1.25,
            lora_rank: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Resolved scale weights for a `k`-scale schedule.
    pub fn weights(&self, k: usize) -> Result<Vec<f64>> {
        let w = self
            .scale_weights
            .clone()
            .unwrap_or_else(|| default_scale_weights(k));
        super::validate_scale_weights(&w, k)?;
        if w.iter().any(|&x| x <= 0.0) {
            return Err(contract("fine-tuning scale weights must be positive"));
        }
        Ok(w)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.weights(k)?;
        if self.batch_size == 0 || self.distill_batch == 0 {
            return Err(contract("batch sizes must be positive"));
        }
        if !(self.distill_lambda.is_finite() && self.distill_lambda >= 0.0) {
            return Err(contract("distill_lambda must be finite and >= 0"));
        }
        if !(self.max_zoom.is_finite() && self.max_zoom >= 1.0) {
            return Err(contract("max_zoom must be >= 1"));
        }
        if self.variant == Variant::Ppl && self.bank_size == 0 {
            return Err(contract("empty class bank"));
        }
        if self.lora_rank == Some(0) {
            return Err(contract("LoRA rank must be positive"));
        }
        self.teacher.validate()
    }
}

/// Few-shot subject images with their prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSet {
    pub images: Vec<Image>,
    /// Contains the subject word and the class noun.
    pub subject_prompt: String,
    /// The class noun without the subject word.
    pub class_prompt: String,
}

impl SubjectSet {
    pub fn validate(&self, model: &VarModel) -> Result<()> {
        if self.images.is_empty() {
            return Err(contract("subject set has no images"));
        }
        let sub = model.encode_prompt(&self.subject_prompt)?;
        if model
            .vocab()
            .subject_index()
            .is_none_or(|s| !sub.contains(&s))
        {
            return Err(contract("subject prompt lacks the subject word"));
        }
        if self
            .class_prompt
            .split_whitespace()
            .any(|w| w == SUBJECT_WORD)
        {
            return Err(contract("class prompt contains the subject word"));
        }
        model.encode_prompt(&self.class_prompt)?;
        Ok(())
    }

    /// Last word of the class prompt.
    pub fn class_noun(&self) -> Result<&str> {
        self.class_prompt
            .split_whitespace()
            .last()
            .ok_or_else(|| contract("empty class prompt"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneRow {
    pub step: usize,
    pub loss_wce: f64,
    /// Distillation or preservation term, before `distill_lambda`.
    pub loss_distill: f64,
    pub loss_total: f64,
    pub lr: f64,
}

impl FinetuneRow {
    pub fn csv(rows: &[Self]) -> String {
        let mut out = String::from("step,loss_wce,loss_distill,loss_total,lr\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.loss_wce, r.loss_distill, r.loss_total, r.lr
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub tuned: VarModel,
    pub orig: VarModel,
    pub rows: Vec<FinetuneRow>,
    pub mask: TuningMask,
}

fn add_all(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| contract("no loss terms"))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn mean(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len() as f64;
    let s = add_all(tape, terms)?;
    Ok(if n == 1.0 { s } else { tape.scale(s, 1.0 / n) })
}

/// Tunes a copy of `orig` on `subjects`. Parameters outside the mask are
/// never written; this is checked bitwise before returning.
pub fn finetune(
    orig: &VarModel,
    tokenizer: &AutoencoderWeights,
    subjects: &SubjectSet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let k = orig.schedule().len();
    cfg.validate(k)?;
    subjects.validate(orig)?;
    if tokenizer.schedule() != orig.schedule() || tokenizer.codebook().len() != orig.vocab_size() {
        return Err(contract("tokenizer does not match the model"));
    }
    let weights = cfg.weights(k)?;
    let requested = select_trainable(orig, &cfg.roles)?;

    let mut student = orig.clone();
    let mask = match cfg.lora_rank {
        Some(rank) => {
            student = lora::attach_lora(
                &student,
                rank,
                &[Role::SelfAttn, Role::CrossAttn, Role::Ffn],
                cfg.seed,
            )?;
            let mut roles = BTreeSet::from([Role::Lora]);
            if requested.roles().contains(&Role::Subject) {
                roles.insert(Role::Subject);
            }
            mask_for_roles(&student, roles)
        }
        None => requested,
    };
    if mask.roles().contains(&Role::Subject) {
        student.init_subject_from(subjects.class_noun()?)?;
    }

    let subject_ids = student.encode_prompt(&subjects.subject_prompt)?;
    let class_ids = student.encode_prompt(&subjects.class_prompt)?;
    let bank = match cfg.variant {
        Variant::Ppl => Some(ClassBank::generate(
            orig,
            &subjects.class_prompt,
            cfg.bank_size,
            &cfg.teacher,
        )?),
        _ => None,
    };
    let use_aux = cfg.variant != Variant::None && cfg.distill_lambda > 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, |n, _| mask.is_trainable(n));

        let mut wce_terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let img = &subjects.images[rng.random_range(0..subjects.images.len())];
            let aug_seed: u64 = rng.random();
            let img = if cfg.augment {
                augment(img, aug_seed, cfg.max_zoom)
            } else {
                img.clone()
            };
            let tokens = tokenizer.tokenize(&img)?;
            let logits = student.full_logits_on(&mut tape, &bound, &tokens, &subject_ids)?;
            wce_terms.push(weighted_ce_loss(
                &mut tape,
                logits,
                &tokens,
                student.schedule(),
                &weights,
            )?);
        }
        let wce = mean(&mut tape, wce_terms)?;

        let aux = if use_aux {
            let mut terms = Vec::with_capacity(cfg.distill_batch);
            for _ in 0..cfg.distill_batch {
                let draw: u64 = rng.random();
                terms.push(match &bank {
                    Some(bank) => {
                        let i = (draw % bank.entries.len() as u64) as usize;
                        preservation_loss_on(&mut tape, &student, &bound, bank, i)?
                    }
                    None => {
                        let sampler = SamplerConfig {
                            seed: draw,
                            ..cfg.teacher.clone()
                        };
                        let trajectory = sample_ids(orig, &class_ids, &sampler)?.tokens;
                        distill_loss_on(&mut tape, &student, &bound, orig, &class_ids, &trajectory)?
                    }
                });
            }
            Some(mean(&mut tape, terms)?)
        } else {
            None
        };

        let (total, aux_value) = match aux {
            Some(a) => {
                let v = tape.value(a).item();
                let weighted = tape.scale(a, cfg.distill_lambda);
                (tape.add(wce, weighted)?, v)
            }
            None => (wce, 0.0),
        };
        let loss_wce = tape.value(wce).item();
        let loss_total = tape.value(total).item();
        if !loss_total.is_finite() {
            return Err(Error::Diverged(format!(
                "fine-tuning loss is {loss_total} at step {step}"
            )));
        }

        let vars: Vec<(String, Var)> = bound
            .iter()
            .filter(|(n, _)| mask.is_trainable(n))
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        let mut grads = tape.backward(total)?;
        let grads: Vec<(String, Tensor)> = vars
            .into_iter()
            .filter_map(|(n, v)| grads.take(v).map(|g| (n, g)))
            .collect();
        let params = student.params_mut();
        let mut updates = Vec::with_capacity(grads.len());
        let mut it = params.iter_mut().peekable();
        for (name, g) in &grads {
            while it.peek().is_some_and(|(n, _)| *n != name) {
                it.next();
            }
            let (n, p) = it.next().expect("gradient names come from the model");
            updates.push((n.as_str(), &mut p.value, g));
        }
        opt.step(updates)?;
        rows.push(FinetuneRow {
            step,
            loss_wce,
            loss_distill: aux_value,
            loss_total,
            lr: cfg.optimizer.lr,
        });
    }

    for (name, p) in orig.params() {
        if !mask.is_trainable(name) {
            assert!(
                student.params()[name].value.bit_eq(&p.value),
                "frozen parameter `{name}` was modified"
            );
        }
    }
    Ok(FinetuneOutcome {
        tuned: student,
        orig: orig.clone(),
        rows,
        mask,
    })
}

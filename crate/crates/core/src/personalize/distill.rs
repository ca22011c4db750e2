use crate::error::{contract, Result};
use crate::model::{scale_rows, BoundParams, SamplerConfig, VarModel};
use crate::tensor::{Tape, Var};
use crate::tokenizer::{MultiScaleTokens, ScaleSchedule};

/// `KL(softmax(teacher) || softmax(student))` of each scale, position mean.
/// Gradients reach only `student`.
pub fn distill_terms(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    schedule: &ScaleSchedule,
) -> Result<Vec<Var>> {
    (0..schedule.len())
        .map(|k| {
            let t = scale_rows(tape, teacher, schedule, k)?;
            let s = scale_rows(tape, student, schedule, k)?;
            tape.kl_divergence(t, s)
        })
        .collect()
}

fn sum(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| contract("no loss terms"))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn check_compatible(teacher: &VarModel, student: &VarModel) -> Result<()> {
    if teacher.schedule() != student.schedule() || teacher.vocab_size() != student.vocab_size() {
        return Err(contract(
            "teacher and student differ in schedule or vocabulary",
        ));
    }
    Ok(())
}

/// Distillation term on `tape` for a given teacher trajectory.
pub(crate) fn distill_loss_on(
    tape: &mut Tape,
    student: &VarModel,
    bound: &BoundParams,
    teacher: &VarModel,
    prompt: &[usize],
    trajectory: &MultiScaleTokens,
) -> Result<Var> {
    check_compatible(teacher, student)?;
    let t_logits = teacher.forward_ids(trajectory, prompt)?;
    let t = tape.constant(t_logits.all().clone());
    let s = student.full_logits_on(tape, bound, trajectory, prompt)?;
    let terms = distill_terms(tape, t, s, student.schedule())?;
    sum(tape, terms)
}

/// Samples a trajectory from `teacher` under `c_cls` and returns
/// `sum_k KL(p_teacher || p_student)` along it.
pub fn prior_distill_loss(
    teacher: &VarModel,
    student: &VarModel,
    c_cls: &str,
    sampler: &SamplerConfig,
) -> Result<f64> {
    check_compatible(teacher, student)?;
    let ids = teacher.encode_prompt(c_cls)?;
    let trajectory = crate::model::sample_ids(teacher, &ids, sampler)?.tokens;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, |_, _| false);
    let loss = distill_loss_on(&mut tape, student, &bound, teacher, &ids, &trajectory)?;
    Ok(tape.value(loss).item())
}

/// Token maps pre-generated by the original model under the class prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    pub prompt: Vec<usize>,
    pub entries: Vec<MultiScaleTokens>,
}

impl ClassBank {
    /// `size` samples; entry `i` uses seed `sampler.seed + i`.
    pub fn generate(
        model: &VarModel,
        c_cls: &str,
        size: usize,
        sampler: &SamplerConfig,
    ) -> Result<Self> {
        let prompt = model.encode_prompt(c_cls)?;
        let entries = (0..size as u64)
            .map(|i| {
                let cfg = SamplerConfig {
                    seed: sampler.seed.wrapping_add(i),
                    ..sampler.clone()
                };
                Ok(crate::model::sample_ids(model, &prompt, &cfg)?.tokens)
            })
            .collect::<Result<_>>()?;
        Ok(Self { prompt, entries })
    }
}

/// Unit-weight cross-entropy of `model` on bank entry `index`, on `tape`.
pub(crate) fn preservation_loss_on(
    tape: &mut Tape,
    model: &VarModel,
    bound: &BoundParams,
    bank: &ClassBank,
    index: usize,
) -> Result<Var> {
    let entry = bank
        .entries
        .get(index)
        .ok_or_else(|| contract("empty class bank"))?;
    let logits = model.full_logits_on(tape, bound, entry, &bank.prompt)?;
    let terms = crate::model::scale_ce_terms(tape, logits, entry, model.schedule())?;
    sum(tape, terms)
}

/// Unit-weight cross-entropy of `model` on bank entry `index`.
pub fn prior_preservation_loss(model: &VarModel, bank: &ClassBank, index: usize) -> Result<f64> {
    if bank.entries.is_empty() {
        return Err(contract("empty class bank"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_, _| false);
    let loss = preservation_loss_on(&mut tape, model, &bound, bank, index)?;
    Ok(tape.value(loss).item())
}

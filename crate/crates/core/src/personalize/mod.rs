//! Few-shot subject tuning of a pretrained model: role-selective masks,
//! scale-weighted cross-entropy, prior distillation, and the prior
//! preservation and low-rank adapter variants.

mod distill;
mod finetune;
mod lora;

pub use distill::{distill_terms, prior_distill_loss, prior_preservation_loss, ClassBank};
pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome, FinetuneRow, SubjectSet, Variant};
pub use lora::{attach_lora, lora_param_count};

use std::collections::BTreeSet;

use crate::error::{contract, Result};
use crate::model::{Role, VarModel};
use crate::tensor::{Tape, Var};
use crate::tokenizer::{MultiScaleTokens, ScaleSchedule};

/// Roles tuned when none are named.
pub const DEFAULT_ROLES: [Role; 3] = [Role::CrossAttn, Role::Ffn, Role::Subject];

/// Which parameters the optimizer may write.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TuningMask {
    roles: BTreeSet<Role>,
    trainable: BTreeSet<String>,
}

impl TuningMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn roles(&self) -> &BTreeSet<Role> {
        &self.roles
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn trainable_count(&self, model: &VarModel) -> usize {
        model
            .params()
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

/// Mask enabling exactly the named roles. `"all"` names every role.
pub fn select_trainable<S: AsRef<str>>(model: &VarModel, roles: &[S]) -> Result<TuningMask> {
    let mut set = BTreeSet::new();
    for r in roles {
        match r.as_ref() {
            "all" => set.extend(Role::ALL),
            name => {
                set.insert(Role::parse(name)?);
            }
        }
    }
    Ok(mask_for_roles(model, set))
}

pub(crate) fn mask_for_roles(model: &VarModel, roles: BTreeSet<Role>) -> TuningMask {
    let trainable = model
        .params()
        .iter()
        .filter(|(_, p)| roles.contains(&p.role))
        .map(|(n, _)| n.clone())
        .collect();
    TuningMask { roles, trainable }
}

/// `1.0` on coarse scales and `0.5` on the finest `ceil(2K/5)` scales.
pub fn default_scale_weights(k: usize) -> Vec<f64> {
    let fine = (2 * k).div_ceil(5);
    (0..k)
        .map(|i| if i + fine >= k { 0.5 } else { 1.0 })
        .collect()
}

/// Checks `|w| = K`, finiteness, non-negativity and `w_1 >= ... >= w_K`.
pub fn validate_scale_weights(w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(contract(format!(
            "{} scale weights for {k} scales",
            w.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(contract("scale weights must be finite and non-negative"));
    }
    if w.windows(2).any(|p| p[1] > p[0]) {
        return Err(contract("scale weights must be non-increasing"));
    }
    Ok(())
}

/// `sum_k w_k * CE_k` with `CE_k` the position-mean cross-entropy of scale `k`.
pub fn weighted_ce_loss(
    tape: &mut Tape,
    logits: Var,
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    w: &[f64],
) -> Result<Var> {
    validate_scale_weights(w, schedule.len())?;
    let terms = crate::model::scale_ce_terms(tape, logits, tokens, schedule)?;
    let mut total: Option<Var> = None;
    for (t, &wk) in terms.into_iter().zip(w) {
        let term = if wk == 1.0 { t } else { tape.scale(t, wk) };
        total = Some(match total {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok(total.expect("schedules are non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_weights_halve_the_two_finest_scales() {
        assert_eq!(default_scale_weights(5), vec![1.0, 1.0, 1.0, 0.5, 0.5]);
        assert_eq!(
            default_scale_weights(13)
                .iter()
                .filter(|&&w| w == 0.5)
                .count(),
            6
        );
        assert_eq!(default_scale_weights(1), vec![0.5]);
    }

    #[test]
    fn weight_validation() {
        assert!(validate_scale_weights(&[1.0, 0.0, 0.0], 3).is_ok());
        assert!(validate_scale_weights(&[1.0, 2.0], 2).is_err());
        assert!(validate_scale_weights(&[1.0], 2).is_err());
        assert!(validate_scale_weights(&[1.0, -0.5], 2).is_err());
    }
}

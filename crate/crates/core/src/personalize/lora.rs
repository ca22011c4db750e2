use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::model::{Param, Role, VarModel};
use crate::tensor::Tensor;

/// Adds `x A B` to every block linear whose role is in `roles`.
/// `A` is Gaussian, `B` is zero, so outputs are unchanged at attachment.
pub fn attach_lora(model: &VarModel, rank: usize, roles: &[Role], seed: u64) -> Result<VarModel> {
    if rank == 0 {
        return Err(contract("LoRA rank must be positive"));
    }
    let roles: BTreeSet<Role> = roles.iter().copied().collect();
    if roles
        .iter()
        .any(|r| !matches!(r, Role::SelfAttn | Role::CrossAttn | Role::Ffn))
    {
        return Err(contract("LoRA adapts only sa, ca and ffn linears"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    let targets: Vec<(String, usize, usize, Option<usize>)> = model
        .params()
        .iter()
        .filter(|(n, p)| n.ends_with(".w") && p.block.is_some() && roles.contains(&p.role))
        .map(|(n, p)| {
            let base = n.trim_end_matches(".w").to_string();
            (base, p.value.rows(), p.value.cols(), p.block)
        })
        .collect();
    for (base, din, dout, block) in targets {
        let a = format!("{base}.lora_a");
        if out.params().contains_key(&a) {
            return Err(contract(format!("`{base}` already has an adapter")));
        }
        let std = 1.0 / (din as f64).sqrt();
        out.params_mut().insert(
            a,
            Param {
                value: Tensor::randn([din, rank], std, &mut rng),
                role: Role::Lora,
                block,
            },
        );
        out.params_mut().insert(
            format!("{base}.lora_b"),
            Param {
                value: Tensor::zeros([rank, dout]),
                role: Role::Lora,
                block,
            },
        );
    }
    Ok(out)
}

/// `sum rank * (d_in + d_out)` over adapted matrices.
pub fn lora_param_count(model: &VarModel) -> usize {
    model
        .params()
        .values()
        .filter(|p| p.role == Role::Lora)
        .map(|p| p.value.numel())
        .sum()
}

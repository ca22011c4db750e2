use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::{AutoencoderWeights, CODEBOOK};
use super::{quantize_traced, AutoencoderConfig, FeatureMap};
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of `||f - sg(f_hat)||^2`.
    pub commitment: f64,
    /// Codes unused for this many steps are re-seeded from live residuals.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch_size: 16,
            lr: 2e-3,
            commitment: 0.25,
            restart_every: 100,
            seed: 0,
        }
    }
}

/// One row of the tokenizer training curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AutoencoderTrainRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    /// Distinct codes emitted in this batch.
    pub codes_used: usize,
}

impl AutoencoderTrainRow {
    pub fn csv(rows: &[Self]) -> String {
        let mut out = String::from("step,loss,recon,codebook,commit,codes_used\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.loss, r.recon, r.codebook, r.commit, r.codes_used
            );
        }
        out
    }
}

/// Trains the patch autoencoder and codebook.
///
/// Loss: reconstruction MSE through a straight-through estimator, plus a
/// codebook term pulling looked-up entries toward the downsampled residuals,
/// plus a commitment term. Entry 0 stays the zero vector.
pub fn train_autoencoder(
    images: &[Image],
    config: AutoencoderConfig,
    train: &AutoencoderTrainConfig,
) -> Result<(AutoencoderWeights, Vec<AutoencoderTrainRow>)> {
    if images.is_empty() {
        return Err(contract("train_autoencoder: empty dataset"));
    }
    if train.batch_size == 0 {
        return Err(contract("train_autoencoder: batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut ae = AutoencoderWeights::init(config, &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: train.lr,
        ..AdamWConfig::default()
    });
    let v = ae.config().codebook_size;
    let c = ae.config().channels;
    let fe = ae.feature_extent();
    let mut last_used = vec![0usize; v];
    let mut rows = Vec::with_capacity(train.iterations);

    for step in 0..train.iterations {
        let batch: Vec<&Image> = (0..train.batch_size)
            .map(|_| &images[rng.random_range(0..images.len())])
            .collect();
        let mut patches = Vec::new();
        for img in &batch {
            patches.extend_from_slice(ae.patchify(img)?.data());
        }
        let n = batch.len() * fe.area();
        let patches = Tensor::new([n, ae.config().patch_dim()], patches)?;

        let mut tape = Tape::new();
        let vars = ae.bind(&mut tape, true);
        let x = tape.constant(patches);
        let f = AutoencoderWeights::encode_on(&mut tape, &vars, x)?;

        // Quantize each image outside the tape.
        let f_val = tape.value(f).clone();
        let mut f_hat = Vec::with_capacity(n * c);
        let mut all_tokens = Vec::new();
        let mut targets = Vec::new();
        let mut seen = vec![false; v];
        for b in 0..batch.len() {
            let rows_b = f_val.data()[b * fe.area() * c..(b + 1) * fe.area() * c].to_vec();
            let fm = FeatureMap::new(fe, c, rows_b)?;
            let trace = quantize_traced(&fm, ae.codebook(), ae.schedule())?;
            for (k, map) in trace.tokens.maps().iter().enumerate() {
                for (i, &t) in map.tokens().iter().enumerate() {
                    all_tokens.push(t);
                    targets.extend_from_slice(trace.downsampled[k].cell(i));
                    seen[t] = true;
                }
            }
            let rec = super::dequantize(&trace.tokens, ae.codebook(), ae.schedule())?;
            f_hat.extend_from_slice(rec.data());
        }
        let f_hat = Tensor::new([n, c], f_hat)?;

        // Straight-through: the decoder sees f_hat, gradients flow to f.
        let shift = f_hat
            .data()
            .iter()
            .zip(f_val.data())
            .map(|(q, z)| q - z)
            .collect();
        let shift = tape.constant(Tensor::new([n, c], shift)?);
        let z = tape.add(f, shift)?;
        let y = AutoencoderWeights::decode_on(&mut tape, &vars, z)?;
        let recon = tape.mse(y, x)?;

        let looked_up = tape.gather_rows(vars.codebook, &all_tokens)?;
        let restart_pool = targets.clone();
        let tgt = tape.constant(Tensor::new([all_tokens.len(), c], targets)?);
        let cb_loss = tape.mse(looked_up, tgt)?;

        let f_hat_c = tape.constant(f_hat);
        let commit = tape.mse(f, f_hat_c)?;
        let commit_w = tape.scale(commit, train.commitment);

        let partial = tape.add(recon, cb_loss)?;
        let loss = tape.add(partial, commit_w)?;
        let row = AutoencoderTrainRow {
            step,
            loss: tape.value(loss).item(),
            recon: tape.value(recon).item(),
            codebook: tape.value(cb_loss).item(),
            commit: tape.value(commit).item(),
            codes_used: seen.iter().filter(|&&s| s).count(),
        };
        if !row.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "tokenizer loss is {} at step {step}",
                row.loss
            )));
        }
        let cb_var = vars.codebook;
        let names: Vec<String> = ae.params_mut().keys().cloned().collect();
        let param_vars: Vec<_> = names.iter().map(|nm| vars.get(nm)).collect();
        let mut grads = tape.backward(loss)?;

        let grad_list: Vec<Tensor> = param_vars
            .iter()
            .map(|var| {
                grads
                    .take(*var)
                    .expect("every autoencoder tensor is on the path")
            })
            .collect();
        let mut cb_grad = grads.take(cb_var).unwrap_or_else(|| Tensor::zeros([v, c]));
        cb_grad.data_mut()[..c].iter_mut().for_each(|g| *g = 0.0);

        let mut table = ae.codebook().table().clone();
        {
            let mut updates: Vec<(&str, &mut Tensor, &Tensor)> = ae
                .params_mut()
                .iter_mut()
                .zip(&grad_list)
                .map(|((name, p), g)| (name.as_str(), p, g))
                .collect();
            updates.push((CODEBOOK, &mut table, &cb_grad));
            opt.step(updates)?;
        }

        for (t, s) in seen.iter().enumerate() {
            if *s {
                last_used[t] = step;
            }
        }
        if train.restart_every > 0 && step > 0 && step % train.restart_every == 0 {
            for t in 1..v {
                if step - last_used[t] >= train.restart_every {
                    let pick = rng.random_range(0..all_tokens.len());
                    let src = &restart_pool[pick * c..(pick + 1) * c];
                    let dst = &mut table.data_mut()[t * c..(t + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + 1e-3 * (rng.random::<f64>() - 0.5);
                    }
                    last_used[t] = step;
                }
            }
        }
        ae.set_codebook(table);
        rows.push(row);
    }
    Ok((ae, rows))
}

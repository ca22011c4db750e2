use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-3,
            beta1: 0.9,
            beta2: 0.97,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moments for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// One update over `(name, param, grad)` triples. Parameters not listed
    /// are not touched. Gradients are validated before any state changes.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, p, g) in &updates {
            if p.shape() != g.shape() {
                return Err(contract(format!(
                    "adamw: gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.m.len() != p.numel() {
                    return Err(contract(format!("adamw: `{name}` changed size")));
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p, g) in updates {
            let n = p.numel();
            let st = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            for (((x, gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let decayed = *x - c.lr * c.weight_decay * *x;
                *x = decayed - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(cfg: AdamWConfig, p0: f64, g: f64) -> f64 {
        let mut opt = AdamW::new(cfg);
        let mut p = Tensor::scalar(p0);
        let g = Tensor::scalar(g);
        opt.step([("p", &mut p, &g)]).unwrap();
        p.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(scalar_step(cfg, 0.731, 0.0), 0.731);
    }

    #[test]
    fn one_step_matches_hand_evaluation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        // m = 0.1, v = 0.001; bias corrected both to 1.0.
        let m_hat = (1.0 - 0.9) * 1.0 / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * 1.0 / (1.0 - 0.999);
        let expected = 0.5 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        let got = scalar_step(cfg, 0.5, 1.0);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.1,
            ..Default::default()
        };
        let p0 = 1.7;
        assert_eq!(scalar_step(cfg, p0, 0.0), p0 - 0.05 * 0.1 * p0);
    }

    #[test]
    fn nan_gradient_leaves_state_untouched() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::scalar(1.0);
        opt.step([("p", &mut p, &Tensor::scalar(0.5))]).unwrap();
        let before = p.clone();
        let (m0, v0) = {
            let (m, v) = opt.moments("p").unwrap();
            (m.to_vec(), v.to_vec())
        };
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        assert!(matches!(
            opt.step([("p", &mut p, &bad)]),
            Err(Error::NonFinite(_))
        ));
        assert!(p.bit_eq(&before));
        assert_eq!(opt.steps(), 1);
        let (m, v) = opt.moments("p").unwrap();
        assert_eq!((m.to_vec(), v.to_vec()), (m0, v0));
    }
}

//! Diagnostics and evaluation: per-role weight change, scale-wise
//! corruption curves, and embedding-based generation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{contract, Result};
use crate::image::Image;
use crate::model::{sample, Role, SamplerConfig, VarModel};
use crate::tokenizer::AutoencoderWeights;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Mean relative change of one named tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRatio {
    pub name: String,
    pub block: Option<usize>,
    pub role: Role,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightDiffReport {
    pub epsilon: f64,
    pub groups: Vec<GroupRatio>,
    /// Mean of group ratios per `(block, role)`; `None` for shared tensors.
    pub by_block_role: BTreeMap<(Option<usize>, Role), f64>,
    pub by_role: BTreeMap<Role, f64>,
}

impl WeightDiffReport {
    pub fn role(&self, role: Role) -> Option<f64> {
        self.by_role.get(&role).copied()
    }

    /// `block,role,ratio`; shared tensors use block `-`.
    pub fn csv(&self) -> String {
        let mut out = String::from("block,role,ratio\n");
        for ((block, role), r) in &self.by_block_role {
            let b = block.map_or("-".to_string(), |b| b.to_string());
            let _ = writeln!(out, "{b},{},{r}", role.name());
        }
        out
    }
}

fn mean_by<K: Ord>(items: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// `|orig - tuned| / (|orig| + eps)` averaged per tensor, then per
/// `(block, role)` and per role.
pub fn weight_diff_ratio(
    orig: &VarModel,
    tuned: &VarModel,
    epsilon: f64,
) -> Result<WeightDiffReport> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(contract("epsilon must be finite and >= 0"));
    }
    if orig.params().len() != tuned.params().len() {
        return Err(contract("models have different parameter sets"));
    }
    let mut groups = Vec::with_capacity(orig.params().len());
    for (name, p) in orig.params() {
        let q = tuned
            .params()
            .get(name)
            .ok_or_else(|| contract(format!("`{name}` missing from the tuned model")))?;
        if q.value.shape() != p.value.shape() {
            return Err(contract(format!("`{name}`: shapes differ")));
        }
        let n = p.value.numel().max(1) as f64;
        let ratio = p
            .value
            .data()
            .iter()
            .zip(q.value.data())
            .map(|(a, b)| (a - b).abs() / (a.abs() + epsilon))
            .sum::<f64>()
            / n;
        groups.push(GroupRatio {
            name: name.clone(),
            block: p.block,
            role: p.role,
            ratio,
        });
    }
    let by_block_role = mean_by(groups.iter().map(|g| ((g.block, g.role), g.ratio)));
    let by_role = mean_by(groups.iter().map(|g| (g.role, g.ratio)));
    Ok(WeightDiffReport {
        epsilon,
        groups,
        by_block_role,
        by_role,
    })
}

/// Reconstruction error after replacing scales `>= k` with tokens of a
/// noise image, for every boundary `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorruptionCurve {
    pub noise_seed: u64,
    pub mse: Vec<f64>,
}

impl CorruptionCurve {
    pub fn csv(&self) -> String {
        let mut out = String::from("k,mse\n");
        for (k, m) in self.mse.iter().enumerate() {
            let _ = writeln!(out, "{k},{m}");
        }
        out
    }
}

/// Image of i.i.d. uniform `[0, 1)` pixels.
pub fn noise_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * 3)
        .map(|_| rng.random::<f64>())
        .collect();
    Image::new(height, width, data).expect("length matches shape")
}

/// Decoded images for boundaries `k = 0..=K`.
pub fn corruption_decodes(
    tokenizer: &AutoencoderWeights,
    image: &Image,
    noise_seed: u64,
) -> Result<Vec<Image>> {
    let clean = tokenizer.tokenize(image)?;
    let noise = tokenizer.tokenize(&noise_image(image.height(), image.width(), noise_seed))?;
    (0..=clean.len())
        .map(|k| tokenizer.detokenize(&clean.splice(&noise, k)?))
        .collect()
}

pub fn scale_corruption_curve(
    tokenizer: &AutoencoderWeights,
    image: &Image,
    noise_seed: u64,
) -> Result<CorruptionCurve> {
    let mse = corruption_decodes(tokenizer, image, noise_seed)?
        .iter()
        .map(|d| d.mse(image))
        .collect::<Result<_>>()?;
    Ok(CorruptionCurve { noise_seed, mse })
}

/// Pointwise mean of equal-length curves.
pub fn mean_curve(curves: &[CorruptionCurve]) -> Result<Vec<f64>> {
    let first = curves.first().ok_or_else(|| contract("no curves"))?;
    let n = first.mse.len();
    if curves.iter().any(|c| c.mse.len() != n) {
        return Err(contract("curves differ in length"));
    }
    Ok((0..n)
        .map(|k| curves.iter().map(|c| c.mse[k]).sum::<f64>() / curves.len() as f64)
        .collect())
}

/// Increases `curve[k + 1] - curve[k] > 0`, in order.
pub fn inversions(curve: &[f64]) -> Vec<f64> {
    curve
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&d| d > 0.0)
        .collect()
}

/// Unit-norm evaluation embedding from the tokenizer encoder.
pub fn embed_for_eval(image: &Image, tokenizer: &AutoencoderWeights) -> Result<Vec<f64>> {
    tokenizer.embed(image)
}

pub fn embed_all(images: &[Image], tokenizer: &AutoencoderWeights) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|i| embed_for_eval(i, tokenizer))
        .collect()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn cross_mean(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract(format!("{what}: empty embedding set")));
    }
    let total: f64 = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| cosine(x, y)))
        .sum();
    Ok(total / (a.len() * b.len()) as f64)
}

/// Mean cross-pair cosine between class-prompt generations and real
/// subject images; higher means more drift toward the subject.
pub fn pres_metric(prior: &[Vec<f64>], subject: &[Vec<f64>]) -> Result<f64> {
    cross_mean(prior, subject, "pres")
}

/// Mean `1 - cosine` over unordered pairs.
pub fn div_metric(generated: &[Vec<f64>]) -> Result<f64> {
    let n = generated.len();
    if n < 2 {
        return Err(contract("div needs at least two images"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - cosine(&generated[i], &generated[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean cross-pair cosine between generations and references.
pub fn subject_fidelity(generated: &[Vec<f64>], references: &[Vec<f64>]) -> Result<f64> {
    cross_mean(generated, references, "subject fidelity")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalEntry {
    pub metric: String,
    pub value: f64,
    pub subject: String,
    pub prompt: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn push(&mut self, metric: &str, value: f64, subject: &str, prompt: &str) {
        self.entries.push(EvalEntry {
            metric: metric.to_string(),
            value,
            subject: subject.to_string(),
            prompt: prompt.to_string(),
        });
    }

    /// First value recorded for `metric`.
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric)
            .map(|e| e.value)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value,subject,prompt\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.metric, e.value, e.subject, e.prompt);
        }
        out
    }
}

/// Sampling plan for `evaluate_model`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub class_prompt: String,
    /// Prompt the subject was tuned on; fidelity is measured here.
    pub subject_prompt: String,
    /// Further subject prompts; diversity is averaged over these and
    /// `subject_prompt`.
    pub context_prompts: Vec<String>,
    pub samples_per_prompt: usize,
    /// Class-prompt generations compared against the subject images.
    pub prior_samples: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            class_prompt: "a circle".into(),
            subject_prompt: "<S*> circle on white".into(),
            context_prompts: ["gray", "black", "navy"]
                .iter()
                .map(|b| format!("<S*> circle on {b}"))
                .collect(),
            samples_per_prompt: 8,
            prior_samples: 16,
            sampler: SamplerConfig::default(),
        }
    }
}

fn generate(
    model: &VarModel,
    tokenizer: &AutoencoderWeights,
    prompt: &str,
    n: usize,
    sampler: &SamplerConfig,
    stream: u64,
) -> Result<Vec<Image>> {
    (0..n as u64)
        .map(|i| {
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(stream * 1_000_003 + i),
                ..sampler.clone()
            };
            tokenizer.detokenize(&sample(model, prompt, &cfg)?)
        })
        .collect()
}

/// Per-prompt fidelity and diversity, PRES from class-prompt generations,
/// and `*` summary rows: fidelity on the subject prompt and diversity
/// averaged over all subject prompts. Rows are tagged with `subject`.
pub fn evaluate_model(
    model: &VarModel,
    tokenizer: &AutoencoderWeights,
    references: &[Image],
    protocol: &EvalProtocol,
    subject: &str,
) -> Result<EvalReport> {
    let refs = embed_all(references, tokenizer)?;
    let mut report = EvalReport::default();
    let prompts = std::iter::once(&protocol.subject_prompt).chain(&protocol.context_prompts);
    let (mut fid, mut div) = (None, 0.0);
    let mut n = 0.0;
    for (j, prompt) in prompts.enumerate() {
        let imgs = generate(
            model,
            tokenizer,
            prompt,
            protocol.samples_per_prompt,
            &protocol.sampler,
            j as u64 + 1,
        )?;
        let e = embed_all(&imgs, tokenizer)?;
        let f = subject_fidelity(&e, &refs)?;
        let d = div_metric(&e)?;
        report.push("subject_fidelity", f, subject, prompt);
        report.push("div", d, subject, prompt);
        fid.get_or_insert(f);
        div += d;
        n += 1.0;
    }
    report.push(
        "subject_fidelity",
        fid.expect("one prompt at least"),
        subject,
        "*",
    );
    report.push("div", div / n, subject, "*");
    let prior = generate(
        model,
        tokenizer,
        &protocol.class_prompt,
        protocol.prior_samples,
        &protocol.sampler,
        0,
    )?;
    let pres = pres_metric(&embed_all(&prior, tokenizer)?, &refs)?;
    report.push("pres", pres, subject, "*");
    Ok(report)
}

/// Value of `metric` averaged over prompts (the `*` row).
pub fn summary(report: &EvalReport, metric: &str) -> Option<f64> {
    report
        .entries
        .iter()
        .find(|e| e.metric == metric && e.prompt == "*")
        .map(|e| e.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_definitions() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(pres_metric(&e[..1], &e[1..]).unwrap(), 0.0);
        assert_eq!(subject_fidelity(&e[..1], &e[..1]).unwrap(), 1.0);
        let half = vec![vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]];
        assert!((div_metric(&half).unwrap() - 0.5).abs() < 1e-12);
        assert!(div_metric(&e[..1]).is_err());
        assert!(pres_metric(&[], &e).is_err());
    }

    #[test]
    fn inversions_lists_increases() {
        assert_eq!(inversions(&[3.0, 2.0, 2.5, 1.0]), vec![0.5]);
        assert!(inversions(&[1.0, 1.0]).is_empty());
    }
}

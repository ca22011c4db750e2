use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{
    EvaluateStage, FinetuneStage, RunConfig, SampleStage, ScalesStage, TokenizerStage, VarStage,
    WeightsStage,
};
use super::{generate_synthetic_dataset, load_checkpoint, save_checkpoint, SyntheticSpec};
use crate::analysis::{
    corruption_decodes, evaluate_model, mean_curve, scale_corruption_curve, weight_diff_ratio,
    EvalProtocol,
};
use crate::error::Result;
use crate::model::{pretrain, sample_traced, PretrainExample, PretrainRow, PromptVocab, VarModel};
use crate::personalize::{finetune, FinetuneRow, SubjectSet};
use crate::tokenizer::{train_autoencoder, AutoencoderTrainRow, AutoencoderWeights};

/// Files written by a stage, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub artifacts: Vec<PathBuf>,
}

impl StageReport {
    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(&path, bytes)?;
        self.artifacts.push(path);
        Ok(())
    }
}

pub const TOKENIZER_FILE: &str = "tokenizer.varp";
pub const MODEL_FILE: &str = "var.varp";
pub const TUNED_FILE: &str = "tuned.varp";

pub fn load_tokenizer(path: &Path) -> Result<AutoencoderWeights> {
    AutoencoderWeights::from_tensors(load_checkpoint(path)?)
}

pub fn load_model(path: &Path) -> Result<VarModel> {
    VarModel::from_tensors(load_checkpoint(path)?)
}

/// Subject images and prompts of a corpus specification.
pub fn subject_set(spec: &SyntheticSpec) -> Result<SubjectSet> {
    let data = generate_synthetic_dataset(spec)?;
    Ok(SubjectSet {
        images: data.subject_images(),
        subject_prompt: spec.subject_prompt(),
        class_prompt: spec.class_prompt(),
    })
}

pub fn run_stage(config: &RunConfig) -> Result<StageReport> {
    if config.out().as_os_str().is_empty() {
        return Err(crate::Error::Config(format!(
            "{}: no output directory",
            config.name()
        )));
    }
    std::fs::create_dir_all(config.out())?;
    match config {
        RunConfig::PretrainTokenizer(s) => pretrain_tokenizer(s),
        RunConfig::PretrainVar(s) => pretrain_var(s),
        RunConfig::Finetune(s) => run_finetune(s),
        RunConfig::Sample(s) => run_sample(s),
        RunConfig::AnalyzeWeights(s) => analyze_weights(s),
        RunConfig::AnalyzeScales(s) => analyze_scales(s),
        RunConfig::Evaluate(s) => run_evaluate(s),
    }
}

fn pretrain_tokenizer(s: &TokenizerStage) -> Result<StageReport> {
    let data = generate_synthetic_dataset(&s.dataset)?;
    let training = crate::tokenizer::AutoencoderTrainConfig {
        seed: s.seed,
        ..s.training.clone()
    };
    let (weights, rows) =
        train_autoencoder(&data.generic_images(), s.autoencoder.clone(), &training)?;
    let mut report = StageReport::default();
    let path = s.out.join(TOKENIZER_FILE);
    save_checkpoint(&path, &weights.to_tensors())?;
    report.artifacts.push(path);
    report.write(
        s.out.join("tokenizer_train.csv"),
        AutoencoderTrainRow::csv(&rows),
    )?;
    Ok(report)
}

fn pretrain_var(s: &VarStage) -> Result<StageReport> {
    let tokenizer = load_tokenizer(&s.tokenizer)?;
    let data = generate_synthetic_dataset(&s.dataset)?;
    let examples = data
        .generic
        .iter()
        .map(|e| {
            Ok(PretrainExample {
                tokens: tokenizer.tokenize(&e.image)?,
                prompt: e.prompt.clone(),
                short_prompt: format!("a {}", e.class.name()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = PromptVocab::new(s.dataset.vocabulary())?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut model = VarModel::new(
        s.model.clone(),
        tokenizer.schedule().clone(),
        tokenizer.codebook().clone(),
        vocab,
        &mut rng,
    )?;
    let training = crate::model::PretrainConfig {
        seed: s.seed,
        ..s.training.clone()
    };
    let rows = pretrain(&mut model, &examples, &training)?;
    let mut report = StageReport::default();
    let path = s.out.join(MODEL_FILE);
    save_checkpoint(&path, &model.to_tensors())?;
    report.artifacts.push(path);
    report.write(s.out.join("pretrain.csv"), PretrainRow::csv(&rows))?;
    Ok(report)
}

fn run_finetune(s: &FinetuneStage) -> Result<StageReport> {
    let tokenizer = load_tokenizer(&s.tokenizer)?;
    let model = load_model(&s.model)?;
    let subjects = subject_set(&s.dataset)?;
    let mut cfg = s.finetune.clone();
    cfg.seed = s.seed;
    cfg.teacher.seed = s.seed;
    let outcome = finetune(&model, &tokenizer, &subjects, &cfg)?;
    let mut report = StageReport::default();
    let path = s.out.join(TUNED_FILE);
    save_checkpoint(&path, &outcome.tuned.to_tensors())?;
    report.artifacts.push(path);
    report.write(s.out.join("finetune.csv"), FinetuneRow::csv(&outcome.rows))?;
    Ok(report)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    prompt: &'a str,
    seed: u64,
    cfg_scale: f64,
    temperature: f64,
    top_k: Option<usize>,
    entropy: &'a [f64],
}

fn run_sample(s: &SampleStage) -> Result<StageReport> {
    let tokenizer = load_tokenizer(&s.tokenizer)?;
    let model = load_model(&s.model)?;
    let mut report = StageReport::default();
    for i in 0..s.count {
        let cfg = crate::model::SamplerConfig {
            seed: s.seed.wrapping_add(i as u64),
            ..s.sampler.clone()
        };
        let trace = sample_traced(&model, &s.prompt, &cfg)?;
        let image = tokenizer.detokenize(&trace.tokens)?;
        report.write(s.out.join(format!("sample_{i:03}.ppm")), image.to_ppm())?;
        let sidecar = Sidecar {
            prompt: &s.prompt,
            seed: cfg.seed,
            cfg_scale: cfg.cfg_scale,
            temperature: cfg.temperature,
            top_k: cfg.top_k,
            entropy: &trace.entropy,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("plain data serialises");
        report.write(s.out.join(format!("sample_{i:03}.json")), json + "\n")?;
    }
    Ok(report)
}

fn analyze_weights(s: &WeightsStage) -> Result<StageReport> {
    let orig = load_model(&s.orig)?;
    let tuned = load_model(&s.tuned)?;
    let r = weight_diff_ratio(&orig, &tuned, s.epsilon)?;
    let mut report = StageReport::default();
    report.write(s.out.join("weights.csv"), r.csv())?;
    Ok(report)
}

fn analyze_scales(s: &ScalesStage) -> Result<StageReport> {
    let tokenizer = load_tokenizer(&s.tokenizer)?;
    let data = generate_synthetic_dataset(&s.dataset)?;
    let n = s.images.clamp(1, data.generic.len());
    let step = data.generic.len() / n;
    let images: Vec<_> = (0..n).map(|i| &data.generic[i * step].image).collect();
    let curves = images
        .iter()
        .enumerate()
        .map(|(i, img)| scale_corruption_curve(&tokenizer, img, s.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = StageReport::default();
    let mean = mean_curve(&curves)?;
    let mut csv = String::from("k,mse\n");
    for (k, m) in mean.iter().enumerate() {
        csv.push_str(&format!("{k},{m}\n"));
    }
    report.write(s.out.join("scales.csv"), csv)?;
    let mut per = String::from("image,k,mse\n");
    for (i, c) in curves.iter().enumerate() {
        for (k, m) in c.mse.iter().enumerate() {
            per.push_str(&format!("{i},{k},{m}\n"));
        }
    }
    report.write(s.out.join("scales_per_image.csv"), per)?;
    for (k, img) in corruption_decodes(&tokenizer, images[0], s.seed)?
        .iter()
        .enumerate()
    {
        report.write(s.out.join(format!("corrupt_k{k}.ppm")), img.to_ppm())?;
    }
    Ok(report)
}

fn run_evaluate(s: &EvaluateStage) -> Result<StageReport> {
    let tokenizer = load_tokenizer(&s.tokenizer)?;
    let model = load_model(&s.model)?;
    let subjects = subject_set(&s.dataset)?;
    let protocol = EvalProtocol {
        sampler: crate::model::SamplerConfig {
            seed: s.seed,
            ..s.protocol.sampler.clone()
        },
        ..s.protocol.clone()
    };
    let r = evaluate_model(&model, &tokenizer, &subjects.images, &protocol, &s.subject)?;
    let mut report = StageReport::default();
    report.write(s.out.join("eval.csv"), r.csv())?;
    Ok(report)
}

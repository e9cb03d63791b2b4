//! The interval-sensitivity experiment: every prompt mode trained on the
//! synthetic interval corpus under the same budget.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::{encode_example, hit_rate, train, AdapterConfig, Backbone, BackboneConfig, BackboneInit, EncodedExample, IiaConfig, Model, Theta, TrainConfig, TrainState};
use crate::prompt::{Mode, PromptConfig};
use crate::synthetic::{interval_corpus, SyntheticConfig, SyntheticExample};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: SyntheticConfig,
    pub train_users: usize,
    pub val_users: usize,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub adapter: AdapterConfig,
    pub iia: IiaConfig,
    pub embedder_hidden: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig::default(),
            train_users: 800,
            val_users: 200,
            // vocab is filled in from the corpus
            backbone: BackboneConfig { layers: 3, d_model: 96, heads: 2, ffn: 0, context: 512, vocab: 0 },
            backbone_seed: 0,
            adapter: AdapterConfig::default(),
            iia: IiaConfig { heads: 2, d_q: 16 },
            embedder_hidden: 64,
            train: TrainConfig { epochs: 5, batch_size: 32, lr: 1e-3, stop_at_val_hr: Some(1.0), ..TrainConfig::default() },
            seeds: vec![0, 1, 2],
            modes: Mode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub test_hr1: f64,
    pub best_val_hr1: Option<f64>,
    pub epochs: usize,
}

fn encode(xs: &[SyntheticExample], mode: Mode, prompt: &PromptConfig, tok: &Tokenizer) -> Result<Vec<EncodedExample>> {
    xs.iter().map(|x| encode_example(&x.history, &x.candidates, mode, prompt, tok)).collect()
}

/// Tokenizer over the corpus titles and every fixed prompt string.
pub fn corpus_tokenizer(titles: &[String], prompt: &PromptConfig) -> Tokenizer {
    let mut texts = prompt.fixed_texts();
    texts.extend(titles.iter().cloned());
    Tokenizer::build(texts.iter().map(String::as_str))
}

pub fn run_interval_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&RunResult)) -> Result<Vec<RunResult>> {
    let corpus = interval_corpus(&cfg.corpus)?;
    let prompt = PromptConfig::default();
    let tok = corpus_tokenizer(&corpus.titles(), &prompt);
    let bcfg = BackboneConfig { vocab: tok.len(), ..cfg.backbone.clone() };
    let backbone = Backbone::new(bcfg, BackboneInit::StructuredPrior, &tok, cfg.backbone_seed)?;
    let (tr, va, te) = corpus.split(cfg.train_users, cfg.val_users);
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        let model = Model::new(backbone.clone(), tok.clone(), mode)?;
        let (tr, va, te) = (encode(tr, mode, &prompt, &tok)?, encode(va, mode, &prompt, &tok)?, encode(te, mode, &prompt, &tok)?);
        for &seed in &cfg.seeds {
            let theta = Theta::init(&model.backbone, &tok, cfg.adapter, cfg.iia, cfg.embedder_hidden, seed)?;
            let tcfg = TrainConfig { seed, ..cfg.train.clone() };
            let state = train(&model, TrainState::new(theta), &tr, &va, &tcfg, None)?;
            let r = RunResult {
                mode,
                seed,
                test_hr1: hit_rate(&model, &state.best, &te)?,
                best_val_hr1: state.best_val_hr1,
                epochs: state.epoch,
            };
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean test HR@1 per mode, in `modes` order.
pub fn mean_by_mode(results: &[RunResult], modes: &[Mode]) -> Vec<(Mode, f64)> {
    modes
        .iter()
        .map(|&m| {
            let xs: Vec<f64> = results.iter().filter(|r| r.mode == m).map(|r| r.test_hr1).collect();
            (m, xs.iter().sum::<f64>() / xs.len().max(1) as f64)
        })
        .collect()
}

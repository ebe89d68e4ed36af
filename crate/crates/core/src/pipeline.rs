//! Glue between a configuration, a dataset directory and the model: builds
//! prompts, pretrains the LM, trains and evaluates, and runs ablation arms.

use std::path::{Path, PathBuf};

use egmf_tensor::checkpoint::{load_checkpoint, save_checkpoint};
use egmf_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, AblationSet, EgmfConfig, Task};
use crate::data::{Dataset, Split, UtteranceFeatures};
use crate::error::{EgmfError, Result};
use crate::metrics::MetricReport;
use crate::model::EgmfModel;
use crate::prompt::{PromptTemplate, ScoreFormat, TaskPrompt};
use crate::synthetic::{PretrainCorpus, MANIFEST_FILE};
use crate::train::{evaluate, pretrain_lm, train, TrainLog};
use crate::vocab::Vocab;

/// A configuration bound to a dataset on disk.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: EgmfConfig,
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub template: PromptTemplate,
    pub classification: TaskPrompt,
    pub regression: TaskPrompt,
}

impl Pipeline {
    pub fn open(cfg: &EgmfConfig, data_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::open(&data_dir.join(MANIFEST_FILE))?;
        let m = &dataset.manifest;
        if m.task != cfg.train.task {
            return Err(EgmfError::Config(format!(
                "dataset task {:?} does not match train.task {:?}",
                m.task, cfg.train.task
            )));
        }
        let vocab = Vocab::load(&dataset.dir.join(&m.vocab))?;
        if vocab.len() != cfg.lm.vocab_size {
            return Err(EgmfError::Config(format!(
                "vocabulary has {} tokens but lm.vocab_size is {}",
                vocab.len(),
                cfg.lm.vocab_size
            )));
        }
        let template = PromptTemplate::from_config(&cfg.prompt, None)?;
        let n_classes = m.n_classes.unwrap_or(cfg.data.n_classes);
        let range = m.score_range.unwrap_or(cfg.data.score_range);
        let classification = TaskPrompt::classification(&template, &cfg.prompt.classification_instruction, &vocab, n_classes)?;
        let regression = TaskPrompt::regression(
            &template,
            &cfg.prompt.regression_instruction,
            &vocab,
            ScoreFormat::new(range, cfg.prompt.score_step)?,
        )?;
        let longest = classification.wrapped_len(cfg.lm.n_tokens, 1).max(regression.wrapped_len(
            cfg.lm.n_tokens,
            regression.score.as_ref().map_or(0, ScoreFormat::width),
        ));
        if longest > cfg.lm.max_seq_len {
            return Err(EgmfError::SequenceTooLong {
                len: longest,
                limit: cfg.lm.max_seq_len,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            vocab,
            template,
            classification,
            regression,
        })
    }

    pub fn task_prompt(&self) -> &TaskPrompt {
        match self.cfg.train.task {
            Task::Classification => &self.classification,
            Task::Regression => &self.regression,
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<UtteranceFeatures>> {
        self.dataset.load(split)
    }

    pub fn corpus(&self) -> PretrainCorpus<'_> {
        PretrainCorpus {
            vocab: &self.vocab,
            classification: &self.classification,
            regression: &self.regression,
            n_classes: self.dataset.manifest.n_classes.unwrap_or(self.cfg.data.n_classes),
            n_tokens: self.cfg.lm.n_tokens,
        }
    }

    /// Pretrains the toy LM and returns its weights with the step losses.
    pub fn pretrain(&self) -> Result<(ParamStore, Vec<f64>)> {
        let (_, store, losses) = pretrain_lm(&self.cfg, &self.corpus())?;
        Ok((store, losses))
    }

    /// Fresh model with the given ablation flags and pretrained LM weights.
    pub fn build_model(&self, lm_store: &ParamStore, ablation: &AblationSet) -> Result<EgmfModel> {
        let mut cfg = self.cfg.clone();
        cfg.train.ablation = ablation.clone();
        let m = &self.dataset.manifest;
        let mut model = EgmfModel::new(&cfg, m.d_audio, m.d_visual, self.task_prompt().clone())?;
        model.load_lm(lm_store)?;
        Ok(model)
    }

    /// Rebuilds a trained model from a checkpoint, refusing one written
    /// under a different configuration.
    pub fn load_model(&self, path: &Path) -> Result<EgmfModel> {
        let (header, store) = load_checkpoint(path)?;
        let expected = self.cfg.hash();
        match header.config_hash {
            Some(found) if found == expected => {}
            found => {
                return Err(EgmfError::ConfigMismatch {
                    expected,
                    found: found.unwrap_or_else(|| "<none>".into()),
                })
            }
        }
        let m = &self.dataset.manifest;
        let mut model = EgmfModel::new(&self.cfg, m.d_audio, m.d_visual, self.task_prompt().clone())?;
        let copied = model.store.copy_values_from(&store)?;
        if copied != model.store.len() {
            return Err(EgmfError::Data(format!(
                "{} holds {copied} of the model's {} parameters",
                path.display(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn save_model(&self, model: &EgmfModel, path: &Path) -> Result<()> {
        save_checkpoint(path, &model.store, self.cfg.train.seed, Some(&model.cfg.hash()))?;
        Ok(())
    }
}

/// Result of one ablation arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub ablation: AblationSet,
    pub report: MetricReport,
    pub train: TrainLog,
}

pub fn arm_name(set: &AblationSet) -> String {
    if set.is_empty() {
        "full".to_string()
    } else {
        set.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// The full model plus one arm per single flag, plus the configured
/// combination when it is not already covered.
pub fn default_arms(configured: &AblationSet) -> Vec<AblationSet> {
    let mut arms = vec![AblationSet::new()];
    arms.extend(Ablation::ALL.iter().map(|a| AblationSet::from([*a])));
    if configured.len() > 1 {
        arms.push(configured.clone());
    }
    arms
}

/// Trains and evaluates each arm from the same seed.
pub fn run_ablation(
    pipeline: &Pipeline,
    lm_store: &ParamStore,
    train_set: &[UtteranceFeatures],
    test_set: &[UtteranceFeatures],
    arms: &[AblationSet],
) -> Result<Vec<ArmResult>> {
    arms.iter()
        .map(|set| {
            crate::config::validate_ablation(set)?;
            let mut model = pipeline.build_model(lm_store, set)?;
            let log = train(&mut model, train_set)?;
            Ok(ArmResult {
                arm: arm_name(set),
                ablation: set.clone(),
                report: evaluate(&model, test_set)?,
                train: log,
            })
        })
        .collect()
}

/// `arm,metric,value,delta` rows; deltas are relative to the `full` arm
/// when present.
pub fn ablation_csv(results: &[ArmResult]) -> String {
    let full = results.iter().find(|r| r.ablation.is_empty());
    let mut out = String::from("arm,metric,value,delta\n");
    for r in results {
        for (metric, value) in r.report.scalars() {
            let base = full.and_then(|f| f.report.scalars().into_iter().find(|(k, _)| *k == metric));
            let delta = base.map_or(String::new(), |(_, b)| format!("{:.6}", value - b));
            out.push_str(&format!("{},{metric},{value:.6},{delta}\n", r.arm));
        }
    }
    out
}

/// Standard file locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn lm_checkpoint(&self) -> PathBuf {
        self.root.join("lm.ckpt")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

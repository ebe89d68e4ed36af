//! Run configuration: a single JSON document covering the model, the toy
//! language model, LoRA, prompts, training and the synthetic data.
//!
//! Two presets exist. [`EgmfConfig::desk`] (the `Default`) keeps every dimension small
//! enough to train on one CPU core in seconds; [`EgmfConfig::full`] uses
//! full-size dimensions (`d_av = 256`, `d_h = 512`).

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use egmf_tensor::Activation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EgmfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "drop_audio")]
    DropAudio,
    #[serde(rename = "drop_visual")]
    DropVisual,
    #[serde(rename = "drop_text")]
    DropText,
    #[serde(rename = "drop_expert_1")]
    DropExpert1,
    #[serde(rename = "drop_expert_2")]
    DropExpert2,
    #[serde(rename = "drop_expert_3")]
    DropExpert3,
    #[serde(rename = "no_lora")]
    NoLora,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Self::DropAudio,
        Self::DropVisual,
        Self::DropText,
        Self::DropExpert1,
        Self::DropExpert2,
        Self::DropExpert3,
        Self::NoLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DropAudio => "drop_audio",
            Self::DropVisual => "drop_visual",
            Self::DropText => "drop_text",
            Self::DropExpert1 => "drop_expert_1",
            Self::DropExpert2 => "drop_expert_2",
            Self::DropExpert3 => "drop_expert_3",
            Self::NoLora => "no_lora",
        }
    }

    /// Zero-based expert index removed by this flag, if any.
    pub fn dropped_expert(self) -> Option<usize> {
        match self {
            Self::DropExpert1 => Some(0),
            Self::DropExpert2 => Some(1),
            Self::DropExpert3 => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = EgmfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| EgmfError::Config(format!("unknown ablation flag {s:?}")))
    }
}

/// A set of ablation flags applied together.
pub type AblationSet = BTreeSet<Ablation>;

pub fn validate_ablation(set: &AblationSet) -> Result<()> {
    let all_modalities = [Ablation::DropAudio, Ablation::DropVisual, Ablation::DropText];
    if all_modalities.iter().all(|a| set.contains(a)) {
        return Err(EgmfError::Config(
            "cannot drop all three modalities (drop_audio + drop_visual + drop_text)".into(),
        ));
    }
    let experts = set.iter().filter(|a| a.dropped_expert().is_some()).count();
    if experts == 3 {
        return Err(EgmfError::Config("cannot drop all three experts".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    /// Bottleneck width is `d_hidden / ratio`.
    pub ratio: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_av: usize,
    pub d_hidden: usize,
    pub fusion_heads: usize,
    pub ffn_mult: usize,
    pub experts: Vec<ExpertSpec>,
    /// Hidden width of the context-aware gate MLP; `d_hidden / 2` when absent.
    pub gate_hidden: Option<usize>,
    /// Reserved. Must be zero: the desk-scale build is fully deterministic.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_av: 32,
            d_hidden: 64,
            fusion_heads: 4,
            ffn_mult: 4,
            experts: vec![
                ExpertSpec {
                    ratio: 8,
                    activation: Activation::Mish,
                },
                ExpertSpec {
                    ratio: 4,
                    activation: Activation::Gelu,
                },
                ExpertSpec {
                    ratio: 2,
                    activation: Activation::Swish,
                },
            ],
            gate_hidden: None,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn gate_hidden(&self) -> usize {
        self.gate_hidden.unwrap_or(self.d_hidden / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Number of pseudo-token copies injected into the prompt.
    pub n_tokens: usize,
    pub ffn_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_emb: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            n_tokens: 4,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Template text with `{PSEUDO}` and `{TASK}` placeholders. Ignored when
    /// `template_file` is set.
    pub template: String,
    pub template_file: Option<PathBuf>,
    pub classification_instruction: String,
    pub regression_instruction: String,
    /// Score grid step; must be a power of ten.
    pub score_step: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: "<bos> features {PSEUDO} end . {TASK}".into(),
            template_file: None,
            classification_instruction: "emotion :".into(),
            regression_instruction: "sentiment :".into(),
            score_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stops training after this many optimiser steps, when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub task: Task,
    pub ablation: AblationSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 10,
            max_steps: None,
            seed: 0,
            task: Task::Classification,
            ablation: AblationSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalStrengths {
    pub text: f64,
    pub audio: f64,
    pub visual: f64,
}

/// Parameters of the synthetic multimodal corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub language: String,
    pub task: Task,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub score_range: [f64; 2],
    pub d_audio: usize,
    pub d_visual: usize,
    pub text_len: [usize; 2],
    pub audio_len: [usize; 2],
    pub visual_len: [usize; 2],
    pub signal: SignalStrengths,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic-erc".into(),
            language: "synthetic".into(),
            task: Task::Classification,
            n_train: 448,
            n_valid: 112,
            n_test: 336,
            n_classes: 7,
            score_range: [-3.0, 3.0],
            d_audio: 16,
            d_visual: 16,
            text_len: [2, 6],
            audio_len: [4, 8],
            visual_len: [4, 8],
            signal: SignalStrengths {
                text: 1.0,
                audio: 0.3,
                visual: 0.3,
            },
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.signal;
        for (name, v) in [("text", s.text), ("audio", s.audio), ("visual", s.visual)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EgmfError::Config(format!("signal strength {name} = {v} outside [0, 1]")));
            }
        }
        if s.text <= 0.0 && s.audio <= 0.0 && s.visual <= 0.0 {
            return Err(EgmfError::Config("at least one signal strength must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(EgmfError::Config("noise must be a finite non-negative value".into()));
        }
        for (name, [lo, hi]) in [
            ("text_len", self.text_len),
            ("audio_len", self.audio_len),
            ("visual_len", self.visual_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(EgmfError::Config(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        match self.task {
            Task::Classification if !(2..=crate::vocab::LABEL_SLOTS).contains(&self.n_classes) => Err(
                EgmfError::Config(format!("n_classes must be in 2..={}", crate::vocab::LABEL_SLOTS)),
            ),
            Task::Regression if self.score_range != [-1.0, 1.0] && self.score_range != [-3.0, 3.0] => Err(
                EgmfError::Config("score_range must be [-1, 1] or [-3, 3]".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgmfConfig {
    pub model: ModelConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: SyntheticSpec,
}

impl Default for EgmfConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EgmfConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: SyntheticSpec::default(),
        }
    }

    /// Full-size dimensions. Trainable on CPU, but slowly.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.model.d_av = 256;
        cfg.model.d_hidden = 512;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EgmfError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| EgmfError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| EgmfError::io(path, e))
    }

    /// Sets every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(EgmfError::Config(msg));
        if m.experts.len() != 3 {
            return fail(format!("expected exactly 3 experts, got {}", m.experts.len()));
        }
        for (k, e) in m.experts.iter().enumerate() {
            if e.ratio == 0 || m.d_hidden % e.ratio != 0 {
                return fail(format!("expert {} ratio {} does not divide d_hidden {}", k + 1, e.ratio, m.d_hidden));
            }
        }
        if m.d_hidden % 8 != 0 {
            return fail(format!("d_hidden {} must be divisible by 8", m.d_hidden));
        }
        if m.fusion_heads == 0 || m.d_hidden % m.fusion_heads != 0 {
            return fail(format!("d_hidden {} not divisible by fusion_heads {}", m.d_hidden, m.fusion_heads));
        }
        if m.dropout != 0.0 {
            return fail("dropout is reserved and must be 0".into());
        }
        if m.d_av == 0 || m.gate_hidden() == 0 || m.ffn_mult == 0 {
            return fail("model dimensions must be positive".into());
        }
        let lm = &self.lm;
        if lm.n_heads == 0 || lm.d_emb % lm.n_heads != 0 {
            return fail(format!("d_emb {} not divisible by n_heads {}", lm.d_emb, lm.n_heads));
        }
        if lm.n_tokens == 0 {
            return fail("n_tokens must be at least 1".into());
        }
        if lm.vocab_size < crate::vocab::MIN_VOCAB {
            return fail(format!("vocab_size must be at least {}", crate::vocab::MIN_VOCAB));
        }
        if self.lora.rank == 0 {
            return fail("LoRA rank must be positive".into());
        }
        if self.train.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        crate::prompt::score_decimals(self.prompt.score_step)?;
        validate_ablation(&self.train.ablation)?;
        self.data.validate()?;
        if self.data.task != self.train.task {
            return fail("data.task and train.task disagree".into());
        }
        Ok(())
    }
}

//! The full pipeline: encoders, fusion, enhancer, pseudo-token projection
//! and the LoRA-adapted toy LM.

use egmf_tensor::{ParamId, ParamStore, RngState, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, AblationSet, EgmfConfig, Task};
use crate::data::{Target, UtteranceFeatures};
use crate::encoders::{embed_text, AudioVisualEncoder, Modality};
use crate::enhancer::{EnhanceOutput, Enhancer, GateOutput};
use crate::error::{EgmfError, Result};
use crate::fusion::{FusionBlock, FusionOutput};
use crate::lm::{AttentionMaps, ToyLm};
use crate::nn::Linear;
use crate::prompt::{wrap_input, ParsedScore, Segments, TaskPrompt, WrappedInput};

pub const LM_PREFIX: &str = "lm";

/// Index of the largest `logits[allowed[i]]`; ties go to the lowest `i`.
pub fn restricted_argmax(logits: &[f64], allowed: &[usize]) -> usize {
    let mut best = 0;
    for (i, &id) in allowed.iter().enumerate().skip(1) {
        if logits[id] > logits[allowed[best]] {
            best = i;
        }
    }
    best
}

/// `repeat(Linear(f), n_tokens)`.
pub fn make_pseudo_tokens(tape: &mut Tape, store: &ParamStore, proj: &Linear, f: Var, n_tokens: usize) -> Result<Var> {
    let row = proj.forward(tape, store, f)?;
    Ok(tape.repeat_rows(row, n_tokens)?)
}

/// Tape handles for one utterance up to the LM input.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub f_t: Var,
    pub f_a: Var,
    pub f_v: Var,
    pub fusion: FusionOutput,
    pub enhance: EnhanceOutput,
    pub pseudo: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: Encoded,
    pub wrapped: WrappedInput,
    pub logits: Var,
    pub lm_attention: AttentionMaps,
}

/// A prediction plus, for regression, the raw generated text.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Label(usize),
    Score { text: String, parsed: ParsedScore },
}

/// Per-utterance diagnostics exported by `inspect`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub gate: GateOutput,
    pub f_fusion: Vec<f64>,
    pub f_enhanced: Vec<f64>,
    /// `[head][query][key]`
    pub cross_attention: Vec<Vec<Vec<f64>>>,
    pub self_attention: Vec<Vec<Vec<f64>>>,
    pub segments: Segments,
    pub prediction: String,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub struct EgmfModel {
    pub cfg: EgmfConfig,
    pub store: ParamStore,
    pub audio: AudioVisualEncoder,
    pub visual: AudioVisualEncoder,
    pub fusion: FusionBlock,
    pub enhancer: Enhancer,
    pub pseudo_proj: Linear,
    pub lm: ToyLm,
    pub prompt: TaskPrompt,
    pub ablation: AblationSet,
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

impl EgmfModel {
    /// Builds a freshly initialised model. The LM base weights are random
    /// until [`load_lm`](Self::load_lm) copies pretrained values in.
    pub fn new(cfg: &EgmfConfig, d_audio: usize, d_visual: usize, prompt: TaskPrompt) -> Result<Self> {
        cfg.validate()?;
        if prompt.task != cfg.train.task {
            return Err(EgmfError::Config("prompt task does not match train.task".into()));
        }
        let m = &cfg.model;
        let mut rng = RngState::derive(cfg.train.seed, "init");
        let mut store = ParamStore::new();
        let audio = AudioVisualEncoder::new(&mut store, "encoder.audio", Modality::Audio, d_audio, m.d_av, &mut rng)?;
        let visual = AudioVisualEncoder::new(&mut store, "encoder.visual", Modality::Visual, d_visual, m.d_av, &mut rng)?;
        let fusion = FusionBlock::new(&mut store, "fusion", m, cfg.lm.d_emb, &mut rng)?;
        let enhancer = Enhancer::new(&mut store, "enhancer", m, &mut rng)?;
        let pseudo_proj = Linear::new(&mut store, "pseudo_proj", m.d_hidden, cfg.lm.d_emb, true, &mut rng)?;
        let mut lm = ToyLm::new(&mut store, LM_PREFIX, &cfg.lm, &mut rng)?;
        lm.attach_lora(&mut store, LM_PREFIX, &cfg.lora, &mut rng)?;
        lm.freeze_base(&mut store);
        let ablation = cfg.train.ablation.clone();
        if ablation.contains(&Ablation::NoLora) {
            for id in lm.adapter_params() {
                store.set_frozen(id, true);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            audio,
            visual,
            fusion,
            enhancer,
            pseudo_proj,
            lm,
            prompt,
            ablation,
        })
    }

    /// Copies pretrained LM base weights (matched by name) and keeps them
    /// frozen.
    pub fn load_lm(&mut self, lm_store: &ParamStore) -> Result<()> {
        let base = self.lm.base_params();
        for id in &base {
            let name = &self.store.get(*id).name;
            let src = lm_store
                .by_name(name)
                .ok_or_else(|| EgmfError::Config(format!("LM checkpoint lacks parameter {name}")))?;
            let value = src.value().clone();
            self.store.set_value(*id, value)?;
        }
        self.lm.freeze_base(&mut self.store);
        Ok(())
    }

    pub fn lm_base_params(&self) -> Vec<ParamId> {
        self.lm.base_params()
    }

    fn dropped_experts(&self) -> Vec<usize> {
        self.ablation.iter().filter_map(|a| a.dropped_expert()).collect()
    }

    fn use_adapters(&self) -> bool {
        !self.ablation.contains(&Ablation::NoLora)
    }

    /// Encoders, fusion, enhancer and pseudo tokens.
    pub fn encode(&self, tape: &mut Tape, u: &UtteranceFeatures) -> Result<Encoded> {
        let s = &self.store;
        let d_av = self.cfg.model.d_av;
        let f_t = if self.ablation.contains(&Ablation::DropText) {
            tape.constant(Tensor::zeros(&[u.text.len().max(1), self.cfg.lm.d_emb]))
        } else {
            embed_text(tape, s, self.lm.embed, &u.text)?
        };
        let f_a = if self.ablation.contains(&Ablation::DropAudio) {
            tape.constant(Tensor::zeros(&[d_av]))
        } else {
            self.audio.forward(tape, s, &u.audio)?
        };
        let f_v = if self.ablation.contains(&Ablation::DropVisual) {
            tape.constant(Tensor::zeros(&[d_av]))
        } else {
            self.visual.forward(tape, s, &u.visual)?
        };
        let fusion = self.fusion.forward(tape, s, f_t, f_a, f_v)?;
        let enhance = self.enhancer.enhance(tape, s, fusion.f_fusion, &self.dropped_experts())?;
        let pseudo = make_pseudo_tokens(tape, s, &self.pseudo_proj, enhance.f_enhanced, self.cfg.lm.n_tokens)?;
        Ok(Encoded {
            f_t,
            f_a,
            f_v,
            fusion,
            enhance,
            pseudo,
        })
    }

    /// Wraps the pseudo tokens with the prompt plus `answer` and runs the LM,
    /// producing logits for the last `last_rows` positions.
    pub fn run_lm(&self, tape: &mut Tape, encoded: Encoded, answer: &[usize], last_rows: Option<usize>) -> Result<ForwardOutput> {
        let wrapped = wrap_input(
            tape,
            &self.store,
            self.lm.embed,
            encoded.pseudo,
            &self.prompt,
            answer,
            self.cfg.lm.max_seq_len,
        )?;
        let (logits, lm_attention) = self.lm.forward(tape, &self.store, wrapped.embeddings, self.use_adapters(), last_rows)?;
        Ok(ForwardOutput {
            encoded,
            wrapped,
            logits,
            lm_attention,
        })
    }

    pub fn forward(&self, tape: &mut Tape, u: &UtteranceFeatures, answer: &[usize], last_rows: Option<usize>) -> Result<ForwardOutput> {
        let encoded = self.encode(tape, u)?;
        self.run_lm(tape, encoded, answer, last_rows)
    }

    fn score_format(&self) -> Result<&crate::prompt::ScoreFormat> {
        self.prompt
            .score
            .as_ref()
            .ok_or_else(|| EgmfError::Config("regression prompt has no score format".into()))
    }

    /// Cross-entropy over the full vocabulary at the answer positions.
    pub fn loss(&self, tape: &mut Tape, u: &UtteranceFeatures) -> Result<Var> {
        match (self.prompt.task, u.target) {
            (Task::Classification, Target::Label(c)) => {
                let gold = *self
                    .prompt
                    .labels
                    .get(c)
                    .ok_or_else(|| EgmfError::Data(format!("label {c} has no reserved token")))?;
                let out = self.forward(tape, u, &[], Some(1))?;
                Ok(tape.cross_entropy(out.logits, &[gold])?)
            }
            (Task::Regression, t) => {
                let score = t.score().expect("scores are always available");
                let gold = self.score_ids(score)?;
                let width = gold.len();
                let out = self.forward(tape, u, &gold[..width - 1], Some(width))?;
                Ok(tape.cross_entropy(out.logits, &gold)?)
            }
            (Task::Classification, Target::Score(_)) => {
                Err(EgmfError::Data("classification model given a score target".into()))
            }
        }
    }

    /// Gold score spelled as token ids.
    pub fn score_ids(&self, score: f64) -> Result<Vec<usize>> {
        let fmt = self.score_format()?;
        let text = fmt.render(score)?;
        let chars = &self.prompt.score_chars;
        text.chars()
            .map(|c| {
                crate::vocab::SCORE_CHARS
                    .iter()
                    .position(|s| s.starts_with(c))
                    .map(|i| chars[i])
                    .ok_or_else(|| EgmfError::UnknownToken(c.to_string()))
            })
            .collect()
    }

    fn score_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|id| {
                let i = self.prompt.score_chars.iter().position(|c| c == id).expect("score token");
                crate::vocab::SCORE_CHARS[i]
            })
            .collect()
    }

    /// Restricted argmax over label tokens at the final position.
    pub fn predict_label_from(&self, tape: &mut Tape, encoded: Encoded) -> Result<(usize, ForwardOutput)> {
        let out = self.run_lm(tape, encoded, &[], Some(1))?;
        let logits = tape.value(out.logits);
        Ok((restricted_argmax(logits.data(), &self.prompt.labels), out))
    }

    /// Greedy decoding over score characters for a fixed number of steps.
    pub fn predict_score_from(&self, tape: &mut Tape, encoded: Encoded) -> Result<(String, ParsedScore)> {
        let fmt = self.score_format()?.clone();
        let mut generated = Vec::with_capacity(fmt.width());
        for _ in 0..fmt.width() {
            let out = self.run_lm(tape, encoded.clone(), &generated, Some(1))?;
            let logits = tape.value(out.logits);
            let k = restricted_argmax(logits.data(), &self.prompt.score_chars);
            generated.push(self.prompt.score_chars[k]);
        }
        let text = self.score_text(&generated);
        let parsed = fmt.parse(&text);
        Ok((text, parsed))
    }

    pub fn predict(&self, u: &UtteranceFeatures) -> Result<Prediction> {
        let mut tape = Tape::new();
        let encoded = self.encode(&mut tape, u)?;
        match self.prompt.task {
            Task::Classification => Ok(Prediction::Label(self.predict_label_from(&mut tape, encoded)?.0)),
            Task::Regression => {
                let (text, parsed) = self.predict_score_from(&mut tape, encoded)?;
                Ok(Prediction::Score { text, parsed })
            }
        }
    }

    pub fn diagnostics(&self, u: &UtteranceFeatures) -> Result<Diagnostics> {
        let mut tape = Tape::new();
        let encoded = self.encode(&mut tape, u)?;
        let out = self.run_lm(&mut tape, encoded.clone(), &[], Some(1))?;
        let prediction = match self.predict(u)? {
            Prediction::Label(c) => format!("label {c}"),
            Prediction::Score { text, parsed } => format!("{text} -> {}", parsed.value),
        };
        let maps = |ws: &[Var]| ws.iter().map(|w| matrix_rows(tape.value(*w))).collect();
        Ok(Diagnostics {
            gate: encoded.enhance.gate(&tape),
            f_fusion: tape.value(encoded.fusion.f_fusion).data().to_vec(),
            f_enhanced: tape.value(encoded.enhance.f_enhanced).data().to_vec(),
            cross_attention: maps(&encoded.fusion.cross_weights),
            self_attention: maps(&encoded.fusion.self_weights),
            segments: out.wrapped.segments.clone(),
            prediction,
            target: u.target,
        })
    }

    /// Parameters that training may change.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }
}

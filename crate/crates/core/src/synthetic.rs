//! Synthetic multimodal corpora and the toy-LM pretraining corpus.
//!
//! Classification: each sample draws a class `c`. Text tokens come from
//! content-word block `c` or `c + 1` with probability `s_t` (neighbouring
//! classes share a block, so text alone is not perfectly separable) and are
//! uniform content words otherwise. Audio and visual rows are
//! `s_m · p_m[c] + σ · N(0, I)` for a fixed unit prototype `p_m[c]`.
//!
//! Regression: a score on the 0.1 grid is drawn uniformly from the range.
//! Text words come from the sentiment bin of the score with probability
//! `s_t`; audio and visual rows are `s_m · (score / hi) · u_m + σ · N(0, I)`.

use std::path::Path;

use egmf_tensor::{RngState, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::config::{SyntheticSpec, Task};
use crate::data::{write_split, DatasetManifest, Split, SplitSizes, Target, UtteranceFeatures};
use crate::error::{EgmfError, Result};
use crate::prompt::{ScoreFormat, TaskPrompt};
use crate::vocab::Vocab;

/// Number of sentiment bins the content words are split into.
pub const SENTIMENT_BINS: usize = 7;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

fn normal(rng: &mut RngState) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(dim: usize, rng: &mut RngState) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sentiment_bin(score: f64, range: [f64; 2]) -> usize {
    let t = (score - range[0]) / (range[1] - range[0]);
    ((t * SENTIMENT_BINS as f64).floor() as usize).min(SENTIMENT_BINS - 1)
}

fn pick(words: &[usize], rng: &mut RngState) -> usize {
    words[rng.below(words.len())]
}

/// Generator state shared by all splits of one corpus.
pub struct SyntheticGenerator<'a> {
    spec: &'a SyntheticSpec,
    vocab: &'a Vocab,
    audio_protos: Vec<Vec<f64>>,
    visual_protos: Vec<Vec<f64>>,
}

impl<'a> SyntheticGenerator<'a> {
    pub fn new(spec: &'a SyntheticSpec, vocab: &'a Vocab) -> Result<Self> {
        spec.validate()?;
        let n_blocks = match spec.task {
            Task::Classification => spec.n_classes + 1,
            Task::Regression => SENTIMENT_BINS,
        };
        if vocab.content().len() < n_blocks {
            return Err(EgmfError::Config(format!(
                "vocabulary has {} content words, need at least {n_blocks}",
                vocab.content().len()
            )));
        }
        let mut rng = RngState::derive(spec.seed, "prototypes");
        let n_protos = match spec.task {
            Task::Classification => spec.n_classes,
            Task::Regression => 1,
        };
        let audio_protos = (0..n_protos).map(|_| unit_vector(spec.d_audio, &mut rng)).collect();
        let visual_protos = (0..n_protos).map(|_| unit_vector(spec.d_visual, &mut rng)).collect();
        Ok(Self {
            spec,
            vocab,
            audio_protos,
            visual_protos,
        })
    }

    fn sequence(&self, rng: &mut RngState, len: [usize; 2], centre: &[f64], strength: f64) -> Tensor {
        let l = len[0] + rng.below(len[1] - len[0] + 1);
        let d = centre.len();
        let data = (0..l * d)
            .map(|i| strength * centre[i % d] + self.spec.noise * normal(rng))
            .collect();
        Tensor::matrix(l, d, data).expect("sequence shape")
    }

    fn text(&self, rng: &mut RngState, blocks: &[usize], n_blocks: usize) -> Vec<usize> {
        let [lo, hi] = self.spec.text_len;
        let l = lo + rng.below(hi - lo + 1);
        (0..l)
            .map(|_| {
                if rng.uniform(0.0, 1.0) < self.spec.signal.text {
                    let b = blocks[rng.below(blocks.len())];
                    pick(self.vocab.content_block(b, n_blocks), rng)
                } else {
                    pick(self.vocab.content(), rng)
                }
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut RngState) -> UtteranceFeatures {
        let s = &self.spec;
        match s.task {
            Task::Classification => {
                let c = rng.below(s.n_classes);
                let text = self.text(rng, &[c, c + 1], s.n_classes + 1);
                let audio = self.sequence(rng, s.audio_len, &self.audio_protos[c], s.signal.audio);
                let visual = self.sequence(rng, s.visual_len, &self.visual_protos[c], s.signal.visual);
                UtteranceFeatures {
                    text,
                    audio,
                    visual,
                    target: Target::Label(c),
                }
            }
            Task::Regression => {
                let [lo, hi] = s.score_range;
                let steps = ((hi - lo) * 10.0).round() as usize;
                let score = lo + rng.below(steps + 1) as f64 / 10.0;
                let score = (score * 10.0).round() / 10.0;
                let text = self.text(rng, &[sentiment_bin(score, s.score_range)], SENTIMENT_BINS);
                let level = score / hi;
                let audio = self.sequence(rng, s.audio_len, &self.audio_protos[0], s.signal.audio * level);
                let visual = self.sequence(rng, s.visual_len, &self.visual_protos[0], s.signal.visual * level);
                UtteranceFeatures {
                    text,
                    audio,
                    visual,
                    target: Target::Score(score),
                }
            }
        }
    }

    pub fn split(&self, split: Split, n: usize) -> Vec<UtteranceFeatures> {
        let mut rng = RngState::derive(self.spec.seed, split.name());
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let s = self.spec;
        DatasetManifest {
            name: s.name.clone(),
            language: s.language.clone(),
            task: s.task,
            n_classes: (s.task == Task::Classification).then_some(s.n_classes),
            score_range: (s.task == Task::Regression).then_some(s.score_range),
            splits: SplitSizes {
                train: s.n_train,
                valid: s.n_valid,
                test: s.n_test,
            },
            d_audio: s.d_audio,
            d_visual: s.d_visual,
            vocab: VOCAB_FILE.to_string(),
        }
    }
}

/// Writes manifest, vocabulary and the three splits into `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, vocab: &Vocab, dir: &Path) -> Result<DatasetManifest> {
    let generator = SyntheticGenerator::new(spec, vocab)?;
    std::fs::create_dir_all(dir).map_err(|e| EgmfError::io(dir, e))?;
    let manifest = generator.manifest();
    for split in Split::ALL {
        let records = generator.split(split, manifest.split_size(split));
        write_split(&dir.join(format!("{}.jsonl", split.name())), &records)?;
    }
    vocab.save(&dir.join(VOCAB_FILE))?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Source of token sequences for pretraining the toy LM.
///
/// Each sequence is a filled-in prompt whose pseudo-token slots hold
/// content words from one block, followed by the answer for that block:
/// the block's label token for classification prompts, or a score from
/// the block's sentiment bin for regression prompts.
pub struct PretrainCorpus<'a> {
    pub vocab: &'a Vocab,
    pub classification: &'a TaskPrompt,
    pub regression: &'a TaskPrompt,
    pub n_classes: usize,
    pub n_tokens: usize,
}

impl PretrainCorpus<'_> {
    pub fn sequence(&self, rng: &mut RngState) -> Result<Vec<usize>> {
        let regression = rng.below(2) == 1;
        let prompt = if regression { self.regression } else { self.classification };
        let (block, n_blocks, answer) = if regression {
            let fmt = prompt
                .score
                .as_ref()
                .ok_or_else(|| EgmfError::Config("regression prompt without a score format".into()))?;
            let range = [fmt.lo, fmt.hi];
            let steps = ((fmt.hi - fmt.lo) * 10.0).round() as usize;
            let score = fmt.snap(fmt.lo + rng.below(steps + 1) as f64 / 10.0);
            (sentiment_bin(score, range), SENTIMENT_BINS, fmt.encode(score, self.vocab)?)
        } else {
            let c = rng.below(self.n_classes);
            (c, self.n_classes + 1, vec![self.vocab.label(c)])
        };
        let words = self.vocab.content_block(block, n_blocks);
        let mut seq = prompt.prefix.clone();
        seq.extend((0..self.n_tokens).map(|_| pick(words, rng)));
        seq.extend_from_slice(&prompt.suffix);
        seq.extend_from_slice(&prompt.instruction);
        seq.extend(answer);
        Ok(seq)
    }
}

/// Default score format for a regression corpus.
pub fn score_format(spec: &SyntheticSpec, step: f64) -> Result<ScoreFormat> {
    ScoreFormat::new(spec.score_range, step)
}

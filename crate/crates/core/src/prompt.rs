//! Prompt templates, score strings and assembly of the wrapped LM input
//! `[prefix; pseudo; suffix; task]`.

use std::ops::Range;
use std::path::Path;

use egmf_tensor::{ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::{PromptConfig, Task};
use crate::error::{EgmfError, Result};
use crate::vocab::Vocab;

pub const PSEUDO_SLOT: &str = "{PSEUDO}";
pub const TASK_SLOT: &str = "{TASK}";

/// A whitespace-tokenized template split around its two placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub prefix: Vec<String>,
    pub suffix: Vec<String>,
    /// Tokens following `{TASK}`; they extend the task segment.
    pub trailer: Vec<String>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let find = |slot: &str| {
            let hits: Vec<usize> = words.iter().enumerate().filter(|(_, w)| **w == slot).map(|(i, _)| i).collect();
            match hits.as_slice() {
                [i] => Ok(*i),
                _ => Err(EgmfError::Config(format!(
                    "prompt template must contain {slot} exactly once, found {}",
                    hits.len()
                ))),
            }
        };
        let p = find(PSEUDO_SLOT)?;
        let t = find(TASK_SLOT)?;
        if t < p {
            return Err(EgmfError::Config(format!("{TASK_SLOT} must follow {PSEUDO_SLOT} in the prompt template")));
        }
        let own = |s: &[&str]| s.iter().map(|w| w.to_string()).collect();
        Ok(Self {
            prefix: own(&words[..p]),
            suffix: own(&words[p + 1..t]),
            trailer: own(&words[t + 1..]),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EgmfError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_config(cfg: &PromptConfig, base_dir: Option<&Path>) -> Result<Self> {
        match &cfg.template_file {
            Some(file) => {
                let path = match base_dir {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                Self::load(&path)
            }
            None => Self::parse(&cfg.template),
        }
    }
}

/// Number of decimals implied by a power-of-ten grid step.
pub fn score_decimals(step: f64) -> Result<usize> {
    (0..=6)
        .find(|&d| (step * 10f64.powi(d as i32) - 1.0).abs() < 1e-9)
        .ok_or_else(|| EgmfError::Config(format!("score step {step} must be a power of ten between 1 and 1e-6")))
}

/// Outcome of parsing a generated score string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedScore {
    pub value: f64,
    pub parse_failure: bool,
    pub clamped: bool,
}

/// Fixed-format score strings such as `+0.5` or `-2.3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFormat {
    pub lo: f64,
    pub hi: f64,
    pub decimals: usize,
}

impl ScoreFormat {
    pub fn new(range: [f64; 2], step: f64) -> Result<Self> {
        let [lo, hi] = range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(EgmfError::Config(format!("invalid score range [{lo}, {hi}]")));
        }
        Ok(Self {
            lo,
            hi,
            decimals: score_decimals(step)?,
        })
    }

    fn scale(&self) -> f64 {
        10f64.powi(self.decimals as i32)
    }

    /// Nearest grid point.
    pub fn snap(&self, value: f64) -> f64 {
        let v = (value * self.scale()).round() / self.scale();
        if v == 0.0 {
            0.0
        } else {
            v
        }
    }

    /// Characters in every rendered score: sign, integer digits, and the
    /// fractional part when the grid has one.
    pub fn width(&self) -> usize {
        let int_digits = self.lo.abs().max(self.hi.abs()).trunc().to_string().len();
        let frac = if self.decimals > 0 { 1 + self.decimals } else { 0 };
        1 + int_digits + frac
    }

    /// Renders a score on the grid, zero padding the integer part so that
    /// every string has [`width`](Self::width) characters.
    pub fn render(&self, value: f64) -> Result<String> {
        if !(self.lo..=self.hi).contains(&value) {
            return Err(EgmfError::Data(format!(
                "score {value} outside range [{}, {}]",
                self.lo, self.hi
            )));
        }
        let v = self.snap(value);
        let digits = self.width() - 1;
        Ok(format!("{}{:0digits$.prec$}", if v < 0.0 { '-' } else { '+' }, v.abs(), prec = self.decimals))
    }

    pub fn encode(&self, value: f64, vocab: &Vocab) -> Result<Vec<usize>> {
        self.render(value)?
            .chars()
            .map(|c| vocab.id(c.encode_utf8(&mut [0; 4])))
            .collect()
    }

    pub fn decode(&self, ids: &[usize], vocab: &Vocab) -> Result<String> {
        ids.iter().map(|&id| vocab.token(id)).collect()
    }

    /// Parses generated text; unparseable output becomes 0.0 with the
    /// failure flag set, and out-of-range values are clamped.
    pub fn parse(&self, text: &str) -> ParsedScore {
        match text.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => {
                let c = v.clamp(self.lo, self.hi);
                ParsedScore {
                    value: c,
                    parse_failure: false,
                    clamped: c != v,
                }
            }
            _ => ParsedScore {
                value: 0.0,
                parse_failure: true,
                clamped: false,
            },
        }
    }
}

/// Token ids for every fixed part of the prompt of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    pub task: Task,
    pub prefix: Vec<usize>,
    pub suffix: Vec<usize>,
    pub instruction: Vec<usize>,
    /// Reserved label token per class (classification).
    pub labels: Vec<usize>,
    /// Score spelling (regression).
    pub score: Option<ScoreFormat>,
    pub score_chars: Vec<usize>,
}

impl TaskPrompt {
    pub fn classification(template: &PromptTemplate, instruction: &str, vocab: &Vocab, n_classes: usize) -> Result<Self> {
        Self::build(template, instruction, vocab, Task::Classification, vocab.labels(n_classes).to_vec(), None)
    }

    pub fn regression(template: &PromptTemplate, instruction: &str, vocab: &Vocab, score: ScoreFormat) -> Result<Self> {
        Self::build(template, instruction, vocab, Task::Regression, Vec::new(), Some(score))
    }

    fn build(
        template: &PromptTemplate,
        instruction: &str,
        vocab: &Vocab,
        task: Task,
        labels: Vec<usize>,
        score: Option<ScoreFormat>,
    ) -> Result<Self> {
        let ids = |words: &[String]| words.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>();
        let mut instruction = vocab.encode(instruction)?;
        instruction.extend(ids(&template.trailer)?);
        if instruction.is_empty() {
            return Err(EgmfError::Config("the task segment of the prompt is empty".into()));
        }
        Ok(Self {
            task,
            prefix: ids(&template.prefix)?,
            suffix: ids(&template.suffix)?,
            instruction,
            labels,
            score,
            score_chars: vocab.score_chars().to_vec(),
        })
    }

    /// Rows of the wrapped input for `n_tokens` pseudo tokens and an
    /// optional answer continuation.
    pub fn wrapped_len(&self, n_tokens: usize, answer: usize) -> usize {
        self.prefix.len() + n_tokens + self.suffix.len() + self.instruction.len() + answer
    }
}

/// Position ranges of each segment of a wrapped input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub prefix: Range<usize>,
    pub pseudo: Range<usize>,
    pub suffix: Range<usize>,
    pub task: Range<usize>,
}

/// The LM input sequence in embedding space.
#[derive(Debug, Clone)]
pub struct WrappedInput {
    pub embeddings: Var,
    pub segments: Segments,
    pub len: usize,
}

/// Concatenates `[prefix; pseudo; suffix; task ++ answer]`, looking the
/// text segments up in the embedding table `embed`.
pub fn wrap_input(
    tape: &mut Tape,
    store: &ParamStore,
    embed: ParamId,
    pseudo: Var,
    prompt: &TaskPrompt,
    answer: &[usize],
    max_seq_len: usize,
) -> Result<WrappedInput> {
    let n_pseudo = tape.shape(pseudo)[0];
    let len = prompt.wrapped_len(n_pseudo, answer.len());
    if len > max_seq_len {
        return Err(EgmfError::SequenceTooLong { len, limit: max_seq_len });
    }
    let table = tape.param(store, embed);
    let mut task_ids = prompt.instruction.clone();
    task_ids.extend_from_slice(answer);
    let mut parts = Vec::with_capacity(4);
    if !prompt.prefix.is_empty() {
        parts.push(tape.gather_rows(table, &prompt.prefix)?);
    }
    parts.push(pseudo);
    if !prompt.suffix.is_empty() {
        parts.push(tape.gather_rows(table, &prompt.suffix)?);
    }
    if !task_ids.is_empty() {
        parts.push(tape.gather_rows(table, &task_ids)?);
    }
    let embeddings = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let p = prompt.prefix.len();
    let s = p + n_pseudo;
    let t = s + prompt.suffix.len();
    Ok(WrappedInput {
        embeddings,
        segments: Segments {
            prefix: 0..p,
            pseudo: p..s,
            suffix: s..t,
            task: t..len,
        },
        len,
    })
}

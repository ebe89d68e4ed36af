//! JSONL dataset format and its manifest.
//!
//! Each split file holds one record per line:
//! `{"text": [ids], "audio": [[f, ...], ...], "visual": [[f, ...], ...], "target": 3}`
//! where `target` is a class index for classification or a float score for
//! regression.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines, Write};
use std::path::{Path, PathBuf};

use egmf_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{EgmfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Label(usize),
    Score(f64),
}

impl Target {
    pub fn label(self) -> Option<usize> {
        match self {
            Self::Label(c) => Some(c),
            Self::Score(_) => None,
        }
    }

    pub fn score(self) -> Option<f64> {
        match self {
            Self::Label(c) => Some(c as f64),
            Self::Score(s) => Some(s),
        }
    }
}

/// One utterance: token ids plus per-modality feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub text: Vec<usize>,
    /// `[L_a×d_a]`
    pub audio: Tensor,
    /// `[L_v×d_v]`
    pub visual: Tensor,
    pub target: Target,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    text: Vec<usize>,
    audio: Vec<Vec<Option<f64>>>,
    visual: Vec<Vec<Option<f64>>>,
    target: Target,
}

#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    text: &'a [usize],
    audio: Vec<&'a [f64]>,
    visual: Vec<&'a [f64]>,
    target: Target,
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.shape()[0]).map(|i| t.row(i)).collect()
}

impl UtteranceFeatures {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&RecordOut {
            text: &self.text,
            audio: rows(&self.audio),
            visual: rows(&self.visual),
            target: self.target,
        })?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub language: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_range: Option<[f64; 2]>,
    pub splits: SplitSizes,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Vocabulary file, relative to the manifest.
    pub vocab: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EgmfError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| EgmfError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| EgmfError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Classification => match self.n_classes {
                Some(n) if (2..=crate::vocab::LABEL_SLOTS).contains(&n) => {}
                _ => return Err(EgmfError::Data("classification manifest needs n_classes in 2..=16".into())),
            },
            Task::Regression => match self.score_range {
                Some(r) if r == [-1.0, 1.0] || r == [-3.0, 3.0] => {}
                _ => return Err(EgmfError::Data("regression manifest needs score_range [-1, 1] or [-3, 3]".into())),
            },
        }
        if self.d_audio == 0 || self.d_visual == 0 {
            return Err(EgmfError::Data("feature dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Valid => self.splits.valid,
            Split::Test => self.splits.test,
        }
    }
}

/// A manifest together with the directory its relative paths resolve in.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab_size: usize,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let vocab = crate::vocab::Vocab::load(&dir.join(&manifest.vocab))?;
        Ok(Self {
            dir,
            manifest,
            vocab_size: vocab.len(),
        })
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{}.jsonl", split.name()))
    }

    /// Streams the records of a split, validating each one.
    pub fn reader(&self, split: Split) -> Result<SplitReader> {
        let path = self.split_path(split);
        let file = File::open(&path).map_err(|e| EgmfError::io(&path, e))?;
        Ok(SplitReader {
            path,
            lines: BufReader::new(file).lines(),
            line: 0,
            manifest: self.manifest.clone(),
            vocab_size: self.vocab_size,
        })
    }

    /// Loads a whole split and checks its size against the manifest.
    pub fn load(&self, split: Split) -> Result<Vec<UtteranceFeatures>> {
        let records = self.reader(split)?.collect::<Result<Vec<_>>>()?;
        let expected = self.manifest.split_size(split);
        if records.len() != expected {
            return Err(EgmfError::Data(format!(
                "{} has {} records, manifest declares {expected}",
                self.split_path(split).display(),
                records.len()
            )));
        }
        Ok(records)
    }
}

pub struct SplitReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line: usize,
    manifest: DatasetManifest,
    vocab_size: usize,
}

impl SplitReader {
    fn schema(&self, field: &str, message: impl Into<String>) -> EgmfError {
        EgmfError::Schema {
            path: self.path.clone(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn features(&self, field: &str, rows: Vec<Vec<Option<f64>>>, dim: usize) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(self.schema(field, "sequence must have at least one row"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(self.schema(field, format!("row {r} has {} values, expected {dim}", row.len())));
            }
            for (c, v) in row.iter().enumerate() {
                match v {
                    Some(x) if x.is_finite() => data.push(*x),
                    _ => return Err(self.schema(field, format!("value [{r}][{c}] is not a finite number"))),
                }
            }
        }
        Ok(Tensor::new(vec![rows.len(), dim], data)?)
    }

    fn convert(&self, raw: RawRecord) -> Result<UtteranceFeatures> {
        if raw.text.is_empty() {
            return Err(self.schema("text", "at least one token is required"));
        }
        if let Some(id) = raw.text.iter().find(|&&id| id >= self.vocab_size) {
            return Err(self.schema("text", format!("token id {id} outside vocabulary of size {}", self.vocab_size)));
        }
        let audio = self.features("audio", raw.audio, self.manifest.d_audio)?;
        let visual = self.features("visual", raw.visual, self.manifest.d_visual)?;
        let target = match (self.manifest.task, raw.target) {
            (Task::Classification, Target::Label(c)) => {
                let n = self.manifest.n_classes.unwrap_or(0);
                if c >= n {
                    return Err(self.schema("target", format!("label {c} outside 0..{n}")));
                }
                Target::Label(c)
            }
            (Task::Classification, Target::Score(s)) => {
                return Err(self.schema("target", format!("expected an integer label, found {s}")));
            }
            (Task::Regression, t) => {
                let s = t.score().unwrap_or(f64::NAN);
                let [lo, hi] = self.manifest.score_range.unwrap_or([-1.0, 1.0]);
                if !(lo..=hi).contains(&s) {
                    return Err(self.schema("target", format!("score {s} outside [{lo}, {hi}]")));
                }
                Target::Score(s)
            }
        };
        Ok(UtteranceFeatures {
            text: raw.text,
            audio,
            visual,
            target,
        })
    }
}

impl Iterator for SplitReader {
    type Item = Result<UtteranceFeatures>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(EgmfError::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(EgmfError::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(self.convert(raw));
        }
    }
}

pub fn write_split(path: &Path, records: &[UtteranceFeatures]) -> Result<()> {
    let file = File::create(path).map_err(|e| EgmfError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json_line()?).map_err(|e| EgmfError::io(path, e))?;
    }
    w.flush().map_err(|e| EgmfError::io(path, e))
}

//! Per-modality encoders: temporal mean pooling followed by a two-layer
//! GELU MLP for audio and visual sequences, and an embedding-table lookup
//! for text.

use egmf_tensor::{Activation, ParamId, ParamStore, RngState, Tape, Tensor, Var};

use crate::error::{EgmfError, Result};
use crate::nn::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::Visual => "visual",
        }
    }
}

/// Mean-pool then `d_in → d_av → d_av` with GELU in between.
#[derive(Debug, Clone)]
pub struct AudioVisualEncoder {
    pub modality: Modality,
    pub d_in: usize,
    pub d_av: usize,
    pub mlp: Mlp,
}

impl AudioVisualEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modality: Modality,
        d_in: usize,
        d_av: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            modality,
            d_in,
            d_av,
            mlp: Mlp::new(store, name, (d_in, d_av, d_av), Activation::Gelu, rng)?,
        })
    }

    /// Encodes a `[L×d_in]` sequence to a `[d_av]` vector.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: &Tensor) -> Result<Var> {
        let (len, d) = seq.dims2("encode_audio_visual")?;
        if d != self.d_in {
            return Err(EgmfError::Config(format!(
                "{} features have dimension {d}, encoder expects {}",
                self.modality.name(),
                self.d_in
            )));
        }
        if len == 0 {
            return Err(EgmfError::Data(format!("empty {} sequence", self.modality.name())));
        }
        let x = tape.constant(seq.clone());
        let pooled = tape.mean_rows(x)?;
        self.mlp.forward(tape, store, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Rows of the (frozen) LM embedding table for `ids`.
pub fn embed_text(tape: &mut Tape, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
    let size = store.value(table).shape()[0];
    if ids.is_empty() {
        return Err(EgmfError::Data("empty text sequence".into()));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= size) {
        return Err(EgmfError::OutOfVocabulary { id, size });
    }
    let t = tape.param(store, table);
    Ok(tape.gather_rows(t, ids)?)
}

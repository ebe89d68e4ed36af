//! Cross-modal fusion: text attends to the audio-visual pair, then to
//! itself, then a position-wise FFN; each step is followed by a residual
//! add and LayerNorm, and the result is mean-pooled over text positions.

use egmf_tensor::{Activation, ParamId, ParamStore, RngState, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{EgmfError, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};

#[derive(Debug, Clone)]
pub struct ProjectedStreams {
    /// `[L_t×d_h]`
    pub h_t: Var,
    /// `[2×d_h]`, audio row then visual row.
    pub h_av: Var,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `[d_h]`
    pub f_fusion: Var,
    pub z_cross: Var,
    pub z_self: Var,
    /// Per head, `[L_t×2]`.
    pub cross_weights: Vec<Var>,
    /// Per head, `[L_t×L_t]`.
    pub self_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub proj_t: Linear,
    pub proj_a: Linear,
    pub proj_v: Linear,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub ffn: Mlp,
    pub ln_ffn: LayerNorm,
    pub d_h: usize,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, d_emb: usize, rng: &mut RngState) -> Result<Self> {
        let d_h = cfg.d_hidden;
        if cfg.fusion_heads == 0 || d_h % cfg.fusion_heads != 0 {
            return Err(EgmfError::Config(format!(
                "d_hidden {d_h} not divisible by fusion_heads {}",
                cfg.fusion_heads
            )));
        }
        let n = |part: &str| format!("{name}.{part}");
        let eps = cfg.layer_norm_eps;
        Ok(Self {
            proj_t: Linear::new(store, &n("proj_t"), d_emb, d_h, true, rng)?,
            proj_a: Linear::new(store, &n("proj_a"), cfg.d_av, d_h, true, rng)?,
            proj_v: Linear::new(store, &n("proj_v"), cfg.d_av, d_h, true, rng)?,
            cross_attn: MultiHeadAttention::new(store, &n("cross_attn"), d_h, cfg.fusion_heads, rng)?,
            ln_cross: LayerNorm::new(store, &n("ln_cross"), d_h, eps, rng)?,
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), d_h, cfg.fusion_heads, rng)?,
            ln_self: LayerNorm::new(store, &n("ln_self"), d_h, eps, rng)?,
            ffn: Mlp::new(store, &n("ffn"), (d_h, cfg.ffn_mult * d_h, d_h), Activation::Gelu, rng)?,
            ln_ffn: LayerNorm::new(store, &n("ln_ffn"), d_h, eps, rng)?,
            d_h,
        })
    }

    /// Projects `f_t: [L_t×d_emb]`, `f_a, f_v: [d_av]` to the hidden width.
    pub fn project_streams(&self, tape: &mut Tape, store: &ParamStore, f_t: Var, f_a: Var, f_v: Var) -> Result<ProjectedStreams> {
        let h_t = self.proj_t.forward(tape, store, f_t)?;
        let h_a = self.proj_a.forward(tape, store, f_a)?;
        let h_v = self.proj_v.forward(tape, store, f_v)?;
        let h_a = tape.reshape(h_a, &[1, self.d_h])?;
        let h_v = tape.reshape(h_v, &[1, self.d_h])?;
        let h_av = tape.concat(&[h_a, h_v], 0)?;
        Ok(ProjectedStreams { h_t, h_av })
    }

    /// `LN(CrossAttn(H_t, H_av, H_av) + H_t)`.
    pub fn cross_attention_block(&self, tape: &mut Tape, store: &ParamStore, h_t: Var, h_av: Var) -> Result<(Var, Vec<Var>)> {
        let (att, w) = self.cross_attn.forward(tape, store, h_t, h_av)?;
        let r = tape.add(att, h_t)?;
        Ok((self.ln_cross.forward(tape, store, r)?, w))
    }

    /// `LN(SelfAttn(Z) + Z)`, unmasked.
    pub fn self_attention_block(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Vec<Var>)> {
        let (att, w) = self.self_attn.forward(tape, store, z, z)?;
        let r = tape.add(att, z)?;
        Ok((self.ln_self.forward(tape, store, r)?, w))
    }

    /// `mean_rows(LN(FFN(Z) + Z))`.
    pub fn ffn_pool(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let f = self.ffn.forward(tape, store, z)?;
        let r = tape.add(f, z)?;
        let n = self.ln_ffn.forward(tape, store, r)?;
        Ok(tape.mean_rows(n)?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_t: Var, f_a: Var, f_v: Var) -> Result<FusionOutput> {
        let s = self.project_streams(tape, store, f_t, f_a, f_v)?;
        let (z_cross, cross_weights) = self.cross_attention_block(tape, store, s.h_t, s.h_av)?;
        let (z_self, self_weights) = self.self_attention_block(tape, store, z_cross)?;
        let f_fusion = self.ffn_pool(tape, store, z_self)?;
        Ok(FusionOutput {
            f_fusion,
            z_cross,
            z_self,
            cross_weights,
            self_weights,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for l in [&self.proj_t, &self.proj_a, &self.proj_v] {
            p.extend(l.params());
        }
        p.extend(self.cross_attn.params());
        p.extend(self.ln_cross.params());
        p.extend(self.self_attn.params());
        p.extend(self.ln_self.params());
        p.extend(self.ffn.params());
        p.extend(self.ln_ffn.params());
        p
    }
}

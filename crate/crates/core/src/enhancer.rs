//! Adaptive feature enhancer: three bottleneck experts mixed by a two-stage
//! gate, plus a gated residual path.
//!
//! Stage one maps `f` to four sigmoids: preliminary expert weights `w` and
//! the residual coefficient `β`. Stage two feeds `[f; w]` through a small
//! GELU MLP and a softmax to get `α`. The output is
//! `Σ_k α_k · E_k(f) + β · f`.

use egmf_tensor::{Activation, ParamId, ParamStore, RngState, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{EgmfError, Result};
use crate::nn::{Linear, Mlp};

pub const N_EXPERTS: usize = 3;

/// Down-projection, activation, up-projection. No internal residual.
#[derive(Debug, Clone)]
pub struct Expert {
    pub down: Linear,
    pub up: Linear,
    pub activation: Activation,
    pub bottleneck: usize,
}

impl Expert {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.down.forward(tape, store, f)?;
        let h = tape.activation(h, self.activation)?;
        self.up.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.down.params();
        p.extend(self.up.params());
        p
    }
}

/// Tape handles for one enhancement pass.
#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub f_enhanced: Var,
    /// `[3]`
    pub w: Var,
    /// scalar
    pub beta: Var,
    /// `[n_active]`, over the experts listed in `active`.
    pub alpha: Var,
    pub expert_outputs: Vec<Var>,
    pub active: Vec<usize>,
}

/// Plain-value gate diagnostics of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// Zero-based indices of the experts `alpha` refers to.
    pub active: Vec<usize>,
}

impl EnhanceOutput {
    pub fn gate(&self, tape: &Tape) -> GateOutput {
        GateOutput {
            w: tape.value(self.w).data().to_vec(),
            alpha: tape.value(self.alpha).data().to_vec(),
            beta: tape.value(self.beta).item(),
            active: self.active.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Enhancer {
    pub experts: Vec<Expert>,
    /// `d_h → 4`: three preliminary weights and `β`.
    pub gate1: Linear,
    /// `d_h + 3 → gate_hidden → 3`.
    pub gate2: Mlp,
    pub d_h: usize,
}

fn pick(tape: &mut Tape, v: Var, idx: &[usize]) -> Result<Var> {
    if idx.len() == tape.shape(v)[0] {
        return Ok(v);
    }
    let parts = idx.iter().map(|&i| tape.slice(v, 0, i, 1)).collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat(&parts, 0)?)
}

impl Enhancer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let d_h = cfg.d_hidden;
        if cfg.experts.len() != N_EXPERTS {
            return Err(EgmfError::Config(format!("expected {N_EXPERTS} experts, got {}", cfg.experts.len())));
        }
        let mut experts = Vec::with_capacity(N_EXPERTS);
        for (k, spec) in cfg.experts.iter().enumerate() {
            if spec.ratio == 0 || d_h % spec.ratio != 0 {
                return Err(EgmfError::Config(format!("expert ratio {} does not divide d_hidden {d_h}", spec.ratio)));
            }
            let b = d_h / spec.ratio;
            experts.push(Expert {
                down: Linear::new(store, &format!("{name}.expert{}.down", k + 1), d_h, b, true, rng)?,
                up: Linear::new(store, &format!("{name}.expert{}.up", k + 1), b, d_h, true, rng)?,
                activation: spec.activation,
                bottleneck: b,
            });
        }
        Ok(Self {
            experts,
            gate1: Linear::new(store, &format!("{name}.gate1"), d_h, N_EXPERTS + 1, true, rng)?,
            gate2: Mlp::new(
                store,
                &format!("{name}.gate2"),
                (d_h + N_EXPERTS, cfg.gate_hidden(), N_EXPERTS),
                Activation::Gelu,
                rng,
            )?,
            d_h,
        })
    }

    pub fn expert_forward(&self, tape: &mut Tape, store: &ParamStore, k: usize, f: Var) -> Result<Var> {
        let e = self.experts.get(k).ok_or_else(|| EgmfError::Config(format!("no expert with index {k}")))?;
        e.forward(tape, store, f)
    }

    /// Returns `(w: [3], β: scalar)`.
    pub fn gate_stage1(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let z = self.gate1.forward(tape, store, f)?;
        let s = tape.activation(z, Activation::Sigmoid)?;
        let w = tape.slice(s, 0, 0, N_EXPERTS)?;
        let beta = tape.index(s, N_EXPERTS)?;
        Ok((w, beta))
    }

    /// Pre-softmax context logits `[3]`.
    pub fn gate_logits(&self, tape: &mut Tape, store: &ParamStore, f: Var, w: Var) -> Result<Var> {
        let x = tape.concat(&[f, w], 0)?;
        self.gate2.forward(tape, store, x)
    }

    /// `α` over the experts in `active`.
    pub fn gate_stage2(&self, tape: &mut Tape, store: &ParamStore, f: Var, w: Var, active: &[usize]) -> Result<Var> {
        let logits = self.gate_logits(tape, store, f, w)?;
        let kept = pick(tape, logits, active)?;
        Ok(tape.softmax(kept, 0)?)
    }

    /// Full enhancement with the expert `dropped` (if any) removed and `α`
    /// renormalized over the rest.
    pub fn enhance(&self, tape: &mut Tape, store: &ParamStore, f: Var, dropped: &[usize]) -> Result<EnhanceOutput> {
        let active: Vec<usize> = (0..N_EXPERTS).filter(|k| !dropped.contains(k)).collect();
        if active.is_empty() {
            return Err(EgmfError::Config("cannot drop all three experts".into()));
        }
        let expert_outputs = active
            .iter()
            .map(|&k| self.expert_forward(tape, store, k, f))
            .collect::<Result<Vec<_>>>()?;
        let (w, beta) = self.gate_stage1(tape, store, f)?;
        let alpha = self.gate_stage2(tape, store, f, w, &active)?;
        let mut acc = None;
        for (j, &e) in expert_outputs.iter().enumerate() {
            let a = tape.index(alpha, j)?;
            let term = tape.scale_by(e, a)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let residual = tape.scale_by(f, beta)?;
        let f_enhanced = tape.add(acc.expect("at least one expert"), residual)?;
        Ok(EnhanceOutput {
            f_enhanced,
            w,
            beta,
            alpha,
            expert_outputs,
            active,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.experts.iter().flat_map(Expert::params).collect();
        p.extend(self.gate1.params());
        p.extend(self.gate2.params());
        p
    }
}

//! Tiny decoder-only transformer LM with optional LoRA adapters on the
//! query and value projections.
//!
//! Blocks are Pre-LN: `x + Attn(LN(x))` then `x + FFN(LN(x))`, with
//! sinusoidal positions added to the input embeddings and a causal mask.

use egmf_tensor::{Activation, InitScheme, ParamId, ParamStore, RngState, Tape, Tensor, Var};

use crate::config::{LmConfig, LoraConfig};
use crate::error::{EgmfError, Result};
use crate::nn::{attend, LayerNorm, Linear, Mlp};

const LN_EPS: f64 = 1e-5;

/// Low-rank update `scale · B·A` on a frozen weight `W: [d_out×d_in]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: ParamId,
    /// `[r×d_in]`, Xavier initialized.
    pub a: ParamId,
    /// `[d_out×r]`, zero initialized.
    pub b: ParamId,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        target: &Linear,
        cfg: &LoraConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        let a = store.init(format!("{name}.A"), &[cfg.rank, target.d_in], InitScheme::XavierUniform, rng)?;
        let b = store.init(format!("{name}.B"), &[target.d_out, cfg.rank], InitScheme::Zeros, rng)?;
        Ok(Self {
            target: target.weight,
            a,
            b,
            scale: cfg.alpha / cfg.rank as f64,
        })
    }

    /// `scale · (x·Aᵀ)·Bᵀ` for `x: [n×d_in]`.
    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let low = tape.matmul_nt(x, a)?;
        let up = tape.matmul_nt(low, b)?;
        Ok(tape.scale(up, self.scale)?)
    }

    /// `W + scale·B·A`.
    pub fn merged_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let ba = store.value(self.b).matmul(store.value(self.a))?;
        let w = store.value(self.target);
        let data = w.data().iter().zip(ba.data()).map(|(w, d)| w + self.scale * d).collect();
        Ok(Tensor::new(w.shape().to_vec(), data)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LmBlock {
    pub ln1: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

/// Per-head causal attention weights of every layer from one forward pass.
pub type AttentionMaps = Vec<Vec<Var>>;

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub embed: ParamId,
    pub blocks: Vec<LmBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Sinusoidal position table `[len×d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("position table shape")
}

impl ToyLm {
    /// Registers the base weights under `prefix`, all trainable.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LmConfig, rng: &mut RngState) -> Result<Self> {
        let d = cfg.d_emb;
        if cfg.n_heads == 0 || d % cfg.n_heads != 0 {
            return Err(EgmfError::Config(format!("d_emb {d} not divisible by n_heads {}", cfg.n_heads)));
        }
        let embed = store.init(format!("{prefix}.embed"), &[cfg.vocab_size, d], InitScheme::XavierUniform, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |part: &str| format!("{prefix}.layers.{l}.{part}");
            blocks.push(LmBlock {
                ln1: LayerNorm::new(store, &name("ln1"), d, LN_EPS, rng)?,
                w_q: Linear::new(store, &name("attn.W_q"), d, d, true, rng)?,
                w_k: Linear::new(store, &name("attn.W_k"), d, d, true, rng)?,
                w_v: Linear::new(store, &name("attn.W_v"), d, d, true, rng)?,
                w_o: Linear::new(store, &name("attn.W_o"), d, d, true, rng)?,
                ln2: LayerNorm::new(store, &name("ln2"), d, LN_EPS, rng)?,
                ffn: Mlp::new(store, &name("ffn"), (d, cfg.ffn_mult * d, d), Activation::Gelu, rng)?,
                lora_q: None,
                lora_v: None,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            ln_f: LayerNorm::new(store, &format!("{prefix}.ln_f"), d, LN_EPS, rng)?,
            head: Linear::new(store, &format!("{prefix}.head"), d, cfg.vocab_size, true, rng)?,
            blocks,
        })
    }

    /// Every weight that is not part of an adapter.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embed];
        for b in &self.blocks {
            p.extend(b.ln1.params());
            for l in [&b.w_q, &b.w_k, &b.w_v, &b.w_o] {
                p.extend(l.params());
            }
            p.extend(b.ln2.params());
            p.extend(b.ffn.params());
        }
        p.extend(self.ln_f.params());
        p.extend(self.head.params());
        p
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapters().flat_map(|a| a.params()).collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| b.lora_q.iter().chain(b.lora_v.iter()))
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }

    pub fn freeze_base(&self, store: &mut ParamStore) {
        for id in self.base_params() {
            store.set_frozen(id, true);
        }
    }

    /// Adds adapters to the query and value projections of every block.
    pub fn attach_lora(&mut self, store: &mut ParamStore, prefix: &str, cfg: &LoraConfig, rng: &mut RngState) -> Result<()> {
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.lora_q = Some(LoraAdapter::new(store, &format!("{prefix}.layers.{l}.attn.lora_q"), &b.w_q, cfg, rng)?);
            b.lora_v = Some(LoraAdapter::new(store, &format!("{prefix}.layers.{l}.attn.lora_v"), &b.w_v, cfg, rng)?);
        }
        Ok(())
    }

    /// Folds every adapter into its target weight. Returns the merged model
    /// (no adapters) and a copy of `store` holding the merged weights.
    pub fn merge_adapters(&self, store: &ParamStore) -> Result<(ToyLm, ParamStore)> {
        let mut merged_store = store.clone();
        for a in self.adapters() {
            let w = a.merged_weight(store)?;
            merged_store.set_value(a.target, w)?;
        }
        let mut lm = self.clone();
        for b in &mut lm.blocks {
            b.lora_q = None;
            b.lora_v = None;
        }
        Ok((lm, merged_store))
    }

    pub fn embed_ids(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(EgmfError::OutOfVocabulary {
                id,
                size: self.cfg.vocab_size,
            });
        }
        let table = tape.param(store, self.embed);
        Ok(tape.gather_rows(table, ids)?)
    }

    /// Logits for the last `last_rows` positions of the embedded sequence
    /// `x: [L×d_emb]` (all positions when `None`), plus attention maps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        use_adapters: bool,
        last_rows: Option<usize>,
    ) -> Result<(Var, AttentionMaps)> {
        let len = tape.shape(x)[0];
        if len > self.cfg.max_seq_len {
            return Err(EgmfError::SequenceTooLong {
                len,
                limit: self.cfg.max_seq_len,
            });
        }
        let pos = tape.constant(sinusoidal_positions(len, self.cfg.d_emb));
        let mut h = tape.add(x, pos)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n = b.ln1.forward(tape, store, h)?;
            let mut q = b.w_q.forward(tape, store, n)?;
            let k = b.w_k.forward(tape, store, n)?;
            let mut v = b.w_v.forward(tape, store, n)?;
            if use_adapters {
                if let Some(a) = &b.lora_q {
                    let d = a.delta(tape, store, n)?;
                    q = tape.add(q, d)?;
                }
                if let Some(a) = &b.lora_v {
                    let d = a.delta(tape, store, n)?;
                    v = tape.add(v, d)?;
                }
            }
            let (att, weights) = attend(tape, q, k, v, self.cfg.n_heads, true)?;
            let o = b.w_o.forward(tape, store, att)?;
            h = tape.add(h, o)?;
            let n2 = b.ln2.forward(tape, store, h)?;
            let f = b.ffn.forward(tape, store, n2)?;
            h = tape.add(h, f)?;
            maps.push(weights);
        }
        if let Some(k) = last_rows {
            let k = k.min(len);
            h = tape.slice(h, 0, len - k, k)?;
        }
        let h = self.ln_f.forward(tape, store, h)?;
        Ok((self.head.forward(tape, store, h)?, maps))
    }

    /// Untracked logits for a token sequence.
    pub fn logits_for_ids(&self, store: &ParamStore, ids: &[usize], use_adapters: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = self.embed_ids(&mut tape, store, ids)?;
        let (logits, _) = self.forward(&mut tape, store, x, use_adapters, None)?;
        Ok(tape.value(logits).clone())
    }
}

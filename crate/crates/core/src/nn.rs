//! Layers shared by the fusion block, the enhancer and the toy LM.

use egmf_tensor::{Activation, InitScheme, ParamId, ParamStore, RngState, Tape, Tensor, Var};

use crate::error::Result;

/// Affine map `y = x·Wᵀ + b` with `W: [d_out×d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let weight = store.init(format!("{name}.weight"), &[d_out, d_in], InitScheme::XavierUniform, rng)?;
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[d_out], InitScheme::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Accepts `[n×d_in]` or a single vector `[d_in]`; the output keeps the
    /// input's rank.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let vector = tape.shape(x).len() == 1;
        let x2 = if vector { tape.reshape(x, &[1, self.d_in])? } else { x };
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_nt(x2, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b)?;
        }
        if vector {
            y = tape.reshape(y, &[self.d_out])?;
        }
        Ok(y)
    }

    /// Untracked forward on a plain tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, v)?;
        Ok(tape.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            gamma: store.init(format!("{name}.gamma"), &[dim], InitScheme::Ones, rng)?,
            beta: store.init(format!("{name}.beta"), &[dim], InitScheme::Zeros, rng)?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.layer_norm(x, g, b, self.eps)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two-layer position-wise MLP `d → hidden → d_out` with an activation in
/// between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let (d_in, hidden, d_out) = dims;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng)?,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.activation(h, self.activation)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Scaled dot-product attention over already projected `q: [Lq×d]`,
/// `k, v: [Lk×d]`, split into `n_heads` column blocks.
///
/// Returns the concatenated head outputs `[Lq×d]` and each head's weight
/// matrix `[Lq×Lk]`. With `causal`, `Lq` must equal `Lk`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, causal: bool) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let w = if causal {
            tape.softmax_causal(scores)?
        } else {
            tape.softmax(scores, 1)?
        };
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if n_heads == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    Ok((out, weights))
}

/// Multi-head attention with its own query, key, value and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.W_q"), d, d, true, rng)?,
            w_k: Linear::new(store, &format!("{name}.W_k"), d, d, true, rng)?,
            w_v: Linear::new(store, &format!("{name}.W_v"), d, d, true, rng)?,
            w_o: Linear::new(store, &format!("{name}.W_o"), d, d, true, rng)?,
            n_heads,
        })
    }

    /// Queries from `query`, keys and values from `context`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.w_q.forward(tape, store, query)?;
        let k = self.w_k.forward(tape, store, context)?;
        let v = self.w_v.forward(tape, store, context)?;
        let (heads, weights) = attend(tape, q, k, v, self.n_heads, false)?;
        Ok((self.w_o.forward(tape, store, heads)?, weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_at_zero_returns_bias() {
        let mut rng = RngState::new(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "p", 3, 2, true, &mut rng).unwrap();
        store
            .set_value(lin.bias.unwrap(), Tensor::vector(vec![0.25, -1.5]).unwrap())
            .unwrap();
        let y = lin.apply(&store, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5]);
    }

    #[test]
    fn linear_matches_matmul_oracle() {
        let mut rng = RngState::new(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "p", 4, 3, true, &mut rng).unwrap();
        store
            .set_value(lin.bias.unwrap(), Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let x = Tensor::matrix(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let y = lin.apply(&store, &x).unwrap();
        let w = store.value(lin.weight);
        for r in 0..2 {
            for o in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += x.get(&[r, i]) * w.get(&[o, i]);
                }
                acc += [0.1, 0.2, 0.3][o];
                assert!((y.get(&[r, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (out, w) = attend(&mut tape, q, q, q, 2, false).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        for h in w {
            assert_eq!(tape.value(h).data(), &[1.0]);
        }
    }
}

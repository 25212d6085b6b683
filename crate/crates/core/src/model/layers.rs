//! Parameter handles and forward rules for the building blocks shared by the
//! base encoder and the context pathway.

use rand::Rng as _;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

use super::ModelError;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Xavier,
    Zero,
}

fn init_tensor(rows: usize, cols: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(&[rows, cols]),
        Init::Xavier => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::matrix(rows, cols, data).expect("sized")
        }
    }
}

/// Forward-time switches: dropout is active only when an RNG is supplied.
pub struct Mode<'a> {
    pub(crate) dropout: f64,
    pub(crate) rng: Option<&'a mut Rng>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'a mut Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => Ok(tape.dropout(x, self.dropout, true, rng)?),
            _ => Ok(x),
        }
    }
}

/// `x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_tensor(fan_in, fan_out, init, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.linear(x, w, b)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Multi-head attention; queries from one sequence, keys and values from
/// another (the same one for self-attention).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub n_heads: usize,
}

impl AttentionIds {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        Self {
            q: LinearIds::new(store, &format!("{name}.q"), d, d, Init::Xavier, rng),
            k: LinearIds::new(store, &format!("{name}.k"), d, d, Init::Xavier, rng),
            v: LinearIds::new(store, &format!("{name}.v"), d, d, Init::Xavier, rng),
            o: LinearIds::new(store, &format!("{name}.o"), d, d, out_init, rng),
            n_heads,
        }
    }

    /// Returns the attended output and the per-head attention weights
    /// (`rows(query) × rows(context)`, each row a distribution).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let d = tape.shape(q)[1];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        Ok((self.o.forward(tape, store, merged)?, weights))
    }
}

/// Post-norm transformer encoder layer: self-attention then a GELU
/// feed-forward, each wrapped as `LN(h + dropout(sublayer(h)))`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub ln1: LayerNormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
    pub ln2: LayerNormIds,
}

impl EncoderLayerIds {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        ff_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            attn: AttentionIds::new(
                store,
                &format!("{name}.attn"),
                d,
                n_heads,
                Init::Xavier,
                rng,
            ),
            ln1: LayerNormIds::new(store, &format!("{name}.ln1"), d),
            ff1: LinearIds::new(store, &format!("{name}.ff1"), d, ff_dim, Init::Xavier, rng),
            ff2: LinearIds::new(store, &format!("{name}.ff2"), ff_dim, d, Init::Xavier, rng),
            ln2: LayerNormIds::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        let (a, _) = self.attn.forward(tape, store, h, h)?;
        let a = mode.drop(tape, a)?;
        let h = tape.add(h, a)?;
        let h = self.ln1.forward(tape, store, h)?;
        let f = self.ff1.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, store, f)?;
        let f = mode.drop(tape, f)?;
        let h = tape.add(h, f)?;
        self.ln2.forward(tape, store, h)
    }
}

/// Two-layer GELU MLP whose output layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DenseEncoderIds {
    pub hidden: LinearIds,
    pub out: LinearIds,
}

impl DenseEncoderIds {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: LinearIds::new(
                store,
                &format!("{name}.hidden"),
                fan_in,
                d,
                Init::Xavier,
                rng,
            ),
            out: LinearIds::new(store, &format!("{name}.out"), d, d, Init::Zero, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, store, h)
    }
}

/// Fixed sinusoidal encodings, `rows × d`.
pub fn positional_encoding(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(rows, d, data).expect("sized")
}

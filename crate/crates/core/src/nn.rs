//! Transformer building blocks recorded on a [`Tape`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Mat, ParamId, ParamStore};
use crate::tape::{Tape, Var};

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Fixed sinusoidal position table.
pub fn sinusoidal(len: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, d_in, d_out))?,
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, d_out)))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim)))?,
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim)))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let table = Array2::from_shape_simple_fn((count, dim), || rng.random_range(-1.0..1.0));
        Ok(Self {
            table: store.add(format!("{name}.table"), table)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids.to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Var {
        let dim = tape.value(x).ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let p = tape.softmax(scores);
            heads.push(tape.matmul(p, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.out.forward(tape, cat)
    }
}

/// Pre-norm transformer block. Attention has no dropout; the feed-forward
/// branch does.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_dim, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<Var>, dropout: f64) -> Var {
        let h = self.norm_attn.forward(tape, x);
        let a = self.attn.forward(tape, h, mask);
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, x);
        let h = self.ff_in.forward(tape, h);
        let h = tape.relu(h);
        let h = self.ff_out.forward(tape, h);
        let h = tape.dropout(h, dropout);
        tape.add(x, h)
    }
}

/// Sinusoidal positions, a stack of layers, and a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    causal: bool,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ff_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim)?,
            causal,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Var {
        let (len, dim) = tape.value(x).dim();
        let pe = tape.input(sinusoidal(len, dim));
        let mut h = tape.add(x, pe);
        let mask = self.causal.then(|| {
            tape.input(Array2::from_shape_fn(
                (len, len),
                |(i, j)| if j > i { -1e9 } else { 0.0 },
            ))
        });
        for layer in &self.layers {
            h = layer.forward(tape, h, mask, dropout);
        }
        self.final_norm.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn causal_stack_ignores_future_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = TransformerStack::new(&mut store, "s", 2, 8, 2, 16, true, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let mut y = x.clone();
        y.row_mut(4).fill(3.0);
        let run = |m: &Mat| {
            let mut t = Tape::new(&store, false, 0);
            let v = t.input(m.clone());
            let o = stack.forward(&mut t, v, 0.0);
            t.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).is_err());
    }
}

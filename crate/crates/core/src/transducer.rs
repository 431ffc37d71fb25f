//! Transducer loss over a `(T, U+1, V)` logit lattice, an exhaustive
//! path-enumeration oracle for it, and greedy decoding.
//!
//! Topology is the standard RNN-T one: a blank at `(t, u)` moves to
//! `(t+1, u)`, the label `y[u]` at `(t, u)` moves to `(t, u+1)`, and every
//! complete path ends with a blank emitted from `(T-1, U)`.

use ndarray::{Array1, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Joint-network output. `values[[t, u, k]]` is the unnormalised score for
/// emitting symbol `k` at frame `t` after `u` target tokens.
#[derive(Debug, Clone)]
pub struct LogitLattice {
    values: Array3<f64>,
    blank_id: usize,
}

impl LogitLattice {
    pub fn new(values: Array3<f64>, blank_id: usize) -> Result<Self> {
        let (t, _, v) = values.dim();
        if t == 0 {
            return Err(Error::invalid("lattice needs at least one frame"));
        }
        if v < 2 {
            return Err(Error::invalid("vocabulary must contain blank and at least one label"));
        }
        if blank_id >= v {
            return Err(Error::invalid(format!("blank id {blank_id} outside vocabulary of {v}")));
        }
        Ok(Self { values, blank_id })
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn target_len(&self) -> usize {
        self.values.dim().1 - 1
    }

    pub fn vocab(&self) -> usize {
        self.values.dim().2
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Log-softmax over the vocabulary axis.
    pub fn log_probs(&self) -> Array3<f64> {
        let mut lp = self.values.clone();
        for mut row in lp.lanes_mut(Axis(2)) {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if m == f64::NEG_INFINITY {
                continue;
            }
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        lp
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() != self.target_len() {
            return Err(Error::shape(format!(
                "target has {} tokens but lattice expects {}",
                target.len(),
                self.target_len()
            )));
        }
        if let Some(pos) = target.iter().position(|&y| y == self.blank_id) {
            return Err(Error::invalid(format!("target position {pos} is the blank symbol")));
        }
        if let Some(&y) = target.iter().find(|&&y| y >= self.vocab()) {
            return Err(Error::invalid(format!("target token {y} outside vocabulary")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    /// Negative log-likelihood in nats; `+inf` when no path has mass.
    pub nll: f64,
    /// Gradient of `nll` with respect to the pre-softmax lattice values.
    pub grad: Array3<f64>,
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward-backward transducer loss.
pub fn transducer_loss(lattice: &LogitLattice, target: &[usize]) -> Result<LossResult> {
    lattice.check_target(target)?;
    let (t_len, u1, v) = lattice.values.dim();
    let u_len = u1 - 1;
    let blank = lattice.blank_id;
    let lp = lattice.log_probs();
    let ninf = f64::NEG_INFINITY;

    let emit = |t: usize, u: usize| lp[[t, u, target[u]]];

    let mut alpha = ndarray::Array2::from_elem((t_len, u1), ninf);
    alpha[[0, 0]] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = ninf;
            if t > 0 {
                a = alpha[[t - 1, u]] + lp[[t - 1, u, blank]];
            }
            if u > 0 {
                a = log_add(a, alpha[[t, u - 1]] + emit(t, u - 1));
            }
            alpha[[t, u]] = a;
        }
    }

    let mut beta = ndarray::Array2::from_elem((t_len, u1), ninf);
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            let b = if t == t_len - 1 && u == u_len {
                lp[[t, u, blank]]
            } else {
                let mut b = ninf;
                if t + 1 < t_len {
                    b = lp[[t, u, blank]] + beta[[t + 1, u]];
                }
                if u < u_len {
                    b = log_add(b, emit(t, u) + beta[[t, u + 1]]);
                }
                b
            };
            beta[[t, u]] = b;
        }
    }

    let log_like = beta[[0, 0]];
    let mut grad = Array3::zeros((t_len, u1, v));
    if log_like == ninf || !log_like.is_finite() {
        return Ok(LossResult {
            nll: f64::INFINITY,
            grad,
        });
    }

    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[[t, u]];
            if a == ninf {
                continue;
            }
            let next_blank = if t + 1 < t_len {
                beta[[t + 1, u]]
            } else if u == u_len {
                0.0
            } else {
                ninf
            };
            let g_blank = (a + lp[[t, u, blank]] + next_blank - log_like).exp();
            let g_label = if u < u_len {
                (a + emit(t, u) + beta[[t, u + 1]] - log_like).exp()
            } else {
                0.0
            };
            let occupancy = g_blank + g_label;
            for k in 0..v {
                grad[[t, u, k]] = lp[[t, u, k]].exp() * occupancy;
            }
            grad[[t, u, blank]] -= g_blank;
            if u < u_len {
                grad[[t, u, target[u]]] -= g_label;
            }
        }
    }

    Ok(LossResult { nll: -log_like, grad })
}

/// Largest lattice the oracle will enumerate.
pub const ORACLE_MAX_FRAMES: usize = 6;
pub const ORACLE_MAX_TARGET: usize = 4;

/// Reference negative log-likelihood obtained by listing every alignment
/// path and summing their probabilities directly.
pub fn transducer_loss_oracle(lattice: &LogitLattice, target: &[usize]) -> Result<f64> {
    lattice.check_target(target)?;
    let t_len = lattice.frames();
    let u_len = lattice.target_len();
    if t_len > ORACLE_MAX_FRAMES || u_len > ORACLE_MAX_TARGET {
        return Err(Error::invalid(format!(
            "oracle limited to T <= {ORACLE_MAX_FRAMES}, U <= {ORACLE_MAX_TARGET}; got T={t_len}, U={u_len}"
        )));
    }
    // Probabilities in linear space, computed independently of log_probs().
    let mut probs = lattice.values.clone();
    for mut row in probs.lanes_mut(Axis(2)) {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }

    // A path is a sequence of T+U moves whose last move is a blank; it is
    // determined by which of the first T+U-1 slots hold labels.
    let slots = t_len + u_len - 1;
    let mut total = 0.0;
    for mask in 0u32..(1u32 << slots) {
        if mask.count_ones() as usize != u_len {
            continue;
        }
        let (mut t, mut u) = (0usize, 0usize);
        let mut p = 1.0;
        for slot in 0..slots {
            if mask & (1 << slot) != 0 {
                p *= probs[[t, u, target[u]]];
                u += 1;
            } else {
                p *= probs[[t, u, lattice.blank_id]];
                t += 1;
            }
        }
        debug_assert_eq!((t, u), (t_len - 1, u_len));
        p *= probs[[t, u, lattice.blank_id]];
        total += p;
    }
    Ok(-total.ln())
}

/// Prediction network as seen by the decoder: the output row after
/// consuming `prefix`.
pub trait PredictionNetwork {
    fn predict(&self, prefix: &[usize]) -> Array1<f64>;
}

/// Joint network: scores over the vocabulary for one encoder frame and one
/// prediction-network output.
pub trait JointNetwork {
    fn join(&self, encoder_frame: ArrayView1<f64>, prediction: ArrayView1<f64>) -> Array1<f64>;
}

/// Frame-synchronous greedy transducer search.
pub fn greedy_decode<P, J>(
    encoder_states: ArrayView2<f64>,
    predictor: &P,
    joiner: &J,
    blank_id: usize,
    max_symbols_per_frame: usize,
) -> Vec<usize>
where
    P: PredictionNetwork + ?Sized,
    J: JointNetwork + ?Sized,
{
    let max_symbols = max_symbols_per_frame.max(1);
    let mut out = Vec::new();
    let mut pred = predictor.predict(&out);
    for frame in encoder_states.rows() {
        let mut emitted = 0;
        while emitted < max_symbols {
            let scores = joiner.join(frame, pred.view());
            let best = argmax(scores.view());
            if best == blank_id {
                break;
            }
            out.push(best);
            pred = predictor.predict(&out);
            emitted += 1;
        }
    }
    out
}

/// Index of the first maximum.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

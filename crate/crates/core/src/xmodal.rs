//! Cross-modality tying between the speech representation `E_s` and the
//! text representation `E_t`.
//!
//! Each mechanism is a [`TieStrategy`]; strategies are registered by name in
//! a [`TieRegistry`] and picked at runtime through `xmodal.mode`.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Mat;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XModalConfig {
    /// Registered strategy name: `none`, `mse`, `biinfonce` or `swap`.
    pub mode: String,
    /// Softmax temperature for the contrastive loss.
    pub temperature: f64,
    /// Fraction of frames exchanged by `swap`.
    pub swap_rate: f64,
    /// Positive for `y_i` is `x_{i+k}`.
    pub offset_k: usize,
    pub rng_seed: u64,
    /// Contrastive loss with raw cosine inside the log ratio instead of
    /// `exp(cos / τ)`; rejects negative similarities.
    pub strict_cosine_ratio: bool,
    /// Swap overwrites text frames with speech frames but leaves the speech
    /// side untouched.
    pub one_way_swap: bool,
}

impl Default for XModalConfig {
    fn default() -> Self {
        Self {
            mode: "none".into(),
            temperature: 0.1,
            swap_rate: 0.2,
            offset_k: 0,
            rng_seed: 0,
            strict_cosine_ratio: false,
            one_way_swap: false,
        }
    }
}

impl XModalConfig {
    pub fn with_mode(mode: &str) -> Self {
        Self {
            mode: mode.to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.swap_rate) {
            return Err(Error::invalid(format!("swap_rate {} not in [0, 1]", self.swap_rate)));
        }
        Ok(())
    }
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("E_t {:?} vs E_s {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn mse_loss(e_t: &Mat, e_s: &Mat) -> Result<f64> {
    same_shape(e_t, e_s)?;
    let n = e_t.len().max(1) as f64;
    Ok(e_t.iter().zip(e_s).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_t: Mat,
    pub grad_s: Mat,
    /// Some row had zero norm; its cosine similarities were taken as 0.
    pub degenerate: bool,
}

struct Normalized {
    unit: Mat,
    norms: Vec<f64>,
}

fn normalize_rows(m: &Mat) -> (Normalized, bool) {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    let mut degenerate = false;
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        } else {
            degenerate = true;
        }
        norms.push(n);
    }
    (Normalized { unit, norms }, degenerate)
}

fn normalize_backward(n: &Normalized, d_unit: &Mat) -> Mat {
    let mut d = d_unit.clone();
    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
        let norm = n.norms[r];
        if norm == 0.0 {
            row.fill(0.0);
            continue;
        }
        let u = n.unit.row(r);
        let proj = u.dot(&row);
        row.zip_mut_with(&u, |g, &uv| *g = (*g - uv * proj) / norm);
    }
    d
}

/// One direction `L_N(X, Y)` of the contrastive loss, with gradients with
/// respect to `X` and `Y`. Row `i` of `Y` is the anchor; its positive is row
/// `i + k` of `X` and every row of `X` is in the denominator.
fn directional(x: &Normalized, y: &Normalized, cfg: &XModalConfig) -> Result<(f64, Mat, Mat)> {
    let len = x.unit.nrows();
    let k = cfg.offset_k;
    let anchors = len - k;
    // cos[i, j] = cos(x_j, y_i)
    let cos = y.unit.dot(&x.unit.t());
    let mut d_cos = Array2::<f64>::zeros((len, len));
    let mut loss = 0.0;
    let inv = 1.0 / anchors as f64;
    for i in 0..anchors {
        let row = cos.row(i);
        let pos = i + k;
        if cfg.strict_cosine_ratio {
            if let Some(j) = row.iter().position(|&c| c < 0.0) {
                return Err(Error::invalid(format!(
                    "negative cosine similarity between rows {j} and {i} in strict mode"
                )));
            }
            let z: f64 = row.sum();
            loss -= inv * (row[pos] / z).ln();
            for j in 0..len {
                d_cos[[i, j]] = inv / z;
            }
            d_cos[[i, pos]] -= inv / row[pos];
        } else {
            let t = cfg.temperature;
            let m = row.fold(f64::NEG_INFINITY, |m, &c| m.max(c / t));
            let z: f64 = row.iter().map(|&c| (c / t - m).exp()).sum();
            let lse = m + z.ln();
            loss -= inv * (row[pos] / t - lse);
            for j in 0..len {
                d_cos[[i, j]] = inv * ((row[j] / t - lse).exp()) / t;
            }
            d_cos[[i, pos]] -= inv / t;
        }
    }
    let d_yu = d_cos.dot(&x.unit);
    let d_xu = d_cos.t().dot(&y.unit);
    Ok((loss, normalize_backward(x, &d_xu), normalize_backward(y, &d_yu)))
}

/// Symmetrised contrastive loss `L_N(E_t, E_s) + L_N(E_s, E_t)` with cosine
/// similarity and in-utterance negatives.
pub fn bi_infonce(e_t: &Mat, e_s: &Mat, cfg: &XModalConfig) -> Result<ContrastiveOutput> {
    same_shape(e_t, e_s)?;
    cfg.validate()?;
    let len = e_t.nrows();
    if len < 2 {
        return Err(Error::invalid("contrastive loss needs at least two frames"));
    }
    if cfg.offset_k >= len {
        return Err(Error::invalid(format!(
            "offset {} leaves no anchors in {len} frames",
            cfg.offset_k
        )));
    }
    let (nt, dt) = normalize_rows(e_t);
    let (ns, ds) = normalize_rows(e_s);
    let (l1, gx1, gy1) = directional(&nt, &ns, cfg)?;
    let (l2, gx2, gy2) = directional(&ns, &nt, cfg)?;
    Ok(ContrastiveOutput {
        loss: l1 + l2,
        grad_t: gx1 + gy2,
        grad_s: gy1 + gx2,
        degenerate: dt || ds,
    })
}

pub fn bi_infonce_loss(e_t: &Mat, e_s: &Mat, cfg: &XModalConfig) -> Result<f64> {
    Ok(bi_infonce(e_t, e_s, cfg)?.loss)
}

/// Frames selected for exchange: exactly `round(rate · len)` of them.
pub fn swap_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
    let count = ((rate * len as f64).round() as usize).min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; len];
    for i in sample(&mut rng, len, count) {
        mask[i] = true;
    }
    mask
}

/// Exchanges a seeded subset of time-aligned frames between the two
/// representations (or, with `one_way_swap`, copies speech frames into the
/// text side only).
pub fn modality_swap(e_t: &Mat, e_s: &Mat, cfg: &XModalConfig, seed: u64) -> Result<(Mat, Mat)> {
    same_shape(e_t, e_s)?;
    cfg.validate()?;
    let mask = swap_mask(e_t.nrows(), cfg.swap_rate, seed);
    let mut t_out = e_t.clone();
    let mut s_out = e_s.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            t_out.row_mut(i).assign(&e_s.row(i));
            if !cfg.one_way_swap {
                s_out.row_mut(i).assign(&e_t.row(i));
            }
        }
    }
    Ok((t_out, s_out))
}

/// Representations after tying, plus the auxiliary loss if any.
#[derive(Debug, Clone, Copy)]
pub struct Tied {
    pub e_t: Var,
    pub e_s: Var,
    pub loss: Option<Var>,
}

pub trait TieStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Records the tying step on the tape. `seed` feeds any randomness.
    fn tie(&self, tape: &mut Tape, e_t: Var, e_s: Var, seed: u64) -> Result<Tied>;

    /// The auxiliary loss on plain matrices; zero for loss-free strategies.
    fn loss(&self, e_t: &Mat, e_s: &Mat) -> Result<f64>;
}

fn check_vars(tape: &Tape, e_t: Var, e_s: Var) -> Result<()> {
    same_shape(tape.value(e_t), tape.value(e_s))
}

pub struct NoTie;

impl TieStrategy for NoTie {
    fn name(&self) -> &'static str {
        "none"
    }

    fn tie(&self, tape: &mut Tape, e_t: Var, e_s: Var, _seed: u64) -> Result<Tied> {
        check_vars(tape, e_t, e_s)?;
        Ok(Tied { e_t, e_s, loss: None })
    }

    fn loss(&self, e_t: &Mat, e_s: &Mat) -> Result<f64> {
        same_shape(e_t, e_s)?;
        Ok(0.0)
    }
}

pub struct MseTie;

impl TieStrategy for MseTie {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn tie(&self, tape: &mut Tape, e_t: Var, e_s: Var, _seed: u64) -> Result<Tied> {
        check_vars(tape, e_t, e_s)?;
        let d = tape.sub(e_t, e_s);
        let sq = tape.mul(d, d);
        let loss = tape.mean_all(sq);
        Ok(Tied {
            e_t,
            e_s,
            loss: Some(loss),
        })
    }

    fn loss(&self, e_t: &Mat, e_s: &Mat) -> Result<f64> {
        mse_loss(e_t, e_s)
    }
}

pub struct BiInfoNceTie {
    cfg: XModalConfig,
}

impl TieStrategy for BiInfoNceTie {
    fn name(&self) -> &'static str {
        "biinfonce"
    }

    fn tie(&self, tape: &mut Tape, e_t: Var, e_s: Var, _seed: u64) -> Result<Tied> {
        check_vars(tape, e_t, e_s)?;
        let out = bi_infonce(tape.value(e_t), tape.value(e_s), &self.cfg)?;
        let loss = tape.fused_scalar(out.loss, vec![(e_t, out.grad_t), (e_s, out.grad_s)]);
        Ok(Tied {
            e_t,
            e_s,
            loss: Some(loss),
        })
    }

    fn loss(&self, e_t: &Mat, e_s: &Mat) -> Result<f64> {
        bi_infonce_loss(e_t, e_s, &self.cfg)
    }
}

pub struct SwapTie {
    cfg: XModalConfig,
}

impl TieStrategy for SwapTie {
    fn name(&self) -> &'static str {
        "swap"
    }

    fn tie(&self, tape: &mut Tape, e_t: Var, e_s: Var, seed: u64) -> Result<Tied> {
        check_vars(tape, e_t, e_s)?;
        let mask = swap_mask(tape.value(e_t).nrows(), self.cfg.swap_rate, seed);
        let new_t = tape.select_rows(e_t, e_s, mask.clone());
        let new_s = if self.cfg.one_way_swap {
            e_s
        } else {
            tape.select_rows(e_s, e_t, mask)
        };
        Ok(Tied {
            e_t: new_t,
            e_s: new_s,
            loss: None,
        })
    }

    fn loss(&self, e_t: &Mat, e_s: &Mat) -> Result<f64> {
        same_shape(e_t, e_s)?;
        Ok(0.0)
    }
}

pub type TieFactory = fn(&XModalConfig) -> Box<dyn TieStrategy>;

/// Name → constructor table for tying strategies.
pub struct TieRegistry {
    factories: BTreeMap<&'static str, TieFactory>,
}

impl TieRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("none", |_| Box::new(NoTie));
        r.register("mse", |_| Box::new(MseTie));
        r.register("biinfonce", |c| Box::new(BiInfoNceTie { cfg: c.clone() }));
        r.register("swap", |c| Box::new(SwapTie { cfg: c.clone() }));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: TieFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, cfg: &XModalConfig) -> Result<Box<dyn TieStrategy>> {
        cfg.validate()?;
        let key = cfg.mode.to_ascii_lowercase();
        let factory = self.factories.get(key.as_str()).ok_or_else(|| Error::UnknownStrategy {
            name: cfg.mode.clone(),
            known: self.names().join(", "),
        })?;
        Ok(factory(cfg))
    }
}

/// Number of frames a swap with this rate exchanges.
pub fn swapped_frames(len: usize, rate: f64) -> usize {
    swap_mask(len, rate, 0).iter().filter(|&&m| m).count()
}

/// Row-multiset fingerprint used to check that swapping conserves frames.
pub fn frame_multiset(mats: &[&Mat]) -> Vec<Vec<u64>> {
    let mut rows: Vec<Vec<u64>> = mats
        .iter()
        .flat_map(|m| m.axis_iter(Axis(0)).map(|r| r.iter().map(|v| v.to_bits()).collect()))
        .collect();
    rows.sort();
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::array;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mse_closed_forms() {
        let a = rand_mat(4, 3, 1);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = &a + 1.0;
        assert!((mse_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = rand_mat(4, 3, 2);
        assert_eq!(mse_loss(&a, &c).unwrap(), mse_loss(&c, &a).unwrap());
        assert!(mse_loss(&a, &rand_mat(3, 3, 0)).is_err());
    }

    #[test]
    fn orthonormal_contrastive_closed_form() {
        let e = Array2::<f64>::eye(3);
        let cfg = XModalConfig {
            temperature: 1.0,
            ..XModalConfig::with_mode("biinfonce")
        };
        let l = bi_infonce_loss(&e, &e, &cfg).unwrap();
        let e1 = std::f64::consts::E;
        let per_dir = -(e1 / (e1 + 2.0)).ln();
        assert!((l - 2.0 * per_dir).abs() < 1e-12);
    }

    #[test]
    fn contrastive_identical_inputs_bounds() {
        let e = rand_mat(4, 6, 5);
        let loose = bi_infonce_loss(
            &e,
            &e,
            &XModalConfig {
                temperature: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let sharp = bi_infonce_loss(
            &e,
            &e,
            &XModalConfig {
                temperature: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(loose < 2.0 * 4f64.ln());
        assert!(sharp < loose);
    }

    #[test]
    fn contrastive_rejects_short_and_flags_zero_rows() {
        let e = rand_mat(1, 3, 0);
        assert!(bi_infonce_loss(&e, &e, &XModalConfig::default()).is_err());
        let mut z = rand_mat(3, 3, 0);
        z.row_mut(1).fill(0.0);
        let out = bi_infonce(&z, &rand_mat(3, 3, 1), &XModalConfig::default()).unwrap();
        assert!(out.degenerate);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn strict_mode_rejects_negative_cosine() {
        let a = array![[1.0, 0.0], [-1.0, 0.0]];
        let cfg = XModalConfig {
            strict_cosine_ratio: true,
            ..Default::default()
        };
        assert!(bi_infonce_loss(&a, &a, &cfg).is_err());
        let b = array![[1.0, 0.2], [0.3, 1.0]];
        let l = bi_infonce_loss(&b, &b, &cfg).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    fn fd_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        Array2::from_shape_fn(x.dim(), |(i, j)| {
            let mut p = x.clone();
            p[[i, j]] += h;
            let mut m = x.clone();
            m[[i, j]] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Mat, b: &Mat) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let t = rand_mat(5, 4, 11);
        let s = rand_mat(5, 4, 12);
        for (strict, k) in [(false, 0), (false, 2)] {
            let cfg = XModalConfig {
                temperature: 0.5,
                offset_k: k,
                strict_cosine_ratio: strict,
                ..Default::default()
            };
            let out = bi_infonce(&t, &s, &cfg).unwrap();
            assert_close(&out.grad_t, &fd_grad(|x| bi_infonce_loss(x, &s, &cfg).unwrap(), &t));
            assert_close(&out.grad_s, &fd_grad(|x| bi_infonce_loss(&t, x, &cfg).unwrap(), &s));
        }
        let tp = t.mapv(f64::abs);
        let sp = s.mapv(f64::abs);
        let cfg = XModalConfig {
            strict_cosine_ratio: true,
            ..Default::default()
        };
        let out = bi_infonce(&tp, &sp, &cfg).unwrap();
        assert_close(&out.grad_t, &fd_grad(|x| bi_infonce_loss(x, &sp, &cfg).unwrap(), &tp));
    }

    #[test]
    fn mse_tape_gradient_matches_finite_differences() {
        let store = ParamStore::new();
        let t0 = rand_mat(4, 3, 3);
        let s0 = rand_mat(4, 3, 4);
        let fd = fd_grad(|x| mse_loss(x, &s0).unwrap(), &t0);
        let analytic = tape_grad(&store, &t0, &s0);
        assert_close(&analytic, &fd);
    }

    fn tape_grad(store: &ParamStore, t0: &Mat, s0: &Mat) -> Mat {
        let mut tape = Tape::new(store, false, 0);
        let t = tape.watched(t0.clone());
        let s = tape.input(s0.clone());
        let tied = MseTie.tie(&mut tape, t, s, 0).unwrap();
        let loss = tied.loss.unwrap();
        let all = tape.backward_all(loss, 1.0);
        // `t` is the first node recorded on this tape.
        all[0].clone().unwrap()
    }

    #[test]
    fn swap_edge_rates_and_counts() {
        let t = rand_mat(10, 3, 1);
        let s = rand_mat(10, 3, 2);
        let none = XModalConfig {
            swap_rate: 0.0,
            ..Default::default()
        };
        assert_eq!(modality_swap(&t, &s, &none, 9).unwrap(), (t.clone(), s.clone()));
        let all = XModalConfig {
            swap_rate: 1.0,
            ..Default::default()
        };
        assert_eq!(modality_swap(&t, &s, &all, 9).unwrap(), (s.clone(), t.clone()));

        let cfg = XModalConfig {
            swap_rate: 0.2,
            ..Default::default()
        };
        let (t2, s2) = modality_swap(&t, &s, &cfg, 42).unwrap();
        let changed = (0..10).filter(|&i| t2.row(i) != t.row(i)).count();
        assert_eq!(changed, 2);
        assert_eq!(frame_multiset(&[&t, &s]), frame_multiset(&[&t2, &s2]));

        let one = XModalConfig {
            swap_rate: 0.2,
            one_way_swap: true,
            ..Default::default()
        };
        let (t3, s3) = modality_swap(&t, &s, &one, 42).unwrap();
        assert_eq!(s3, s);
        assert_eq!(t3, t2);
    }

    #[test]
    fn registry_lookup() {
        let r = TieRegistry::builtin();
        assert_eq!(r.names(), vec!["biinfonce", "mse", "none", "swap"]);
        assert_eq!(r.create(&XModalConfig::with_mode("MSE")).unwrap().name(), "mse");
        assert!(matches!(
            r.create(&XModalConfig::with_mode("cosine")),
            Err(Error::UnknownStrategy { .. })
        ));
        let bad = XModalConfig {
            temperature: 0.0,
            ..XModalConfig::with_mode("biinfonce")
        };
        assert!(r.create(&bad).is_err());
    }
}

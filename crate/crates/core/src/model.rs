//! The dual-path transducer network.
//!
//! ```text
//! speech features ─ speech encoder ──────────────────────┐ E_s
//!                                                         ├─ shared encoder ─┐
//! phonemes ─ embedding extractor ─ resample ─ smoother ───┘ E_t              ├─ joiner ─ lattice
//!                                          target prefix ─ predictor ────────┘
//! ```
//!
//! The embedding extractor and smoother exist only for training; an
//! [`InferenceModel`] is built without them.

use std::cell::RefCell;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, TransformerStack};
use crate::params::{Mat, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::transducer::{self, greedy_decode, JointNetwork, LogitLattice, PredictionNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers_speech: usize,
    pub layers_shared: usize,
    pub layers_extractor: usize,
    pub layers_smoother: usize,
    pub layers_predictor: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub phoneme_count: usize,
    /// Width of the speech feature rows.
    pub input_dim: usize,
    pub blank_id: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration used for tests and experiments.
    pub fn toy(vocab_size: usize, phoneme_count: usize) -> Self {
        Self {
            dim: 64,
            heads: 4,
            ff_dim: 128,
            layers_speech: 2,
            layers_shared: 2,
            layers_extractor: 2,
            layers_smoother: 2,
            layers_predictor: 2,
            dropout: 0.1,
            vocab_size,
            phoneme_count,
            input_dim: 64,
            blank_id: 0,
            seed: 0,
        }
    }

    /// Full-size layout: 6 + 12 encoder layers, 4-layer extractor,
    /// 2-layer smoother and predictor, width 512 with 8 heads.
    pub fn full(vocab_size: usize, phoneme_count: usize) -> Self {
        Self {
            dim: 512,
            heads: 8,
            ff_dim: 2048,
            layers_speech: 6,
            layers_shared: 12,
            layers_extractor: 4,
            layers_smoother: 2,
            layers_predictor: 2,
            dropout: 0.1,
            vocab_size,
            phoneme_count,
            input_dim: 512,
            blank_id: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        let layers = [
            self.layers_speech,
            self.layers_shared,
            self.layers_extractor,
            self.layers_smoother,
            self.layers_predictor,
        ];
        if layers.contains(&0) {
            return Err(Error::invalid("every layer count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.vocab_size < 2 || self.blank_id >= self.vocab_size {
            return Err(Error::invalid("vocabulary must hold blank plus at least one token"));
        }
        if self.phoneme_count == 0 || self.input_dim == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("phoneme_count, input_dim and ff_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Speech,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechSequence {
    pub features: Mat,
}

impl SpeechSequence {
    pub fn new(features: Mat) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("speech sequence is empty"));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Phoneme ids with one duration (in frames) per phoneme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub durations: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("phoneme sequence is empty"));
        }
        if ids.len() != durations.len() {
            return Err(Error::shape(format!(
                "{} phonemes but {} durations",
                ids.len(),
                durations.len()
            )));
        }
        if durations.contains(&0) {
            return Err(Error::invalid("phoneme durations must be at least 1"));
        }
        Ok(Self { ids, durations })
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub matrix: Mat,
    pub modality: Modality,
}

/// Row indices that repeat row `i` exactly `durations[i]` times.
pub fn resample_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

/// Duration-driven upsampling of a text embedding to frame rate.
pub fn resample(emb: &Representation, durations: &[usize]) -> Result<Mat> {
    check_durations(emb.matrix.nrows(), durations)?;
    Ok(emb.matrix.select(ndarray::Axis(0), &resample_indices(durations)))
}

/// [`resample`] for a paired sample, whose upsampled length must equal
/// the speech representation length.
pub fn resample_paired(emb: &Representation, durations: &[usize], speech_len: usize) -> Result<Mat> {
    let up: usize = durations.iter().sum();
    if up != speech_len {
        return Err(Error::shape(format!(
            "durations sum to {up} frames but the speech representation has {speech_len}"
        )));
    }
    resample(emb, durations)
}

fn check_durations(rows: usize, durations: &[usize]) -> Result<()> {
    if rows != durations.len() {
        return Err(Error::shape(format!(
            "{rows} embeddings but {} durations",
            durations.len()
        )));
    }
    if durations.contains(&0) {
        return Err(Error::invalid("durations must be at least 1"));
    }
    Ok(())
}

/// Parameter groups, keyed by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleGroup {
    SpeechEncoder,
    EmbeddingExtractor,
    Smoother,
    SharedEncoder,
    Predictor,
    Joiner,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 6] = [
        ModuleGroup::SpeechEncoder,
        ModuleGroup::EmbeddingExtractor,
        ModuleGroup::Smoother,
        ModuleGroup::SharedEncoder,
        ModuleGroup::Predictor,
        ModuleGroup::Joiner,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ModuleGroup::SpeechEncoder => "speech_encoder.",
            ModuleGroup::EmbeddingExtractor => "embedding_extractor.",
            ModuleGroup::Smoother => "smoother.",
            ModuleGroup::SharedEncoder => "shared_encoder.",
            ModuleGroup::Predictor => "predictor.",
            ModuleGroup::Joiner => "joiner.",
        }
    }

    pub fn of(name: &str) -> Option<ModuleGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }

    /// Groups that only exist to train the text path.
    pub fn is_text_only(self) -> bool {
        matches!(self, ModuleGroup::EmbeddingExtractor | ModuleGroup::Smoother)
    }
}

#[derive(Debug, Clone)]
struct TextPath {
    phone_emb: Embedding,
    extractor: TransformerStack,
    smoother: TransformerStack,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    speech_in: Linear,
    speech: TransformerStack,
    text: Option<TextPath>,
    shared: TransformerStack,
    token_emb: Embedding,
    predictor: TransformerStack,
    joint_enc: Linear,
    joint_pred: Linear,
    joint_out: Linear,
}

impl Model {
    /// Full training model with both input paths.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    fn build(cfg: ModelConfig, with_text_path: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, h, ff) = (cfg.dim, cfg.heads, cfg.ff_dim);
        let speech_in = Linear::new(&mut store, "speech_encoder.input", cfg.input_dim, d, &mut rng)?;
        let speech = TransformerStack::new(
            &mut store,
            "speech_encoder",
            cfg.layers_speech,
            d,
            h,
            ff,
            false,
            &mut rng,
        )?;
        let text = if with_text_path {
            Some(TextPath {
                phone_emb: Embedding::new(
                    &mut store,
                    "embedding_extractor.phonemes",
                    cfg.phoneme_count,
                    d,
                    &mut rng,
                )?,
                extractor: TransformerStack::new(
                    &mut store,
                    "embedding_extractor",
                    cfg.layers_extractor,
                    d,
                    h,
                    ff,
                    false,
                    &mut rng,
                )?,
                smoother: TransformerStack::new(
                    &mut store,
                    "smoother",
                    cfg.layers_smoother,
                    d,
                    h,
                    ff,
                    false,
                    &mut rng,
                )?,
            })
        } else {
            None
        };
        let shared = TransformerStack::new(
            &mut store,
            "shared_encoder",
            cfg.layers_shared,
            d,
            h,
            ff,
            false,
            &mut rng,
        )?;
        let token_emb = Embedding::new(&mut store, "predictor.tokens", cfg.vocab_size, d, &mut rng)?;
        let predictor = TransformerStack::new(&mut store, "predictor", cfg.layers_predictor, d, h, ff, true, &mut rng)?;
        let joint_enc = Linear::new(&mut store, "joiner.encoder", d, d, &mut rng)?;
        let joint_pred = Linear::new(&mut store, "joiner.predictor", d, d, &mut rng)?;
        let joint_out = Linear::new(&mut store, "joiner.output", d, cfg.vocab_size, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            speech_in,
            speech,
            text,
            shared,
            token_emb,
            predictor,
            joint_enc,
            joint_pred,
            joint_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_text_path(&self) -> bool {
        self.text.is_some()
    }

    pub fn group_ids(&self, group: ModuleGroup) -> Vec<ParamId> {
        self.store.ids_with_prefix(group.prefix()).collect()
    }

    fn text_path(&self) -> Result<&TextPath> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::invalid("this model was built without the text path"))
    }

    // ---- tape-level forward pieces -------------------------------------

    pub fn speech_encoder_on(&self, tape: &mut Tape, features: &Mat) -> Result<Var> {
        if features.nrows() == 0 {
            return Err(Error::invalid("speech sequence is empty"));
        }
        if features.ncols() != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "feature width {} does not match input_dim {}",
                features.ncols(),
                self.cfg.input_dim
            )));
        }
        let x = tape.input(features.clone());
        let h = self.speech_in.forward(tape, x);
        Ok(self.speech.forward(tape, h, self.cfg.dropout))
    }

    pub fn embedding_extractor_on(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let text = self.text_path()?;
        if ids.is_empty() {
            return Err(Error::invalid("phoneme sequence is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&p| p >= self.cfg.phoneme_count) {
            return Err(Error::invalid(format!(
                "phoneme id {bad} >= phoneme_count {}",
                self.cfg.phoneme_count
            )));
        }
        let e = text.phone_emb.forward(tape, ids);
        Ok(text.extractor.forward(tape, e, self.cfg.dropout))
    }

    pub fn resample_on(&self, tape: &mut Tape, emb: Var, durations: &[usize]) -> Result<Var> {
        check_durations(tape.value(emb).nrows(), durations)?;
        Ok(tape.gather_rows(emb, resample_indices(durations)))
    }

    pub fn smoother_on(&self, tape: &mut Tape, upsampled: Var) -> Result<Var> {
        let text = self.text_path()?;
        Ok(text.smoother.forward(tape, upsampled, self.cfg.dropout))
    }

    /// Embedding extractor, upsampling and smoother in one call.
    pub fn text_encoder_on(&self, tape: &mut Tape, phonemes: &PhonemeSequence) -> Result<Var> {
        let emb = self.embedding_extractor_on(tape, &phonemes.ids)?;
        let up = self.resample_on(tape, emb, &phonemes.durations)?;
        self.smoother_on(tape, up)
    }

    pub fn shared_encoder_on(&self, tape: &mut Tape, rep: Var) -> Var {
        self.shared.forward(tape, rep, self.cfg.dropout)
    }

    /// Predictor output rows for `[blank, y1, .., yU]`, shape `(U+1, dim)`.
    pub fn predictor_on(&self, tape: &mut Tape, prefix: &[usize]) -> Result<Var> {
        if let Some(pos) = prefix
            .iter()
            .position(|&y| y == self.cfg.blank_id || y >= self.cfg.vocab_size)
        {
            return Err(Error::invalid(format!(
                "target position {pos} is blank or out of vocabulary"
            )));
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(self.cfg.blank_id);
        ids.extend_from_slice(prefix);
        let e = self.token_emb.forward(tape, &ids);
        Ok(self.predictor.forward(tape, e, self.cfg.dropout))
    }

    /// Joint network over every `(t, u)`; rows are ordered `t * (U+1) + u`.
    pub fn joiner_on(&self, tape: &mut Tape, enc: Var, pred: Var) -> Var {
        let t_len = tape.value(enc).nrows();
        let u1 = tape.value(pred).nrows();
        let e = self.joint_enc.forward(tape, enc);
        let p = self.joint_pred.forward(tape, pred);
        let e_rows: Vec<usize> = (0..t_len).flat_map(|t| std::iter::repeat_n(t, u1)).collect();
        let p_rows: Vec<usize> = (0..t_len).flat_map(|_| 0..u1).collect();
        let e = tape.gather_rows(e, e_rows);
        let p = tape.gather_rows(p, p_rows);
        let s = tape.add(e, p);
        let s = tape.tanh(s);
        self.joint_out.forward(tape, s)
    }

    /// Transducer loss node over joiner output; returns the node and the nll.
    pub fn transducer_loss_on(&self, tape: &mut Tape, logits: Var, frames: usize, target: &[usize]) -> Result<Var> {
        let u1 = target.len() + 1;
        let v = self.cfg.vocab_size;
        let flat = tape.value(logits).clone();
        if flat.dim() != (frames * u1, v) {
            return Err(Error::shape(format!(
                "joiner output {:?} vs ({}, {v})",
                flat.dim(),
                frames * u1
            )));
        }
        let lattice = LogitLattice::new(
            flat.into_shape_with_order((frames, u1, v))
                .map_err(|e| Error::shape(e.to_string()))?,
            self.cfg.blank_id,
        )?;
        let res = transducer::transducer_loss(&lattice, target)?;
        if !res.nll.is_finite() {
            return Err(Error::NonFinite(format!("transducer nll = {}", res.nll)));
        }
        let grad = res
            .grad
            .into_shape_with_order((frames * u1, v))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(tape.fused_scalar(res.nll, vec![(logits, grad)]))
    }

    /// Shared encoder → predictor/joiner → transducer loss.
    pub fn transducer_head_on(&self, tape: &mut Tape, rep: Var, pred: Var, target: &[usize]) -> Result<Var> {
        let frames = tape.value(rep).nrows();
        let h = self.shared_encoder_on(tape, rep);
        let logits = self.joiner_on(tape, h, pred);
        self.transducer_loss_on(tape, logits, frames, target)
    }

    // ---- evaluation-mode API -------------------------------------------

    fn eval_tape(&self) -> Tape<'_> {
        Tape::new(&self.store, false, 0)
    }

    pub fn speech_encode(&self, s: &SpeechSequence) -> Result<Representation> {
        let mut t = self.eval_tape();
        let v = self.speech_encoder_on(&mut t, &s.features)?;
        Ok(Representation {
            matrix: t.value(v).clone(),
            modality: Modality::Speech,
        })
    }

    pub fn extract_text_embedding(&self, p: &PhonemeSequence) -> Result<Representation> {
        let mut t = self.eval_tape();
        let v = self.embedding_extractor_on(&mut t, &p.ids)?;
        Ok(Representation {
            matrix: t.value(v).clone(),
            modality: Modality::Text,
        })
    }

    pub fn smooth(&self, upsampled: &Mat) -> Result<Representation> {
        if upsampled.nrows() == 0 {
            return Err(Error::invalid("nothing to smooth"));
        }
        let mut t = self.eval_tape();
        let x = t.input(upsampled.clone());
        let v = self.smoother_on(&mut t, x)?;
        Ok(Representation {
            matrix: t.value(v).clone(),
            modality: Modality::Text,
        })
    }

    /// The same parameters serve both modalities; the tag is ignored.
    pub fn shared_encode(&self, rep: &Representation) -> Mat {
        let mut t = self.eval_tape();
        let x = t.input(rep.matrix.clone());
        let v = self.shared_encoder_on(&mut t, x);
        t.value(v).clone()
    }

    pub fn predict_and_join(&self, encoder_out: &Mat, target_prefix: &[usize]) -> Result<LogitLattice> {
        let mut t = self.eval_tape();
        let enc = t.input(encoder_out.clone());
        let pred = self.predictor_on(&mut t, target_prefix)?;
        let logits = self.joiner_on(&mut t, enc, pred);
        let (frames, u1) = (encoder_out.nrows(), target_prefix.len() + 1);
        let values: Array3<f64> = t
            .value(logits)
            .clone()
            .into_shape_with_order((frames, u1, self.cfg.vocab_size))
            .map_err(|e| Error::shape(e.to_string()))?;
        LogitLattice::new(values, self.cfg.blank_id)
    }

    /// Drops the embedding extractor and smoother.
    pub fn to_inference(&self) -> Result<InferenceModel> {
        let mut m = Self::build(self.cfg.clone(), false)?;
        let named = self.store.to_named();
        let kept: std::collections::BTreeMap<_, _> =
            named.into_iter().filter(|(n, _)| m.store.id(n).is_some()).collect();
        m.store.load_named(&kept)?;
        Ok(InferenceModel { model: m })
    }
}

/// Speech-only recognizer.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    model: Model,
}

struct DecodePredictor<'a> {
    model: &'a Model,
    touched: &'a RefCell<BTreeSet<ParamId>>,
}

impl PredictionNetwork for DecodePredictor<'_> {
    fn predict(&self, prefix: &[usize]) -> Array1<f64> {
        let mut t = self.model.eval_tape();
        let pred = self
            .model
            .predictor_on(&mut t, prefix)
            .expect("decoder emitted an invalid token");
        let last = pred_last_row(&mut t, pred);
        let p = self.model.joint_pred.forward(&mut t, last);
        self.touched.borrow_mut().extend(t.touched_params());
        t.value(p).row(0).to_owned()
    }
}

fn pred_last_row(t: &mut Tape, pred: Var) -> Var {
    let n = t.value(pred).nrows();
    t.gather_rows(pred, vec![n - 1])
}

struct DecodeJoiner<'a> {
    model: &'a Model,
    touched: &'a RefCell<BTreeSet<ParamId>>,
}

impl JointNetwork for DecodeJoiner<'_> {
    fn join(&self, encoder_frame: ArrayView1<f64>, prediction: ArrayView1<f64>) -> Array1<f64> {
        let mut t = self.model.eval_tape();
        let h = (&encoder_frame + &prediction)
            .mapv(f64::tanh)
            .insert_axis(ndarray::Axis(0));
        let x = t.input(h);
        let out = self.model.joint_out.forward(&mut t, x);
        self.touched.borrow_mut().extend(t.touched_params());
        t.value(out).row(0).to_owned()
    }
}

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 3;

impl InferenceModel {
    pub fn config(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.model.store
    }

    pub fn transcribe(&self, speech: &SpeechSequence) -> Result<Vec<usize>> {
        Ok(self.transcribe_traced(speech)?.0)
    }

    /// Greedy transcription plus the names of every parameter it read.
    pub fn transcribe_traced(&self, speech: &SpeechSequence) -> Result<(Vec<usize>, BTreeSet<String>)> {
        let m = &self.model;
        let touched = RefCell::new(BTreeSet::new());
        let mut t = m.eval_tape();
        let e_s = m.speech_encoder_on(&mut t, &speech.features)?;
        let h = m.shared_encoder_on(&mut t, e_s);
        let proj = m.joint_enc.forward(&mut t, h);
        let enc: Array2<f64> = t.value(proj).clone();
        touched.borrow_mut().extend(t.touched_params());

        let predictor = DecodePredictor {
            model: m,
            touched: &touched,
        };
        let joiner = DecodeJoiner {
            model: m,
            touched: &touched,
        };
        let out = greedy_decode(
            enc.view(),
            &predictor,
            &joiner,
            m.cfg.blank_id,
            DEFAULT_MAX_SYMBOLS_PER_FRAME,
        );
        let names = touched
            .into_inner()
            .into_iter()
            .map(|id| m.store.name(id).to_string())
            .collect();
        Ok((out, names))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(10, 12);
        c.dim = 16;
        c.heads = 2;
        c.ff_dim = 32;
        c.input_dim = 16;
        c
    }

    fn feats(rows: usize, cols: usize, phase: f64) -> Mat {
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            ((i * cols + j) as f64 * 0.31 + phase).sin() * 2.0
        })
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.layers_smoother = 0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::full(100, 40).validate().is_ok());
    }

    #[test]
    fn speech_encoder_shapes_and_sensitivity() {
        let m = Model::new(ModelConfig::toy(10, 12)).unwrap();
        let x = feats(10, 64, 0.0);
        let a = m.speech_encode(&SpeechSequence::new(x.clone()).unwrap()).unwrap();
        assert_eq!(a.matrix.dim(), (10, 64));
        assert_eq!(a.modality, Modality::Speech);
        let b = m.speech_encode(&SpeechSequence::new(x.clone()).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut y = x;
        y.row_mut(3).mapv_inplace(|v| v + 1.0);
        let c = m.speech_encode(&SpeechSequence::new(y).unwrap()).unwrap();
        assert_ne!(a.matrix.row(3), c.matrix.row(3));
        assert!(SpeechSequence::new(Array2::zeros((0, 64))).is_err());
        assert!(m
            .speech_encode(&SpeechSequence::new(Array2::zeros((3, 8))).unwrap())
            .is_err());
    }

    #[test]
    fn extractor_shapes_and_position_sensitivity() {
        let m = Model::new(small_cfg()).unwrap();
        let p = PhonemeSequence::new(vec![1, 2, 3, 4, 5], vec![1; 5]).unwrap();
        let e = m.extract_text_embedding(&p).unwrap();
        assert_eq!(e.matrix.dim(), (5, 16));
        let q = PhonemeSequence::new(vec![5, 4, 3, 2, 1], vec![1; 5]).unwrap();
        let f = m.extract_text_embedding(&q).unwrap();
        // Reversing the sequence must change more than the row order.
        let mut reversed = e.matrix.clone();
        reversed.invert_axis(ndarray::Axis(0));
        assert_ne!(reversed, f.matrix);
        let single = PhonemeSequence::new(vec![7], vec![2]).unwrap();
        assert_eq!(m.extract_text_embedding(&single).unwrap().matrix.dim(), (1, 16));
        let bad = PhonemeSequence::new(vec![12], vec![1]).unwrap();
        assert!(m.extract_text_embedding(&bad).is_err());
    }

    #[test]
    fn resample_repeats_rows() {
        let emb = Representation {
            matrix: array![[1.0, 2.0], [3.0, 4.0]],
            modality: Modality::Text,
        };
        let up = resample(&emb, &[2, 3]).unwrap();
        assert_eq!(up, array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]);
        assert_eq!(resample(&emb, &[1, 1]).unwrap(), emb.matrix);
        assert!(resample(&emb, &[1]).is_err());
        assert!(resample(&emb, &[1, 0]).is_err());
        assert!(resample_paired(&emb, &[2, 3], 4).is_err());
        assert!(resample_paired(&emb, &[2, 3], 5).is_ok());
        assert!(PhonemeSequence::new(vec![1], vec![0]).is_err());
    }

    #[test]
    fn smoother_and_shared_encoder() {
        let m = Model::new(small_cfg()).unwrap();
        let x = feats(12, 16, 0.5);
        let s = m.smooth(&x).unwrap();
        assert_eq!(s.matrix.dim(), (12, 16));
        assert_eq!(s.modality, Modality::Text);
        assert_eq!(s, m.smooth(&x).unwrap());
        assert_ne!(s.matrix, x);

        let as_speech = Representation {
            matrix: x.clone(),
            modality: Modality::Speech,
        };
        let as_text = Representation {
            matrix: x,
            modality: Modality::Text,
        };
        let a = m.shared_encode(&as_speech);
        assert_eq!(a.dim(), (12, 16));
        assert_eq!(a, m.shared_encode(&as_text));
    }

    #[test]
    fn lattice_shapes_and_predictor_causality() {
        let m = Model::new(small_cfg()).unwrap();
        let enc = feats(3, 16, 1.0);
        let lat = m.predict_and_join(&enc, &[4, 7]).unwrap();
        assert_eq!(lat.values().dim(), (3, 3, 10));
        assert_eq!(m.predict_and_join(&enc, &[]).unwrap().values().dim(), (3, 1, 10));
        assert!(m.predict_and_join(&enc, &[0]).is_err());

        let base = m.predict_and_join(&enc, &[4, 7, 2]).unwrap();
        let changed = m.predict_and_join(&enc, &[4, 9, 2]).unwrap();
        for t in 0..3 {
            for u in 0..4 {
                let same = base.values().slice(ndarray::s![t, u, ..]) == changed.values().slice(ndarray::s![t, u, ..]);
                assert_eq!(same, u <= 1, "t={t} u={u}");
            }
        }
    }

    #[test]
    fn inference_model_has_no_text_path() {
        let m = Model::new(small_cfg()).unwrap();
        let inf = m.to_inference().unwrap();
        assert!(inf
            .params()
            .iter()
            .all(|(_, n, _)| !ModuleGroup::of(n).unwrap().is_text_only()));
        let x = SpeechSequence::new(feats(6, 16, 0.2)).unwrap();
        let (_, names) = inf.transcribe_traced(&x).unwrap();
        assert!(names.iter().all(|n| !ModuleGroup::of(n).unwrap().is_text_only()));
        // Shared parameters carry over unchanged.
        for (_, n, v) in inf.params().iter() {
            assert_eq!(v, m.params().get(m.params().id(n).unwrap()));
        }
    }
}

//! Loss composition, composite batching with gradient accumulation, the
//! learning-rate schedule and the AdamW loop for the three systems.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, MetricsReport};
use crate::model::{InferenceModel, Model, ModelConfig, PhonemeSequence, SpeechSequence};
use crate::params::{Grads, Mat, ParamStore};
use crate::synthcorpus::{Datasets, TextOnlySample, Utterance, Vocab};
use crate::tape::Tape;
use crate::util::mix_seed;
use crate::xmodal::{TieRegistry, TieStrategy, XModalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Baseline,
    Topline,
    Cm,
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "topline" => Ok(Self::Topline),
            "cm" => Ok(Self::Cm),
            _ => Err(Error::invalid(format!("unknown system {s:?} (baseline, topline, cm)"))),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Topline => "topline",
            Self::Cm => "cm",
        })
    }
}

/// Network shape; vocabulary, phoneme count and input width come from the
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers_speech: usize,
    pub layers_shared: usize,
    pub layers_extractor: usize,
    pub layers_smoother: usize,
    pub layers_predictor: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = ModelConfig::toy(2, 1);
        Self {
            dim: t.dim,
            heads: t.heads,
            ff_dim: t.ff_dim,
            layers_speech: t.layers_speech,
            layers_shared: t.layers_shared,
            layers_extractor: t.layers_extractor,
            layers_smoother: t.layers_smoother,
            layers_predictor: t.layers_predictor,
            dropout: t.dropout,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, phoneme_count: usize, input_dim: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers_speech: self.layers_speech,
            layers_shared: self.layers_shared,
            layers_extractor: self.layers_extractor,
            layers_smoother: self.layers_smoother,
            layers_predictor: self.layers_predictor,
            dropout: self.dropout,
            vocab_size,
            phoneme_count,
            input_dim,
            blank_id: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub system: SystemKind,
    /// Dataset directory written by `cstt synth`.
    pub data: Option<PathBuf>,
    pub mu: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_paired: usize,
    pub batch_text: usize,
    /// TTS utterances per real utterance in the topline paired stream.
    pub tts_per_real: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub model: ModelShape,
    pub xmodal: XModalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Baseline,
            data: None,
            mu: 2.33,
            peak_lr: 2e-4,
            warmup_steps: 500,
            decay_rate: 0.9999,
            steps: 2000,
            seed: 0,
            batch_paired: 8,
            batch_text: 8,
            tts_per_real: 2.0,
            clip_norm: 5.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            model: ModelShape::default(),
            xmodal: XModalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::invalid(format!("mu {} must be positive", self.mu)));
        }
        if self.warmup_steps < 1 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::invalid(format!("decay_rate {} not in (0, 1]", self.decay_rate)));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("peak_lr and clip_norm must be positive"));
        }
        if self.batch_paired == 0 || (self.system == SystemKind::Cm && self.batch_text == 0) {
            return Err(Error::invalid("mini-batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        self.xmodal.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then exponential decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps.max(1);
    if step < w {
        cfg.peak_lr * step as f64 / w as f64
    } else {
        let n = (step - w) as f64;
        cfg.peak_lr * cfg.decay_rate.powf(n)
    }
}

// ---- samples and batches ---------------------------------------------

/// Speech with its token ids and forced-alignment durations.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub features: Mat,
    pub phonemes: PhonemeSequence,
    pub target: Vec<usize>,
}

/// Text stream sample: phonemes, durations and token ids, no features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub target: Vec<usize>,
}

impl PairedSample {
    pub fn from_utterance(u: &Utterance, vocab: &Vocab) -> Result<Self> {
        if u.phonemes.frames() != u.features.nrows() {
            return Err(Error::shape(format!(
                "{}: durations sum to {} but speech has {} frames",
                u.id,
                u.phonemes.frames(),
                u.features.nrows()
            )));
        }
        Ok(Self {
            id: u.id.clone(),
            features: u.features.clone(),
            phonemes: u.phonemes.clone(),
            target: vocab.encode(&u.tokens)?,
        })
    }
}

impl TextSample {
    pub fn from_sample(s: &TextOnlySample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            id: s.id.clone(),
            phonemes: s.phonemes.clone(),
            target: vocab.encode(&s.tokens)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompositeBatch<'a> {
    pub paired: Vec<&'a PairedSample>,
    pub text_only: Vec<&'a TextSample>,
}

impl CompositeBatch<'_> {
    pub fn check(&self, system: SystemKind) -> Result<()> {
        if self.paired.is_empty() {
            return Err(Error::invalid("paired mini-batch is empty"));
        }
        match system {
            SystemKind::Cm if self.text_only.is_empty() => {
                Err(Error::invalid("CM needs a non-empty text-only mini-batch"))
            }
            SystemKind::Baseline | SystemKind::Topline if !self.text_only.is_empty() => {
                Err(Error::invalid(format!("{system} takes no text-only mini-batch")))
            }
            _ => Ok(()),
        }
    }
}

// ---- losses ----------------------------------------------------------

/// Loss components summed over the utterances they were computed on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_cm: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.l_s += o.l_s;
        self.l_t += o.l_t;
        self.l_cm += o.l_cm;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.l_s *= k;
        self.l_t *= k;
        self.l_cm *= k;
        self
    }
}

/// What a paired forward pass needs besides the model and data.
pub struct PairedContext<'a> {
    pub system: SystemKind,
    pub tie: &'a dyn TieStrategy,
    pub mu: f64,
    pub training: bool,
    /// Dropout and swap seeds derive from this and the utterance id.
    pub seed: u64,
}

fn nonfinite(id: &str, parts: &LossParts) -> Error {
    Error::NonFinite(format!(
        "{id}: total={} L_s={} L_t={} L_CM={}",
        parts.total, parts.l_s, parts.l_t, parts.l_cm
    ))
}

/// Forward/backward for one paired utterance; gradients are added to
/// `grads` with `weight`.
pub fn accumulate_paired(
    model: &Model,
    sample: &PairedSample,
    ctx: &PairedContext,
    weight: f64,
    grads: &mut Grads,
) -> Result<LossParts> {
    let utt_seed = mix_seed(ctx.seed, &sample.id);
    let mut tape = Tape::new(model.params(), ctx.training, utt_seed);
    let e_s = model.speech_encoder_on(&mut tape, &sample.features)?;
    let pred = model.predictor_on(&mut tape, &sample.target)?;
    let mut parts = LossParts::default();
    let total = match ctx.system {
        SystemKind::Baseline | SystemKind::Topline => {
            let l_s = model.transducer_head_on(&mut tape, e_s, pred, &sample.target)?;
            parts.l_s = tape.scalar(l_s);
            l_s
        }
        SystemKind::Cm => {
            let e_t = model.text_encoder_on(&mut tape, &sample.phonemes)?;
            if tape.value(e_t).dim() != tape.value(e_s).dim() {
                return Err(Error::shape(format!(
                    "{}: E_t {:?} vs E_s {:?}",
                    sample.id,
                    tape.value(e_t).dim(),
                    tape.value(e_s).dim()
                )));
            }
            let tied = ctx.tie.tie(&mut tape, e_t, e_s, mix_seed(utt_seed, "tie"))?;
            let l_s = model.transducer_head_on(&mut tape, tied.e_s, pred, &sample.target)?;
            let l_t = model.transducer_head_on(&mut tape, tied.e_t, pred, &sample.target)?;
            parts.l_s = tape.scalar(l_s);
            parts.l_t = tape.scalar(l_t);
            let mut terms = vec![(l_s, ctx.mu), (l_t, 1.0)];
            if let Some(l_cm) = tied.loss {
                parts.l_cm = tape.scalar(l_cm);
                terms.push((l_cm, 1.0));
            }
            tape.lincomb(&terms)
        }
    };
    parts.total = tape.scalar(total);
    if !parts.total.is_finite() {
        return Err(nonfinite(&sample.id, &parts));
    }
    grads.add_scaled(&tape.backward(total, 1.0), weight);
    Ok(parts)
}

/// Forward/backward for one text-only utterance through the text path.
pub fn accumulate_text(
    model: &Model,
    sample: &TextSample,
    training: bool,
    seed: u64,
    weight: f64,
    grads: &mut Grads,
) -> Result<LossParts> {
    let mut tape = Tape::new(model.params(), training, mix_seed(seed, &sample.id));
    let e_t = model.text_encoder_on(&mut tape, &sample.phonemes)?;
    let pred = model.predictor_on(&mut tape, &sample.target)?;
    let l_t = model.transducer_head_on(&mut tape, e_t, pred, &sample.target)?;
    let v = tape.scalar(l_t);
    let parts = LossParts {
        total: v,
        l_t: v,
        ..LossParts::default()
    };
    if !v.is_finite() {
        return Err(nonfinite(&sample.id, &parts));
    }
    grads.add_scaled(&tape.backward(l_t, 1.0), weight);
    Ok(parts)
}

/// Mean paired loss over the mini-batch and its gradient.
pub fn paired_loss(model: &Model, batch: &[&PairedSample], ctx: &PairedContext) -> Result<(LossParts, Grads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty paired mini-batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = Grads::new(model.params().len());
    let mut sum = LossParts::default();
    for s in batch {
        sum.add(&accumulate_paired(model, s, ctx, w, &mut grads)?);
    }
    Ok((sum.scaled(w), grads))
}

/// Mean text-only loss over the mini-batch and its gradient.
pub fn text_only_loss(model: &Model, batch: &[&TextSample], training: bool, seed: u64) -> Result<(LossParts, Grads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty text-only mini-batch"));
    }
    if !model.has_text_path() {
        return Err(Error::invalid("text-only loss needs the text path"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = Grads::new(model.params().len());
    let mut sum = LossParts::default();
    for s in batch {
        sum.add(&accumulate_text(model, s, training, seed, w, &mut grads)?);
    }
    Ok((sum.scaled(w), grads))
}

// ---- optimizer -------------------------------------------------------

/// Adam with decoupled weight decay. Parameters that received no gradient
/// in a step are left untouched (no decay, no moment update).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: Vec<u32>,
}

impl AdamW {
    pub fn new(param_count: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![None; param_count],
            v: vec![None; param_count],
            t: vec![0; param_count],
        }
    }

    pub fn from_config(param_count: usize, cfg: &TrainConfig) -> Self {
        Self::new(param_count, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            });
        }
    }
}

// ---- training loop ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_cm: f64,
    /// Mean text-only loss (0 outside CM).
    pub l_text: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Encoded training streams for one system.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub paired: Vec<PairedSample>,
    pub text_only: Vec<TextSample>,
}

impl TrainStreams {
    /// Baseline: real paired data. Topline: real plus `tts_per_real` TTS
    /// utterances per real one. CM: real paired plus the text-only stream.
    pub fn build(ds: &Datasets, cfg: &TrainConfig) -> Result<Self> {
        let vocab = &ds.language.vocab;
        let enc = |u: &[Utterance]| {
            u.iter()
                .map(|u| PairedSample::from_utterance(u, vocab))
                .collect::<Result<Vec<_>>>()
        };
        let mut paired = enc(&ds.train_paired)?;
        let mut text_only = Vec::new();
        match cfg.system {
            SystemKind::Baseline => {}
            SystemKind::Topline => {
                let want = (cfg.tts_per_real * paired.len() as f64).round() as usize;
                if want > ds.train_tts.len() {
                    return Err(Error::invalid(format!(
                        "topline wants {want} TTS utterances, dataset has {}",
                        ds.train_tts.len()
                    )));
                }
                paired.extend(enc(&ds.train_tts[..want])?);
            }
            SystemKind::Cm => {
                text_only = ds
                    .train_textonly
                    .iter()
                    .map(|s| TextSample::from_sample(s, vocab))
                    .collect::<Result<Vec<_>>>()?;
            }
        }
        if paired.is_empty() {
            return Err(Error::invalid("no paired training data"));
        }
        Ok(Self { paired, text_only })
    }
}

/// Endless reshuffled pass over `len` items.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &format!("epoch{}", self.epoch)));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    tie: Box<dyn TieStrategy>,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        let tie = TieRegistry::builtin().create(&cfg.xmodal)?;
        let opt = AdamW::from_config(model.params().len(), &cfg);
        Ok(Self {
            cfg,
            model,
            tie,
            opt,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Composite gradient of one batch, before clipping.
    pub fn composite_gradient(&self, batch: &CompositeBatch) -> Result<(LossParts, LossParts, Grads)> {
        batch.check(self.cfg.system)?;
        let seed = mix_seed(self.cfg.seed, &format!("step{}", self.step));
        let ctx = PairedContext {
            system: self.cfg.system,
            tie: self.tie.as_ref(),
            mu: self.cfg.mu,
            training: true,
            seed,
        };
        let (paired, mut grads) = paired_loss(&self.model, &batch.paired, &ctx)?;
        let mut text = LossParts::default();
        if !batch.text_only.is_empty() {
            let (t, g) = text_only_loss(&self.model, &batch.text_only, true, mix_seed(seed, "text"))?;
            grads.add_scaled(&g, 1.0);
            text = t;
        }
        Ok((paired, text, grads))
    }

    /// One optimizer update from the accumulated composite gradient.
    pub fn train_step(&mut self, batch: &CompositeBatch) -> Result<StepReport> {
        let (paired, text, mut grads) = self.composite_gradient(batch)?;
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {grad_norm} at step {}",
                self.step
            )));
        }
        let clipped = grad_norm > self.cfg.clip_norm;
        if clipped {
            grads.scale(self.cfg.clip_norm / grad_norm);
        }
        self.step += 1;
        let lr = lr_at(self.step, &self.cfg);
        self.opt.step(self.model.params_mut(), &grads, lr);
        Ok(StepReport {
            step: self.step,
            lr,
            total: paired.total + text.total,
            l_s: paired.l_s,
            l_t: paired.l_t,
            l_cm: paired.l_cm,
            l_text: text.total,
            grad_norm,
            clipped,
        })
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<StepReport>,
    pub checkpoint: PathBuf,
}

pub fn build_model(ds: &Datasets, cfg: &TrainConfig) -> Result<Model> {
    let lang = &ds.language;
    Model::new(
        cfg.model
            .config(lang.vocab.len(), lang.phoneme_count, lang.feature_dim(), cfg.seed),
    )
}

/// Full training run. Writes `log.jsonl`, periodic `checkpoint-stepN.bin`
/// files, the final `checkpoint.bin` and the resolved `config.toml` into
/// `out`.
pub fn train(ds: &Datasets, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e))?;
    let streams = TrainStreams::build(ds, cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), build_model(ds, cfg)?)?;
    let mut paired_sampler = Sampler::new(streams.paired.len(), mix_seed(cfg.seed, "paired"));
    let mut text_sampler = Sampler::new(streams.text_only.len(), mix_seed(cfg.seed, "text"));

    let log_path = out.join("log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut reports = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = CompositeBatch {
            paired: paired_sampler
                .take(cfg.batch_paired)
                .into_iter()
                .map(|i| &streams.paired[i])
                .collect(),
            text_only: if cfg.system == SystemKind::Cm {
                text_sampler
                    .take(cfg.batch_text)
                    .into_iter()
                    .map(|i| &streams.text_only[i])
                    .collect()
            } else {
                Vec::new()
            },
        };
        let report = trainer.train_step(&batch)?;
        let mut line = serde_json::to_vec(&report)?;
        line.push(b'\n');
        log.write_all(&line).map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 && report.step < cfg.steps {
            checkpoint::save(
                trainer.model(),
                &out.join(format!("checkpoint-step{}.bin", report.step)),
            )?;
        }
        reports.push(report);
    }
    let checkpoint = out.join("checkpoint.bin");
    checkpoint::save(trainer.model(), &checkpoint)?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        reports,
        checkpoint,
    })
}

/// Greedy-decodes every utterance; returns hypotheses and pooled scores.
pub fn evaluate(model: &InferenceModel, vocab: &Vocab, utts: &[Utterance]) -> Result<(Vec<String>, MetricsReport)> {
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let ids = model.transcribe(&SpeechSequence::new(u.features.clone())?)?;
        hyps.push(vocab.decode(&ids).join(" "));
    }
    let refs: Vec<String> = utts.iter().map(Utterance::transcript).collect();
    let report = score_corpus(refs.iter().map(String::as_str).zip(hyps.iter().map(String::as_str)))?;
    Ok((hyps, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            peak_lr: 2e-4,
            warmup_steps: 50_000,
            decay_rate: 0.9999,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(50_000, &cfg) - 2e-4).abs() <= 1e-12);
        assert!((lr_at(25_000, &cfg) - 1e-4).abs() <= 1e-15);
        assert!((lr_at(50_010, &cfg) - 2e-4 * 0.9999f64.powi(10)).abs() <= 1e-15);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { mu: 0.0, ..ok.clone() },
            TrainConfig {
                warmup_steps: 0,
                ..ok.clone()
            },
            TrainConfig {
                decay_rate: 1.5,
                ..ok.clone()
            },
            TrainConfig {
                decay_rate: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = TrainConfig {
            system: SystemKind::Cm,
            xmodal: XModalConfig::with_mode("mse"),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("system = \"topline\"\nmu = 3.0\n[xmodal]\nmode = \"swap\"\n").unwrap();
        assert_eq!(partial.system, SystemKind::Topline);
        assert_eq!(partial.xmodal.mode, "swap");
        assert_eq!(partial.steps, TrainConfig::default().steps);
    }

    #[test]
    fn system_names_parse() {
        assert_eq!("CM".parse::<SystemKind>().unwrap(), SystemKind::Cm);
        assert!("both".parse::<SystemKind>().is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, 3);
        let mut a = s.take(5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let mut b = s.take(5);
        b.sort();
        assert_eq!(b, a);
        assert!(Sampler::new(0, 0).take(3).is_empty());
    }
}

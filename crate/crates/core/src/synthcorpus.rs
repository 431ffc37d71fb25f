//! Deterministic synthetic stand-ins for recorded speech, forced alignment
//! and TTS conversion.
//!
//! A small Mandarin/English language is generated from a seed: every token
//! has a phoneme pronunciation, every phoneme a prototype feature vector.
//! An utterance is the concatenation of its phonemes' prototypes, each held
//! for a sampled number of frames, plus Gaussian noise. The sampled
//! durations double as the forced-alignment result for paired data and as
//! the duration model for text-only data.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Lang;
use crate::model::PhonemeSequence;
use crate::params::Mat;
use crate::textgen::{
    frequency_table, generate_corpus, CorpusStats, CsSentence, Lexicon, ParallelPair, Pos, SubstitutionPolicy,
    TaggedWord,
};
use crate::util::{mix_seed, sha256_hex};

// ---- word inventory ----------------------------------------------------

const PRONOUNS: &[(&str, &str)] = &[("我", "I"), ("你", "you"), ("他", "he"), ("她", "she")];
const NOUNS: &[(&str, &str)] = &[
    ("书", "book"),
    ("水", "water"),
    ("饭", "rice"),
    ("车", "car"),
    ("茶", "tea"),
    ("猫", "cat"),
    ("狗", "dog"),
    ("鱼", "fish"),
    ("花", "flower"),
    ("门", "door"),
    ("山", "hill"),
    ("床", "bed"),
    ("钱", "money"),
    ("歌", "song"),
    ("球", "ball"),
    ("药", "pill"),
    ("肉", "meat"),
    ("信", "letter"),
    ("票", "ticket"),
    ("桌", "desk"),
];
const VERBS: &[(&str, &str)] = &[
    ("吃", "eat"),
    ("喝", "drink"),
    ("看", "watch"),
    ("买", "buy"),
    ("写", "write"),
    ("读", "read"),
    ("找", "find"),
    ("开", "open"),
    ("关", "shut"),
    ("拿", "take"),
    ("卖", "sell"),
    ("洗", "wash"),
    ("画", "draw"),
    ("听", "hear"),
    ("送", "send"),
    ("修", "fix"),
];
const ADVERBS: &[(&str, &str)] = &[("也", "also"), ("都", "all"), ("还", "still"), ("常", "often")];
const ADJECTIVES: &[(&str, &str)] = &[("大", "big"), ("小", "small"), ("新", "new"), ("好", "good")];

#[derive(Clone, Copy)]
enum Slot {
    Pron,
    Verb,
    Noun,
    Adv,
    Adj,
    /// Mandarin-only particle, no English counterpart.
    Particle(&'static str),
    /// English-only function word.
    EngOnly(&'static str, Pos),
    Conj,
}

const TEMPLATES: &[&[Slot]] = &[
    &[Slot::Pron, Slot::Verb, Slot::Noun],
    &[Slot::Pron, Slot::Adv, Slot::Verb, Slot::Noun],
    &[
        Slot::Pron,
        Slot::Verb,
        Slot::Particle("了"),
        Slot::EngOnly("the", Pos::Det),
        Slot::Noun,
    ],
    &[Slot::Pron, Slot::Verb, Slot::Adj, Slot::Particle("的"), Slot::Noun],
    &[Slot::Pron, Slot::Verb, Slot::Noun, Slot::Conj, Slot::Noun],
    &[Slot::Pron, Slot::Adv, Slot::Verb, Slot::Noun, Slot::Particle("吗")],
    &[Slot::Pron, Slot::Verb, Slot::Noun, Slot::Conj, Slot::Verb, Slot::Noun],
];

/// Random parallel sentence pairs with distinct Mandarin sides. `pairs[i]`
/// has id `pair{i:06}`.
pub fn generate_pairs(count: usize, seed: u64) -> Result<Vec<ParallelPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "pairs"));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 50 + 1000 {
            return Err(Error::invalid(format!(
                "could only draw {} distinct sentences",
                out.len()
            )));
        }
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let mut man = Vec::new();
        let mut eng = Vec::new();
        fn pick(
            table: &[(&'static str, &'static str)],
            pos: Pos,
            rng: &mut ChaCha8Rng,
            man: &mut Vec<TaggedWord>,
            eng: &mut Vec<TaggedWord>,
        ) {
            let (m, e) = table[rng.random_range(0..table.len())];
            man.push(TaggedWord::new(m, pos));
            eng.push(TaggedWord::new(e, pos));
        }
        for slot in template {
            match *slot {
                Slot::Pron => pick(PRONOUNS, Pos::Pron, &mut rng, &mut man, &mut eng),
                Slot::Verb => pick(VERBS, Pos::Verb, &mut rng, &mut man, &mut eng),
                Slot::Noun => pick(NOUNS, Pos::Noun, &mut rng, &mut man, &mut eng),
                Slot::Adv => pick(ADVERBS, Pos::Adv, &mut rng, &mut man, &mut eng),
                Slot::Adj => pick(ADJECTIVES, Pos::Adj, &mut rng, &mut man, &mut eng),
                Slot::Conj => pick(&[("和", "and")], Pos::Cconj, &mut rng, &mut man, &mut eng),
                Slot::Particle(p) => man.push(TaggedWord::new(p, Pos::Part)),
                Slot::EngOnly(w, pos) => eng.push(TaggedWord::new(w, pos)),
            }
        }
        let key: String = man.iter().map(|w| w.word.as_str()).collect();
        if seen.insert(key) {
            out.push(ParallelPair::new(format!("pair{:06}", out.len()), man, eng)?);
        }
    }
    Ok(out)
}

/// Bilingual lexicon for the built-in inventory (content words only).
pub fn builtin_lexicon() -> Lexicon {
    let mut lex = Lexicon::new();
    for (m, e) in NOUNS.iter().chain(VERBS) {
        lex.insert(*m, *e);
    }
    lex
}

// ---- language ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageConfig {
    pub seed: u64,
    pub feature_dim: usize,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub duration_mean: f64,
    /// Per-phoneme means are drawn uniformly within this distance of
    /// `duration_mean`.
    pub duration_spread: f64,
    /// Each sampled duration deviates from its mean by at most this much.
    pub duration_jitter: f64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            feature_dim: 64,
            prototype_scale: 1.0,
            noise_sigma: 0.5,
            duration_mean: 2.0,
            duration_spread: 0.5,
            duration_jitter: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationLaw {
    pub means: Vec<f64>,
    pub jitter: f64,
}

impl DurationLaw {
    fn sample(&self, phoneme: usize, rng: &mut ChaCha8Rng) -> usize {
        let j = if self.jitter > 0.0 {
            rng.random_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        (self.means[phoneme] + j).round().max(1.0) as usize
    }

    /// Every mean scaled by `factor` (still at least 1).
    pub fn stretched(&self, factor: f64) -> Self {
        Self {
            means: self.means.iter().map(|m| (m * factor).max(1.0)).collect(),
            jitter: self.jitter,
        }
    }
}

/// Token ↔ id table; id 0 is the transducer blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const BLANK: &str = "<blank>";

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![BLANK.to_string()];
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .filter(|&i| i != 0)
                    .ok_or_else(|| Error::invalid(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .filter(|t| *t != BLANK)
            .map(String::from)
            .collect()
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// A generated language: vocabulary, pronunciations, prototypes, durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub config: LanguageConfig,
    pub phoneme_count: usize,
    pub vocab: Vocab,
    pub token_lang: BTreeMap<String, Lang>,
    pub lexicon: BTreeMap<String, Vec<usize>>,
    pub duration_law: DurationLaw,
    pub noise_sigma: f64,
    pub prototypes: Mat,
    pub seed: u64,
}

const MAN_INITIALS: usize = 10;
const MAN_FINALS: usize = 10;
const ENG_ONSETS: usize = 8;
const ENG_VOWELS: usize = 6;
const ENG_CODAS: usize = 8;

impl SyntheticLanguageSpec {
    /// Builds the language. Mandarin characters are pronounced initial+final,
    /// English words onset+vowel+coda. Initials, finals, onsets, vowels and
    /// codas are disjoint phoneme sets, so adjacent phonemes never repeat
    /// across a token boundary.
    pub fn generate(config: &LanguageConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.duration_mean < 1.0 || config.noise_sigma < 0.0 {
            return Err(Error::invalid(
                "feature_dim > 0, duration_mean >= 1, noise_sigma >= 0 required",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, "language"));
        let man_base = 0;
        let fin_base = MAN_INITIALS;
        let ons_base = fin_base + MAN_FINALS;
        let vow_base = ons_base + ENG_ONSETS;
        let cod_base = vow_base + ENG_VOWELS;
        let phoneme_count = cod_base + ENG_CODAS;

        let mut man_chars: Vec<&str> = PRONOUNS
            .iter()
            .chain(NOUNS)
            .chain(VERBS)
            .chain(ADVERBS)
            .chain(ADJECTIVES)
            .map(|(m, _)| *m)
            .collect();
        man_chars.extend(["了", "的", "吗", "和"]);
        let eng_words: Vec<&str> = NOUNS.iter().chain(VERBS).map(|(_, e)| *e).collect();

        let mut man_prons: Vec<Vec<usize>> = (0..MAN_INITIALS)
            .flat_map(|i| (0..MAN_FINALS).map(move |f| vec![man_base + i, fin_base + f]))
            .collect();
        man_prons.shuffle(&mut rng);
        let mut eng_prons: Vec<Vec<usize>> = (0..ENG_ONSETS)
            .flat_map(|o| {
                (0..ENG_VOWELS)
                    .flat_map(move |v| (0..ENG_CODAS).map(move |c| vec![ons_base + o, vow_base + v, cod_base + c]))
            })
            .collect();
        eng_prons.shuffle(&mut rng);

        let mut lexicon = BTreeMap::new();
        let mut token_lang = BTreeMap::new();
        for (c, p) in man_chars.iter().zip(man_prons) {
            lexicon.insert(c.to_string(), p);
            token_lang.insert(c.to_string(), Lang::Man);
        }
        for (w, p) in eng_words.iter().zip(eng_prons) {
            lexicon.insert(w.to_string(), p);
            token_lang.insert(w.to_string(), Lang::Eng);
        }
        let vocab = Vocab::new(man_chars.iter().chain(&eng_words).map(|s| s.to_string()));

        let normal = Normal::new(0.0, config.prototype_scale.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
        let prototypes = Array2::from_shape_simple_fn((phoneme_count, config.feature_dim), || normal.sample(&mut rng));
        let means = (0..phoneme_count)
            .map(|_| {
                let s = config.duration_spread;
                let d = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
                (config.duration_mean + d).max(1.0)
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            phoneme_count,
            vocab,
            token_lang,
            lexicon,
            duration_law: DurationLaw {
                means,
                jitter: config.duration_jitter,
            },
            noise_sigma: config.noise_sigma,
            prototypes,
            seed: config.seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn pronounce(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for t in tokens {
            let p = self
                .lexicon
                .get(t)
                .ok_or_else(|| Error::invalid(format!("token {t:?} is out of vocabulary")))?;
            ids.extend_from_slice(p);
        }
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "REAL_SIM")]
    RealSim,
    #[serde(rename = "TTS_SIM")]
    TtsSim,
}

/// Paired sample: features, transcript and aligned phonemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Mat,
    pub tokens: Vec<String>,
    pub phonemes: PhonemeSequence,
    pub origin: Origin,
}

impl Utterance {
    pub fn transcript(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Text-only sample. There is deliberately no feature field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextOnlySample {
    pub id: String,
    pub tokens: Vec<String>,
    pub phonemes: PhonemeSequence,
}

/// How a rendition deviates from the language defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderLaw {
    pub noise_sigma: f64,
    /// Multiplier on every per-phoneme mean duration.
    pub duration_scale: f64,
    /// Norm of the constant vector added to every frame.
    pub artifact_norm: f64,
}

impl Default for RenderLaw {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            duration_scale: 1.0,
            artifact_norm: 0.0,
        }
    }
}

fn round_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Unit-direction artifact shared by every simulated TTS rendition.
pub fn artifact_vector(spec: &SyntheticLanguageSpec, norm: f64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, "tts-artifact"));
    let v: Array1<f64> = Array1::from_shape_simple_fn(spec.feature_dim(), || rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v * (norm / n)
}

/// Renders a transcript under an explicit law. `label` selects the random
/// stream, so equal `(tokens, label, law)` give identical output.
pub fn render(
    spec: &SyntheticLanguageSpec,
    id: &str,
    tokens: &[String],
    law: &RenderLaw,
    origin: Origin,
) -> Result<Utterance> {
    let ids = spec.pronounce(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &format!("{id}|{}", tokens.join(" "))));
    let durations_law = spec.duration_law.stretched(law.duration_scale);
    let durations: Vec<usize> = ids.iter().map(|&p| durations_law.sample(p, &mut rng)).collect();
    let frames: usize = durations.iter().sum();
    let dim = spec.feature_dim();
    let artifact = (law.artifact_norm != 0.0).then(|| artifact_vector(spec, law.artifact_norm));
    let normal = Normal::new(0.0, law.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut features = Array2::zeros((frames, dim));
    let mut row = 0;
    for (&p, &d) in ids.iter().zip(&durations) {
        for _ in 0..d {
            let mut r = features.row_mut(row);
            r.assign(&spec.prototypes.row(p));
            if let Some(a) = &artifact {
                r += a;
            }
            if law.noise_sigma > 0.0 {
                r.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
            row += 1;
        }
    }
    round_f32(&mut features);
    Ok(Utterance {
        id: id.to_string(),
        features,
        tokens: tokens.to_vec(),
        phonemes: PhonemeSequence::new(ids, durations)?,
        origin,
    })
}

/// Simulated recorded speech with the language's own noise and durations.
pub fn synth_utterance(spec: &SyntheticLanguageSpec, id: &str, tokens: &[String]) -> Result<Utterance> {
    let law = RenderLaw {
        noise_sigma: spec.noise_sigma,
        ..RenderLaw::default()
    };
    render(spec, id, tokens, &law, Origin::RealSim)
}

/// Simulated TTS rendition of a generated sentence: prototypes shifted by
/// the artifact vector and noise drawn from the TTS law.
pub fn simulate_tts(
    spec: &SyntheticLanguageSpec,
    id: &str,
    sentence: &CsSentence,
    tts: &RenderLaw,
) -> Result<Utterance> {
    render(spec, id, &sentence.tokens, tts, Origin::TtsSim)
}

/// Durations without features, for the text-only stream.
pub fn text_only_sample(spec: &SyntheticLanguageSpec, id: &str, tokens: &[String]) -> Result<TextOnlySample> {
    let u = render(
        spec,
        id,
        tokens,
        &RenderLaw {
            noise_sigma: 0.0,
            ..RenderLaw::default()
        },
        Origin::RealSim,
    )?;
    Ok(TextOnlySample {
        id: u.id,
        tokens: u.tokens,
        phonemes: u.phonemes,
    })
}

// ---- datasets ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_paired: usize,
    pub train_textonly: usize,
    pub train_tts: usize,
    pub eval_homogeneous: usize,
    pub eval_shifted: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train_paired + self.train_textonly + self.train_tts + self.eval_homogeneous + self.eval_shifted
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_paired: 150,
            train_textonly: 1500,
            train_tts: 300,
            eval_homogeneous: 60,
            eval_shifted: 60,
        }
    }
}

/// Everything `cstt synth` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub language: LanguageConfig,
    pub target_ratio: f64,
    pub textgen_seed: u64,
    pub sizes: SplitSizes,
    pub tts: RenderLaw,
    pub shifted: RenderLaw,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            language: LanguageConfig::default(),
            target_ratio: 0.10,
            textgen_seed: 7,
            sizes: SplitSizes::default(),
            tts: RenderLaw {
                noise_sigma: 0.3,
                duration_scale: 1.0,
                artifact_norm: 2.0,
            },
            shifted: RenderLaw {
                noise_sigma: 0.8,
                duration_scale: 1.4,
                artifact_norm: 0.0,
            },
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "target_ratio {} not in (0, 1)",
                self.target_ratio
            )));
        }
        for law in [&self.tts, &self.shifted] {
            if law.noise_sigma < 0.0 || !(law.duration_scale > 0.0) {
                return Err(Error::invalid(
                    "render laws need noise_sigma >= 0 and duration_scale > 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub language: SyntheticLanguageSpec,
    pub train_paired: Vec<Utterance>,
    pub train_textonly: Vec<TextOnlySample>,
    pub train_tts: Vec<Utterance>,
    pub eval_homogeneous: Vec<Utterance>,
    pub eval_shifted: Vec<Utterance>,
    pub textgen_stats: CorpusStats,
}

/// Sentence pool split in a fixed order: eval sets first, then the
/// training streams, so changing a training size never changes evaluation
/// data.
pub fn build_datasets(
    spec: &SynthSpec,
    language: &SyntheticLanguageSpec,
    sentences: &[CsSentence],
) -> Result<Datasets> {
    let s = &spec.sizes;
    let sizes = [
        s.eval_homogeneous,
        s.eval_shifted,
        s.train_paired,
        s.train_tts,
        s.train_textonly,
    ];
    if sizes.contains(&0) {
        return Err(Error::invalid("every split size must be positive"));
    }
    if sentences.len() < s.total() {
        return Err(Error::invalid(format!(
            "sentence pool has {} sentences but the splits need {} ({} + {} + {} + {} + {})",
            sentences.len(),
            s.total(),
            s.eval_homogeneous,
            s.eval_shifted,
            s.train_paired,
            s.train_tts,
            s.train_textonly
        )));
    }
    let mut off = 0;
    let mut take = |n: usize| {
        let chunk = &sentences[off..off + n];
        off += n;
        chunk
    };
    let eval_h = take(s.eval_homogeneous);
    let eval_s = take(s.eval_shifted);
    let paired = take(s.train_paired);
    let tts = take(s.train_tts);
    let textonly = take(s.train_textonly);

    let real_law = RenderLaw {
        noise_sigma: language.noise_sigma,
        ..RenderLaw::default()
    };
    let render_all = |chunk: &[CsSentence], prefix: &str, law: &RenderLaw, origin: Origin| {
        chunk
            .iter()
            .map(|c| {
                render(
                    language,
                    &format!("{prefix}-{}", c.source_pair_id),
                    &c.tokens,
                    law,
                    origin,
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(Datasets {
        language: language.clone(),
        eval_homogeneous: render_all(eval_h, "evh", &real_law, Origin::RealSim)?,
        eval_shifted: render_all(eval_s, "evs", &spec.shifted, Origin::RealSim)?,
        train_paired: render_all(paired, "trp", &real_law, Origin::RealSim)?,
        train_tts: render_all(tts, "tts", &spec.tts, Origin::TtsSim)?,
        train_textonly: textonly
            .iter()
            .map(|c| text_only_sample(language, &format!("txt-{}", c.source_pair_id), &c.tokens))
            .collect::<Result<Vec<_>>>()?,
        textgen_stats: CorpusStats::default(),
    })
}

/// Language, pairs, code-switched text and all splits from one spec.
pub fn synthesize(spec: &SynthSpec) -> Result<(Datasets, Vec<ParallelPair>, Vec<CsSentence>)> {
    spec.validate()?;
    let language = SyntheticLanguageSpec::generate(&spec.language)?;
    let pairs = generate_pairs(spec.sizes.total(), spec.textgen_seed)?;
    let policy = SubstitutionPolicy::new(spec.target_ratio, frequency_table(&pairs), spec.textgen_seed)?;
    let (sentences, stats) = generate_corpus(&pairs, &builtin_lexicon(), &policy)?;
    let mut ds = build_datasets(spec, &language, &sentences)?;
    ds.textgen_stats = stats;
    Ok((ds, pairs, sentences))
}

// ---- on-disk format ----------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 4] = b"CSTF";

pub fn encode_features(m: &Mat) -> Vec<u8> {
    let (t, d) = m.dim();
    let mut out = Vec::with_capacity(12 + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::invalid("feature file lacks the CSTF header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * t * d {
        return Err(Error::invalid(format!(
            "feature file body has {} bytes, header says {t}x{d}",
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, d), vals).map_err(|e| Error::shape(e.to_string()))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the dataset directory; absent for text-only samples.
    pub features: Option<String>,
    pub transcript: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// split name → (record count, manifest sha256)
    pub splits: BTreeMap<String, (usize, String)>,
    pub textgen_english_ratio_ppm: u64,
}

pub const SPLITS: [&str; 5] = [
    "train_paired",
    "train_textonly",
    "train_tts",
    "eval_homogeneous",
    "eval_shifted",
];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn utterance_record(u: &Utterance) -> ManifestRecord {
    ManifestRecord {
        id: u.id.clone(),
        features: Some(format!("feats/{}.bin", u.id)),
        transcript: u.transcript(),
        phonemes: u.phonemes.ids.clone(),
        durations: u.phonemes.durations.clone(),
        origin: Some(u.origin),
    }
}

fn write_manifest(dir: &Path, split: &str, records: &[ManifestRecord]) -> Result<String> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_file(&dir.join(format!("{split}.jsonl")), &buf)?;
    Ok(sha256_hex(&buf))
}

/// Writes manifests, feature files, the language description and an index
/// with per-manifest checksums.
pub fn write_datasets(dir: &Path, ds: &Datasets) -> Result<DatasetIndex> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    write_file(&dir.join("language.json"), &serde_json::to_vec(&ds.language)?)?;

    let mut splits = BTreeMap::new();
    let mut paired_split = |name: &str, utts: &[Utterance]| -> Result<()> {
        for u in utts {
            write_file(&feats.join(format!("{}.bin", u.id)), &encode_features(&u.features))?;
        }
        let recs: Vec<ManifestRecord> = utts.iter().map(utterance_record).collect();
        let sum = write_manifest(dir, name, &recs)?;
        splits.insert(name.to_string(), (recs.len(), sum));
        Ok(())
    };
    paired_split("train_paired", &ds.train_paired)?;
    paired_split("train_tts", &ds.train_tts)?;
    paired_split("eval_homogeneous", &ds.eval_homogeneous)?;
    paired_split("eval_shifted", &ds.eval_shifted)?;
    let recs: Vec<ManifestRecord> = ds
        .train_textonly
        .iter()
        .map(|s| ManifestRecord {
            id: s.id.clone(),
            features: None,
            transcript: s.tokens.join(" "),
            phonemes: s.phonemes.ids.clone(),
            durations: s.phonemes.durations.clone(),
            origin: None,
        })
        .collect();
    let sum = write_manifest(dir, "train_textonly", &recs)?;
    splits.insert("train_textonly".to_string(), (recs.len(), sum));

    let index = DatasetIndex {
        splits,
        textgen_english_ratio_ppm: (ds.textgen_stats.english_ratio * 1e6).round() as u64,
    };
    write_file(&dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
    let mut stats = serde_json::to_vec_pretty(&ds.textgen_stats)?;
    stats.push(b'\n');
    write_file(&dir.join("textgen_stats.json"), &stats)?;
    Ok(index)
}

pub fn read_manifest(dir: &Path, split: &str) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(format!("{split}.jsonl"));
    let text = String::from_utf8(read_file(&path)?).map_err(|e| Error::invalid(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn manifest_checksum(dir: &Path, split: &str) -> Result<String> {
    Ok(sha256_hex(&read_file(&dir.join(format!("{split}.jsonl")))?))
}

fn split_tokens(transcript: &str) -> Vec<String> {
    transcript.split_whitespace().map(String::from).collect()
}

pub fn load_utterances(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    read_manifest(dir, split)?
        .into_iter()
        .map(|r| {
            let rel = r
                .features
                .ok_or_else(|| Error::invalid(format!("{split}/{}: paired record without features", r.id)))?;
            let features = decode_features(&read_file(&dir.join(rel))?)?;
            let phonemes = PhonemeSequence::new(r.phonemes, r.durations)?;
            if phonemes.frames() != features.nrows() {
                return Err(Error::shape(format!(
                    "{}: durations sum to {} but features have {} frames",
                    r.id,
                    phonemes.frames(),
                    features.nrows()
                )));
            }
            Ok(Utterance {
                id: r.id,
                features,
                tokens: split_tokens(&r.transcript),
                phonemes,
                origin: r.origin.unwrap_or(Origin::RealSim),
            })
        })
        .collect()
}

pub fn load_text_only(dir: &Path, split: &str) -> Result<Vec<TextOnlySample>> {
    read_manifest(dir, split)?
        .into_iter()
        .map(|r| {
            Ok(TextOnlySample {
                id: r.id,
                tokens: split_tokens(&r.transcript),
                phonemes: PhonemeSequence::new(r.phonemes, r.durations)?,
            })
        })
        .collect()
}

pub fn load_language(dir: &Path) -> Result<SyntheticLanguageSpec> {
    let mut lang: SyntheticLanguageSpec = serde_json::from_slice(&read_file(&dir.join("language.json"))?)?;
    lang.vocab.reindex();
    Ok(lang)
}

pub fn load_datasets(dir: &Path) -> Result<Datasets> {
    let textgen_stats = match fs::read(dir.join("textgen_stats.json")) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => CorpusStats::default(),
    };
    Ok(Datasets {
        language: load_language(dir)?,
        train_paired: load_utterances(dir, "train_paired")?,
        train_textonly: load_text_only(dir, "train_textonly")?,
        train_tts: load_utterances(dir, "train_tts")?,
        eval_homogeneous: load_utterances(dir, "eval_homogeneous")?,
        eval_shifted: load_utterances(dir, "eval_shifted")?,
        textgen_stats,
    })
}

/// Runs [`synthesize`] and writes the result plus the intermediate text
/// artifacts (`pairs.tsv`, `lexicon.tsv`, `cs_text.tsv`).
pub fn synthesize_to_dir(spec: &SynthSpec, dir: &Path) -> Result<(Datasets, DatasetIndex)> {
    let (ds, pairs, sentences) = synthesize(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = write_datasets(dir, &ds)?;
    let mut f = Vec::new();
    for p in &pairs {
        writeln!(f, "{}", p.to_line()).expect("write to Vec");
    }
    write_file(&dir.join("pairs.tsv"), &f)?;
    write_file(&dir.join("lexicon.tsv"), builtin_lexicon().to_text().as_bytes())?;
    let mut f = Vec::new();
    for s in &sentences {
        writeln!(f, "{}", s.to_line()).expect("write to Vec");
    }
    write_file(&dir.join("cs_text.tsv"), &f)?;
    Ok((ds, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang() -> SyntheticLanguageSpec {
        SyntheticLanguageSpec::generate(&LanguageConfig::default()).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn every_vocab_token_is_pronounceable() {
        let l = lang();
        for id in 1..l.vocab.len() {
            let t = l.vocab.token(id).unwrap();
            assert!(!l.lexicon[t].is_empty());
        }
        assert!(l.duration_law.means.iter().all(|&m| m >= 1.0));
    }

    #[test]
    fn noiseless_single_phoneme_repeats_prototype() {
        let mut l = lang();
        l.lexicon.insert("x".into(), vec![3]);
        l.duration_law.means[3] = 3.0;
        l.duration_law.jitter = 0.0;
        let law = RenderLaw {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let u = render(&l, "u", &toks("x"), &law, Origin::RealSim).unwrap();
        assert_eq!(u.features.nrows(), 3);
        let proto = l.prototypes.row(3).mapv(|v| v as f32 as f64);
        for r in u.features.rows() {
            assert_eq!(r, proto);
        }
    }

    #[test]
    fn durations_cover_all_frames_and_are_deterministic() {
        let l = lang();
        let a = synth_utterance(&l, "a", &toks("我 eat 饭")).unwrap();
        assert_eq!(a.phonemes.frames(), a.features.nrows());
        assert_eq!(a, synth_utterance(&l, "a", &toks("我 eat 饭")).unwrap());
        assert!(synth_utterance(&l, "a", &toks("我 zebra")).is_err());
    }

    #[test]
    fn tts_mean_offset_equals_artifact_norm_without_noise() {
        let l = lang();
        let s = CsSentence {
            tokens: toks("我 吃 book"),
            substituted_indices: vec![2],
            source_pair_id: "p".into(),
        };
        let clean = RenderLaw {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let tts_law = RenderLaw {
            noise_sigma: 0.0,
            artifact_norm: 2.5,
            duration_scale: 1.0,
        };
        let real = render(&l, "x", &s.tokens, &clean, Origin::RealSim).unwrap();
        let tts = simulate_tts(&l, "x", &s, &tts_law).unwrap();
        assert_eq!(tts.origin, Origin::TtsSim);
        let mean_dist: f64 = real
            .features
            .rows()
            .into_iter()
            .zip(tts.features.rows())
            .map(|(a, b)| (&a - &b).mapv(|v| v * v).sum().sqrt())
            .sum::<f64>()
            / real.features.nrows() as f64;
        assert!((mean_dist - 2.5).abs() < 1e-5, "{mean_dist}");
        let null = simulate_tts(&l, "x", &s, &clean).unwrap();
        assert_eq!(null.features, real.features);
    }

    #[test]
    fn feature_files_roundtrip_and_reject_bad_headers() {
        let u = synth_utterance(&lang(), "a", &toks("我 吃 饭")).unwrap();
        let bytes = encode_features(&u.features);
        assert_eq!(decode_features(&bytes).unwrap(), u.features);
        assert!(decode_features(b"XXXX\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn generated_pairs_are_distinct_and_alignable() {
        let pairs = generate_pairs(500, 3).unwrap();
        let keys: BTreeSet<String> = pairs
            .iter()
            .map(|p| p.to_line().split('\t').nth(1).unwrap().to_string())
            .collect();
        assert_eq!(keys.len(), 500);
        let lex = builtin_lexicon();
        assert!(pairs.iter().all(|p| crate::textgen::align_words(p, &lex).len() >= 2));
    }

    #[test]
    fn insufficient_pool_reports_counts() {
        let spec = SynthSpec::default();
        let err = build_datasets(&spec, &lang(), &[]).unwrap_err();
        assert!(err.to_string().contains(&spec.sizes.total().to_string()));
    }
}

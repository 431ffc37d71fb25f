//! Code-switching sentence generation from parallel Mandarin/English pairs.
//!
//! Nouns and verbs are aligned through a bilingual lexicon, then a subset of
//! the aligned Mandarin words is replaced by its English counterpart. The
//! number of replacements per sentence is chosen by a running-ratio
//! controller so that the corpus-level share of English tokens tracks a
//! target.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::is_latin_letter;
use crate::util::mix_seed;

/// Universal POS tag set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pos {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl Pos {
    const ALL: [(Pos, &'static str); 17] = [
        (Pos::Adj, "ADJ"),
        (Pos::Adp, "ADP"),
        (Pos::Adv, "ADV"),
        (Pos::Aux, "AUX"),
        (Pos::Cconj, "CCONJ"),
        (Pos::Det, "DET"),
        (Pos::Intj, "INTJ"),
        (Pos::Noun, "NOUN"),
        (Pos::Num, "NUM"),
        (Pos::Part, "PART"),
        (Pos::Pron, "PRON"),
        (Pos::Propn, "PROPN"),
        (Pos::Punct, "PUNCT"),
        (Pos::Sconj, "SCONJ"),
        (Pos::Sym, "SYM"),
        (Pos::Verb, "VERB"),
        (Pos::X, "X"),
    ];

    pub fn is_content(self) -> bool {
        matches!(self, Pos::Noun | Pos::Verb)
    }

    pub fn as_str(self) -> &'static str {
        Self::ALL
            .iter()
            .find(|(p, _)| *p == self)
            .map(|(_, s)| *s)
            .unwrap_or("X")
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|(_, name)| *name == s)
            .map(|(p, _)| *p)
            .ok_or_else(|| Error::invalid(format!("unknown POS tag {s:?}")))
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedWord {
    pub word: String,
    pub pos: Pos,
}

impl TaggedWord {
    pub fn new(word: impl Into<String>, pos: Pos) -> Self {
        Self { word: word.into(), pos }
    }
}

impl FromStr for TaggedWord {
    type Err = Error;

    /// `word/POS`; the split is on the last slash.
    fn from_str(s: &str) -> Result<Self> {
        let (word, pos) = s
            .rsplit_once('/')
            .ok_or_else(|| Error::invalid(format!("token {s:?} is not word/POS")))?;
        if word.is_empty() {
            return Err(Error::invalid(format!("token {s:?} has an empty word")));
        }
        Ok(Self::new(word, pos.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub pair_id: String,
    pub man: Vec<TaggedWord>,
    pub eng: Vec<TaggedWord>,
}

impl ParallelPair {
    pub fn new(pair_id: impl Into<String>, man: Vec<TaggedWord>, eng: Vec<TaggedWord>) -> Result<Self> {
        let pair_id = pair_id.into();
        if man.is_empty() || eng.is_empty() {
            return Err(Error::invalid(format!("pair {pair_id}: both sides must be non-empty")));
        }
        Ok(Self { pair_id, man, eng })
    }

    /// One record: `id<TAB>man tokens<TAB>eng tokens`, tokens `word/POS`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = line.split('\t');
        let (Some(id), Some(man), Some(eng), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::invalid("expected three tab-separated fields"));
        };
        let side = |s: &str| {
            s.split_whitespace()
                .map(TaggedWord::from_str)
                .collect::<Result<Vec<_>>>()
        };
        Self::new(id.trim(), side(man)?, side(eng)?)
    }

    pub fn to_line(&self) -> String {
        let side = |w: &[TaggedWord]| {
            w.iter()
                .map(|t| format!("{}/{}", t.word, t.pos))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("{}\t{}\t{}", self.pair_id, side(&self.man), side(&self.eng))
    }
}

/// Parses a pairs file. Malformed records are returned as diagnostics and
/// skipped rather than aborting the whole file.
pub fn parse_pairs(text: &str) -> (Vec<ParallelPair>, Vec<Error>) {
    let mut pairs = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match ParallelPair::parse_line(line) {
            Ok(p) => pairs.push(p),
            Err(e) => rejected.push(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            }),
        }
    }
    (pairs, rejected)
}

/// Mandarin word → set of acceptable English translations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, man: impl Into<String>, eng: impl Into<String>) {
        self.entries.entry(man.into()).or_default().insert(eng.into());
    }

    pub fn translates(&self, man: &str, eng: &str) -> bool {
        self.entries.get(man).is_some_and(|s| s.contains(eng))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Lines of `man<TAB>eng1 eng2 ...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (man, eng) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected man<TAB>translations".into(),
            })?;
            for e in eng.split_whitespace() {
                lex.insert(man.trim(), e);
            }
        }
        Ok(lex)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (man, engs) in &self.entries {
            s.push_str(man);
            s.push('\t');
            s.push_str(&engs.iter().cloned().collect::<Vec<_>>().join(" "));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWordPair {
    pub man_index: usize,
    pub eng_index: usize,
    pub pos: Pos,
}

/// Dictionary alignment of content words. Mandarin nouns/verbs are visited
/// left to right and each takes the leftmost unused English noun/verb that
/// its lexicon entry contains.
pub fn align_words(pair: &ParallelPair, dict: &Lexicon) -> Vec<AlignedWordPair> {
    let mut used = vec![false; pair.eng.len()];
    let mut out = Vec::new();
    for (mi, m) in pair.man.iter().enumerate() {
        if !m.pos.is_content() {
            continue;
        }
        let hit = pair
            .eng
            .iter()
            .enumerate()
            .find(|(ei, e)| !used[*ei] && e.pos.is_content() && dict.translates(&m.word, &e.word));
        if let Some((ei, _)) = hit {
            used[ei] = true;
            out.push(AlignedWordPair {
                man_index: mi,
                eng_index: ei,
                pos: m.pos,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionOrder {
    /// Lowest Mandarin-word frequency is substituted first.
    #[default]
    RarestFirst,
    MostFrequentFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Mandarin base sentence with English insertions.
    #[default]
    ManToEng,
    /// English base sentence with Mandarin insertions.
    EngToMan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstitutionPolicy {
    pub target_ratio: f64,
    #[serde(default)]
    pub freq_table: HashMap<String, u64>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub order: SubstitutionOrder,
    #[serde(default)]
    pub direction: Direction,
}

impl SubstitutionPolicy {
    pub fn new(target_ratio: f64, freq_table: HashMap<String, u64>, rng_seed: u64) -> Result<Self> {
        let p = Self {
            target_ratio,
            freq_table,
            rng_seed,
            order: SubstitutionOrder::RarestFirst,
            direction: Direction::ManToEng,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "target ratio {} not in (0, 1)",
                self.target_ratio
            )));
        }
        Ok(())
    }

    fn freq(&self, word: &str) -> u64 {
        self.freq_table.get(word).copied().unwrap_or(0)
    }
}

/// Word counts over the Mandarin side of a corpus.
pub fn frequency_table<'a>(pairs: impl IntoIterator<Item = &'a ParallelPair>) -> HashMap<String, u64> {
    let mut t = HashMap::new();
    for p in pairs {
        for w in &p.man {
            *t.entry(w.word.clone()).or_insert(0) += 1;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsSentence {
    pub tokens: Vec<String>,
    pub substituted_indices: Vec<usize>,
    pub source_pair_id: String,
}

impl CsSentence {
    pub fn to_line(&self) -> String {
        let idx: Vec<String> = self.substituted_indices.iter().map(|i| i.to_string()).collect();
        format!("{}\t{}\t{}", self.source_pair_id, self.tokens.join(" "), idx.join(","))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut f = line.split('\t');
        let (Some(id), Some(toks)) = (f.next(), f.next()) else {
            return Err(Error::invalid("expected id<TAB>tokens[<TAB>indices]"));
        };
        let substituted_indices = match f.next() {
            Some(s) if !s.trim().is_empty() => s
                .split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|e| Error::invalid(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            tokens: toks.split_whitespace().map(String::from).collect(),
            substituted_indices,
            source_pair_id: id.to_string(),
        })
    }

    pub fn english_count(&self) -> usize {
        self.tokens.iter().filter(|t| is_english(t)).count()
    }

    /// Space-joined transcript.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn is_english(token: &str) -> bool {
    token.chars().next().is_some_and(is_latin_letter)
}

/// Applies exactly `budget` substitutions (or all candidates if fewer),
/// picking candidates in policy order. Equal frequencies are ordered by a
/// key drawn from the policy seed and the pair id.
pub fn substitute(
    pair: &ParallelPair,
    alignments: &[AlignedWordPair],
    policy: &SubstitutionPolicy,
    budget: usize,
) -> CsSentence {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(policy.rng_seed, &pair.pair_id));
    let mut ranked: Vec<(u64, u64, &AlignedWordPair)> = alignments
        .iter()
        .map(|a| (policy.freq(&pair.man[a.man_index].word), rng.random::<u64>(), a))
        .collect();
    ranked.sort_by(|x, y| match policy.order {
        SubstitutionOrder::RarestFirst => (x.0, x.1).cmp(&(y.0, y.1)),
        SubstitutionOrder::MostFrequentFirst => (y.0, x.1).cmp(&(x.0, y.1)),
    });

    let (mut tokens, source): (Vec<String>, &[TaggedWord]) = match policy.direction {
        Direction::ManToEng => (pair.man.iter().map(|w| w.word.clone()).collect(), &pair.eng),
        Direction::EngToMan => (pair.eng.iter().map(|w| w.word.clone()).collect(), &pair.man),
    };
    let mut substituted: Vec<usize> = ranked
        .iter()
        .take(budget)
        .map(|(_, _, a)| {
            let (dst, src) = match policy.direction {
                Direction::ManToEng => (a.man_index, a.eng_index),
                Direction::EngToMan => (a.eng_index, a.man_index),
            };
            tokens[dst] = source[src].word.clone();
            dst
        })
        .collect();
    substituted.sort_unstable();
    CsSentence {
        tokens,
        substituted_indices: substituted,
        source_pair_id: pair.pair_id.clone(),
    }
}

/// Running English-token ratio controller.
#[derive(Debug, Clone, Default)]
pub struct RatioController {
    pub english: usize,
    pub total: usize,
}

impl RatioController {
    /// Number of substitutions that brings the running ratio closest to
    /// `target` after a sentence of `n_tokens` tokens, `base_english` of
    /// which are English before any substitution.
    pub fn budget(
        &self,
        target: f64,
        direction: Direction,
        n_tokens: usize,
        base_english: usize,
        candidates: usize,
    ) -> usize {
        let desired = (target * (self.total + n_tokens) as f64).round() as i64;
        let have = (self.english + base_english) as i64;
        let k = match direction {
            Direction::ManToEng => desired - have,
            Direction::EngToMan => have - desired,
        };
        k.clamp(0, candidates as i64) as usize
    }

    pub fn record(&mut self, sentence: &CsSentence) {
        self.english += sentence.english_count();
        self.total += sentence.tokens.len();
    }

    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.english as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub english_tokens: usize,
    pub english_ratio: f64,
    pub target_ratio: f64,
    pub noun_substitutions: usize,
    pub verb_substitutions: usize,
    pub alignable_words: usize,
    /// Set when the target could not be reached, e.g. too few alignable words.
    pub warning: Option<String>,
}

/// Largest gap between achieved and target ratio that is not flagged.
pub const RATIO_TOLERANCE: f64 = 0.02;

/// Streaming generator. Pairs are processed strictly in arrival order, which
/// is what keeps the running-ratio controller deterministic.
pub struct CorpusGenerator<'a> {
    dict: &'a Lexicon,
    policy: &'a SubstitutionPolicy,
    controller: RatioController,
    stats: CorpusStats,
}

impl<'a> CorpusGenerator<'a> {
    pub fn new(dict: &'a Lexicon, policy: &'a SubstitutionPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            dict,
            policy,
            controller: RatioController::default(),
            stats: CorpusStats {
                target_ratio: policy.target_ratio,
                ..Default::default()
            },
        })
    }

    pub fn push(&mut self, pair: &ParallelPair) -> CsSentence {
        let alignments = align_words(pair, self.dict);
        let base = match self.policy.direction {
            Direction::ManToEng => &pair.man,
            Direction::EngToMan => &pair.eng,
        };
        let base_english = base.iter().filter(|w| is_english(&w.word)).count();
        let budget = self.controller.budget(
            self.policy.target_ratio,
            self.policy.direction,
            base.len(),
            base_english,
            alignments.len(),
        );
        let sentence = substitute(pair, &alignments, self.policy, budget);

        self.controller.record(&sentence);
        self.stats.sentences += 1;
        self.stats.alignable_words += alignments.len();
        for &i in &sentence.substituted_indices {
            let pos = match self.policy.direction {
                Direction::ManToEng => pair.man[i].pos,
                Direction::EngToMan => pair.eng[i].pos,
            };
            match pos {
                Pos::Noun => self.stats.noun_substitutions += 1,
                Pos::Verb => self.stats.verb_substitutions += 1,
                _ => {}
            }
        }
        sentence
    }

    pub fn finish(mut self) -> CorpusStats {
        self.stats.tokens = self.controller.total;
        self.stats.english_tokens = self.controller.english;
        self.stats.english_ratio = self.controller.ratio();
        if self.stats.sentences > 0 && (self.stats.english_ratio - self.policy.target_ratio).abs() > RATIO_TOLERANCE {
            self.stats.warning = Some(format!(
                "english ratio {:.4} misses target {:.4} ({} alignable words in {} sentences)",
                self.stats.english_ratio, self.policy.target_ratio, self.stats.alignable_words, self.stats.sentences
            ));
        }
        self.stats
    }
}

pub fn generate_corpus<'p>(
    pairs: impl IntoIterator<Item = &'p ParallelPair>,
    dict: &Lexicon,
    policy: &SubstitutionPolicy,
) -> Result<(Vec<CsSentence>, CorpusStats)> {
    let mut gen = CorpusGenerator::new(dict, policy)?;
    let out: Vec<CsSentence> = pairs.into_iter().map(|p| gen.push(p)).collect();
    Ok((out, gen.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> TaggedWord {
        s.parse().unwrap()
    }

    fn apple_pair() -> (ParallelPair, Lexicon) {
        let pair = ParallelPair::new(
            "p1",
            vec![w("我/PRON"), w("吃/VERB"), w("苹果/NOUN")],
            vec![w("I/PRON"), w("eat/VERB"), w("apples/NOUN")],
        )
        .unwrap();
        let mut dict = Lexicon::new();
        dict.insert("吃", "eat");
        dict.insert("苹果", "apple");
        dict.insert("苹果", "apples");
        (pair, dict)
    }

    #[test]
    fn aligns_dictionary_hits_on_content_words() {
        let (pair, dict) = apple_pair();
        let a = align_words(&pair, &dict);
        assert_eq!(
            a,
            vec![
                AlignedWordPair {
                    man_index: 1,
                    eng_index: 1,
                    pos: Pos::Verb
                },
                AlignedWordPair {
                    man_index: 2,
                    eng_index: 2,
                    pos: Pos::Noun
                },
            ]
        );
    }

    #[test]
    fn nothing_alignable_and_empty_dict() {
        let pair = ParallelPair::new("p", vec![w("我/PRON"), w("很/ADV")], vec![w("I/PRON"), w("very/ADV")]).unwrap();
        let mut dict = Lexicon::new();
        dict.insert("我", "I");
        assert!(align_words(&pair, &dict).is_empty());
        let (apple, _) = apple_pair();
        assert!(align_words(&apple, &Lexicon::new()).is_empty());
    }

    #[test]
    fn duplicate_english_match_takes_leftmost() {
        let pair = ParallelPair::new(
            "p",
            vec![w("书/NOUN"), w("看/VERB")],
            vec![w("see/VERB"), w("book/NOUN"), w("the/DET"), w("book/NOUN")],
        )
        .unwrap();
        let mut dict = Lexicon::new();
        dict.insert("书", "book");
        dict.insert("看", "see");
        let a = align_words(&pair, &dict);
        // Every English position that could serve 书; greedy must pick the least.
        let options: Vec<usize> = pair
            .eng
            .iter()
            .enumerate()
            .filter(|(_, e)| dict.translates("书", &e.word))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(a[0].eng_index, *options.iter().min().unwrap());
        assert_eq!(a[1].eng_index, 0);
    }

    #[test]
    fn malformed_pos_is_rejected_with_line() {
        let text = "a\t我/PRON\tI/PRON\nb\t我/PRONOUN\tI/PRON\nc\t我\tI/PRON\n";
        let (pairs, rejected) = parse_pairs(text);
        assert_eq!(pairs.len(), 1);
        assert_eq!(rejected.len(), 2);
        assert!(matches!(rejected[0], Error::Parse { line: 2, .. }));
    }

    #[test]
    fn zero_alignments_is_identity() {
        let (pair, _) = apple_pair();
        let policy = SubstitutionPolicy::new(0.1, HashMap::new(), 0).unwrap();
        let s = substitute(&pair, &[], &policy, 3);
        assert_eq!(s.tokens, vec!["我", "吃", "苹果"]);
        assert!(s.substituted_indices.is_empty());
    }

    #[test]
    fn rarest_word_is_substituted_first() {
        let (pair, dict) = apple_pair();
        let a = align_words(&pair, &dict);
        let freq: HashMap<String, u64> = [("吃".to_string(), 500), ("苹果".to_string(), 5)].into();
        let mut policy = SubstitutionPolicy::new(0.1, freq, 0).unwrap();
        let s = substitute(&pair, &a, &policy, 1);
        assert_eq!(s.substituted_indices, vec![2]);
        assert_eq!(s.tokens[2], "apples");
        policy.order = SubstitutionOrder::MostFrequentFirst;
        let s = substitute(&pair, &a, &policy, 1);
        assert_eq!(s.substituted_indices, vec![1]);
        assert_eq!(s.tokens[1], "eat");
    }

    #[test]
    fn reverse_direction_inserts_mandarin() {
        let (pair, dict) = apple_pair();
        let a = align_words(&pair, &dict);
        let mut policy = SubstitutionPolicy::new(0.5, HashMap::new(), 0).unwrap();
        policy.direction = Direction::EngToMan;
        let s = substitute(&pair, &a, &policy, 2);
        assert_eq!(s.tokens, vec!["I", "吃", "苹果"]);
    }

    #[test]
    fn empty_stream_gives_zero_stats() {
        let policy = SubstitutionPolicy::new(0.1, HashMap::new(), 0).unwrap();
        let (out, stats) = generate_corpus(std::iter::empty(), &Lexicon::new(), &policy).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.sentences, 0);
        assert_eq!(stats.tokens, 0);
        assert_eq!(stats.english_ratio, 0.0);
        assert!(stats.warning.is_none());
    }

    #[test]
    fn unreachable_ratio_warns() {
        let pair = ParallelPair::new("p", vec![w("我/PRON")], vec![w("I/PRON")]).unwrap();
        let policy = SubstitutionPolicy::new(0.1, HashMap::new(), 0).unwrap();
        let pairs = vec![pair; 20];
        let (_, stats) = generate_corpus(&pairs, &Lexicon::new(), &policy).unwrap();
        assert!(stats.warning.is_some());
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(SubstitutionPolicy::new(0.0, HashMap::new(), 0).is_err());
        assert!(SubstitutionPolicy::new(1.0, HashMap::new(), 0).is_err());
    }

    #[test]
    fn line_formats_roundtrip() {
        let (pair, _) = apple_pair();
        assert_eq!(ParallelPair::parse_line(&pair.to_line()).unwrap(), pair);
        let s = CsSentence {
            tokens: vec!["我".into(), "eat".into()],
            substituted_indices: vec![1],
            source_pair_id: "x".into(),
        };
        assert_eq!(CsSentence::parse_line(&s.to_line()).unwrap(), s);
    }
}

//! Mixed Mandarin/English scoring: overall token error rate plus the
//! per-language breakdown (character errors on Han tokens, word errors on
//! Latin tokens).

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    #[serde(rename = "MAN")]
    Man,
    #[serde(rename = "ENG")]
    Eng,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScoredToken {
    pub text: String,
    pub lang: Lang,
}

impl ScoredToken {
    pub fn man(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            lang: Lang::Man,
        }
    }

    pub fn eng(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            lang: Lang::Eng,
        }
    }
}

pub fn is_han(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

pub fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic() || (matches!(c as u32, 0x00C0..=0x024F) && c != '\u{D7}' && c != '\u{F7}')
}

fn is_droppable(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c as u32, 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20 | 0x2010..=0x206F)
}

/// Splits a transcript into single-character Han tokens and maximal Latin
/// words. An apostrophe joining two Latin letters stays inside the word.
pub fn tokenize_mixed(text: &str) -> Result<Vec<ScoredToken>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    for (pos, &c) in chars.iter().enumerate() {
        if is_latin_letter(c) {
            word.push(c);
            continue;
        }
        if c == '\'' && !word.is_empty() && chars.get(pos + 1).is_some_and(|&n| is_latin_letter(n)) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(ScoredToken::eng(std::mem::take(&mut word)));
        }
        if is_han(c) {
            out.push(ScoredToken::man(c.to_string()));
        } else if !is_droppable(c) {
            return Err(Error::Script { ch: c, pos });
        }
    }
    if !word.is_empty() {
        out.push(ScoredToken::eng(word));
    }
    Ok(out)
}

/// Edit counts for one token class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangCounts {
    pub n_ref: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl LangCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl AddAssign for LangCounts {
    fn add_assign(&mut self, o: Self) {
        self.n_ref += o.n_ref;
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Raw counts; adding two of these is how corpus-level scores are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub man: LangCounts,
    pub eng: LangCounts,
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.man += o.man;
        self.eng += o.eng;
    }
}

impl ErrorCounts {
    pub fn for_lang(&mut self, lang: Lang) -> &mut LangCounts {
        match lang {
            Lang::Man => &mut self.man,
            Lang::Eng => &mut self.eng,
        }
    }

    pub fn total(&self) -> LangCounts {
        let mut t = self.man;
        t += self.eng;
        t
    }

    pub fn report(&self) -> MetricsReport {
        let total = self.total();
        let rate = |c: &LangCounts| 100.0 * c.errors() as f64 / c.n_ref.max(1) as f64;
        let per_lang = |c: &LangCounts| if c.n_ref == 0 { 0.0 } else { rate(c) };
        MetricsReport {
            ter: rate(&total),
            cer_man: per_lang(&self.man),
            wer_eng: per_lang(&self.eng),
            counts: *self,
            degenerate: total.n_ref == 0 && total.ins > 0,
            man_zero_ref: self.man.n_ref == 0,
            eng_zero_ref: self.eng.n_ref == 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent over all reference tokens.
    pub ter: f64,
    /// Percent over Mandarin reference tokens.
    pub cer_man: f64,
    /// Percent over English reference tokens.
    pub wer_eng: f64,
    pub counts: ErrorCounts,
    /// Empty reference scored against a non-empty hypothesis.
    pub degenerate: bool,
    /// `cer_man` is reported as 0 because there were no Mandarin references.
    pub man_zero_ref: bool,
    /// `wer_eng` is reported as 0 because there were no English references.
    pub eng_zero_ref: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// Unit-cost Levenshtein alignment with a deterministic backtrace
/// (match, then substitution, then deletion, then insertion).
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && diag == cur {
                ops.push(EditOp::Match);
                i -= 1;
                j -= 1;
                continue;
            }
            if diag + 1 == cur {
                ops.push(EditOp::Sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == cur {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Error counts for one utterance. Substitutions and deletions are charged
/// to the reference token's language, insertions to the hypothesis token's.
pub fn count_errors(reference: &[ScoredToken], hypothesis: &[ScoredToken]) -> ErrorCounts {
    let ref_text: Vec<&str> = reference.iter().map(|t| t.text.as_str()).collect();
    let hyp_text: Vec<&str> = hypothesis.iter().map(|t| t.text.as_str()).collect();
    let mut counts = ErrorCounts::default();
    for t in reference {
        counts.for_lang(t.lang).n_ref += 1;
    }
    let (mut i, mut j) = (0, 0);
    for op in align(&ref_text, &hyp_text) {
        match op {
            EditOp::Match => {
                i += 1;
                j += 1;
            }
            EditOp::Sub => {
                counts.for_lang(reference[i].lang).sub += 1;
                i += 1;
                j += 1;
            }
            EditOp::Del => {
                counts.for_lang(reference[i].lang).del += 1;
                i += 1;
            }
            EditOp::Ins => {
                counts.for_lang(hypothesis[j].lang).ins += 1;
                j += 1;
            }
        }
    }
    counts
}

pub fn score(reference: &[ScoredToken], hypothesis: &[ScoredToken]) -> MetricsReport {
    count_errors(reference, hypothesis).report()
}

/// Scores transcript strings pairwise and pools the counts.
pub fn score_corpus<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<MetricsReport> {
    let mut total = ErrorCounts::default();
    for (r, h) in pairs {
        total += count_errors(&tokenize_mixed(r)?, &tokenize_mixed(h)?);
    }
    Ok(total.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(spec: &[&str]) -> Vec<ScoredToken> {
        spec.iter()
            .map(|s| {
                if s.chars().all(is_han) {
                    ScoredToken::man(*s)
                } else {
                    ScoredToken::eng(*s)
                }
            })
            .collect()
    }

    #[test]
    fn tokenizes_mixed_script() {
        assert_eq!(
            tokenize_mixed("我eat苹果").unwrap(),
            vec![
                ScoredToken::man("我"),
                ScoredToken::eng("eat"),
                ScoredToken::man("苹"),
                ScoredToken::man("果")
            ]
        );
        assert!(tokenize_mixed("").unwrap().is_empty());
        assert_eq!(
            tokenize_mixed("hello world").unwrap(),
            vec![ScoredToken::eng("hello"), ScoredToken::eng("world")]
        );
        assert_eq!(tokenize_mixed("我，你。don't!").unwrap().len(), 3);
    }

    #[test]
    fn rejects_foreign_script_with_position() {
        match tokenize_mixed("我 7") {
            Err(Error::Script { ch: '7', pos: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(tokenize_mixed("日本語です").is_err());
    }

    #[test]
    fn identical_sequences_score_zero() {
        let r = toks(&["我", "eat", "果"]);
        let rep = score(&r, &r);
        assert_eq!((rep.ter, rep.cer_man, rep.wer_eng), (0.0, 0.0, 0.0));
    }

    #[test]
    fn english_substitution_breakdown() {
        let rep = score(&toks(&["我", "eat", "果"]), &toks(&["我", "it", "果"]));
        assert!((rep.ter - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(rep.cer_man, 0.0);
        assert_eq!(rep.wer_eng, 100.0);
    }

    #[test]
    fn mandarin_deletion_with_zero_english_reference() {
        let rep = score(&toks(&["我", "果"]), &toks(&["我"]));
        assert_eq!(rep.ter, 50.0);
        assert_eq!(rep.cer_man, 50.0);
        assert_eq!(rep.wer_eng, 0.0);
        assert!(rep.eng_zero_ref);
        assert!(!rep.man_zero_ref);
    }

    #[test]
    fn empty_reference_is_degenerate() {
        let rep = score(&[], &toks(&["我", "hi"]));
        assert_eq!(rep.ter, 200.0);
        assert!(rep.degenerate);
        assert_eq!(rep.counts.man.ins, 1);
        assert_eq!(rep.counts.eng.ins, 1);
    }

    #[test]
    fn cross_language_substitution_charged_to_reference() {
        let rep = score(&toks(&["我", "apple"]), &toks(&["我", "苹"]));
        assert_eq!(rep.counts.eng.sub, 1);
        assert_eq!(rep.counts.man.sub, 0);
        assert_eq!(rep.wer_eng, 100.0);
    }

    #[test]
    fn prefers_substitution_over_indel_pair() {
        assert_eq!(align(&["a", "b"], &["a", "c"]), vec![EditOp::Match, EditOp::Sub]);
    }
}

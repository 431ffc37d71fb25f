use cstt_core::metrics::{align, count_errors, score_corpus, tokenize_mixed, EditOp, Lang, ScoredToken};
use proptest::prelude::*;

/// Minimum edit distance by trying every operation at every position.
fn brute_distance(r: &[ScoredToken], h: &[ScoredToken]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rr @ ..], [b, hh @ ..]) => {
            let keep = brute_distance(rr, hh) + usize::from(a != b);
            let del = brute_distance(rr, h) + 1;
            let ins = brute_distance(r, hh) + 1;
            keep.min(del).min(ins)
        }
    }
}

fn token() -> impl Strategy<Value = ScoredToken> {
    prop_oneof![
        proptest::sample::select(vec!["我", "你", "吃", "饭"]).prop_map(ScoredToken::man),
        proptest::sample::select(vec!["book", "eat", "tea"]).prop_map(ScoredToken::eng),
    ]
}

fn seq() -> impl Strategy<Value = Vec<ScoredToken>> {
    proptest::collection::vec(token(), 0..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn errors_equal_brute_force_distance(r in seq(), h in seq()) {
        let c = count_errors(&r, &h).total();
        prop_assert_eq!(c.sub + c.del + c.ins, brute_distance(&r, &h));
        prop_assert_eq!(c.n_ref, r.len());
    }

    #[test]
    fn alignment_is_a_valid_edit_script(r in seq(), h in seq()) {
        let ops = align(&r, &h);
        let consumed_r = ops.iter().filter(|o| !matches!(o, EditOp::Ins)).count();
        let consumed_h = ops.iter().filter(|o| !matches!(o, EditOp::Del)).count();
        prop_assert_eq!(consumed_r, r.len());
        prop_assert_eq!(consumed_h, h.len());
    }

    #[test]
    fn language_buckets_partition_reference(r in seq(), h in seq()) {
        let c = count_errors(&r, &h);
        prop_assert_eq!(c.man.n_ref, r.iter().filter(|t| t.lang == Lang::Man).count());
        prop_assert_eq!(c.eng.n_ref, r.iter().filter(|t| t.lang == Lang::Eng).count());
        prop_assert_eq!(c.man.ins + c.eng.ins, c.total().ins);
    }

    #[test]
    fn identical_transcripts_score_zero(r in seq()) {
        let rep = cstt_core::metrics::score(&r, &r);
        prop_assert_eq!(rep.ter, 0.0);
    }
}

#[test]
fn mixed_script_example() {
    let rep = score_corpus([("我 想 eat 饭", "我 想 吃 饭")]).unwrap();
    assert!((rep.ter - 25.0).abs() < 1e-12);
    assert_eq!(rep.wer_eng, 100.0);
    assert_eq!(rep.cer_man, 0.0);
    assert_eq!(tokenize_mixed("我想eat饭").unwrap().len(), 4);
}

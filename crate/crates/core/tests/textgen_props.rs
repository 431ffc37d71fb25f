use cstt_core::synthcorpus::{builtin_lexicon, generate_pairs};
use cstt_core::textgen::{
    frequency_table, generate_corpus, is_english, Direction, RatioController, SubstitutionPolicy,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budget_is_monotone_in_target(
        english in 0usize..200, extra in 0usize..800, n in 1usize..12, base in 0usize..3,
        cand in 0usize..6, r1 in 0.01f64..0.99, r2 in 0.01f64..0.99,
    ) {
        let c = RatioController { english, total: english + extra };
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let base = base.min(n);
        let k_lo = c.budget(lo, Direction::ManToEng, n, base, cand);
        let k_hi = c.budget(hi, Direction::ManToEng, n, base, cand);
        prop_assert!(k_lo <= k_hi);
        prop_assert!(k_hi <= cand);
    }

    #[test]
    fn corpus_ratio_tracks_target(seed in 0u64..1000, target in 0.05f64..0.2) {
        let pairs = generate_pairs(400, seed).unwrap();
        let policy = SubstitutionPolicy::new(target, frequency_table(&pairs), seed).unwrap();
        let (sents, stats) = generate_corpus(&pairs, &builtin_lexicon(), &policy).unwrap();
        prop_assert!((stats.english_ratio - target).abs() <= 0.02, "{} vs {target}", stats.english_ratio);
        prop_assert!(stats.warning.is_none());
        let lex = builtin_lexicon();
        for (s, p) in sents.iter().zip(&pairs) {
            prop_assert_eq!(s.tokens.len(), p.man.len());
            for &i in &s.substituted_indices {
                prop_assert!(is_english(&s.tokens[i]));
                prop_assert!(lex.translates(&p.man[i].word, &s.tokens[i]));
            }
            for (i, t) in s.tokens.iter().enumerate() {
                if !s.substituted_indices.contains(&i) {
                    prop_assert_eq!(t, &p.man[i].word);
                }
            }
        }
    }
}

#[test]
fn corpus_is_deterministic_and_seed_sensitive() {
    let pairs = generate_pairs(300, 5).unwrap();
    let run = |seed| {
        let policy = SubstitutionPolicy::new(0.1, frequency_table(&pairs), seed).unwrap();
        generate_corpus(&pairs, &builtin_lexicon(), &policy).unwrap().0
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

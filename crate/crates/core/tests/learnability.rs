//! Smoke bound on the synthetic task: with enough paired data a toy
//! baseline learns the mapping.

use cstt_core::synthcorpus::{synthesize, SplitSizes, SynthSpec};
use cstt_core::trainer::{evaluate, train, SystemKind, TrainConfig};

#[test]
fn baseline_learns_synthetic_mapping() {
    let spec = SynthSpec {
        sizes: SplitSizes {
            train_paired: 1000,
            train_textonly: 10,
            train_tts: 10,
            ..SplitSizes::default()
        },
        ..SynthSpec::default()
    };
    let (ds, _, _) = synthesize(&spec).unwrap();
    let cfg = TrainConfig {
        system: SystemKind::Baseline,
        steps: 2000,
        peak_lr: 1e-3,
        warmup_steps: 100,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, &cfg, dir.path()).unwrap();
    let (_, rep) = evaluate(
        &out.model.to_inference().unwrap(),
        &ds.language.vocab,
        &ds.eval_homogeneous,
    )
    .unwrap();
    assert!(rep.ter < 20.0, "TER {}", rep.ter);
}

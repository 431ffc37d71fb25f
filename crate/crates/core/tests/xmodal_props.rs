use cstt_core::xmodal::{bi_infonce_loss, frame_multiset, modality_swap, mse_loss, XModalConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn pair_min(min_rows: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (min_rows..12, 1usize..5).prop_flat_map(|(r, c)| (mat(r, c), mat(r, c)))
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    pair_min(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mse_is_zero_on_equal_inputs_and_symmetric((a, b) in pair()) {
        prop_assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
    }

    #[test]
    fn swap_conserves_frames((a, b) in pair(), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = XModalConfig { swap_rate: rate, ..XModalConfig::with_mode("swap") };
        let (t, s) = modality_swap(&a, &b, &cfg, seed).unwrap();
        prop_assert_eq!(frame_multiset(&[&t, &s]), frame_multiset(&[&a, &b]));
        let changed = (0..a.nrows()).filter(|&i| t.row(i) != a.row(i) || s.row(i) != b.row(i)).count();
        let exchanged = (0..a.nrows()).filter(|&i| t.row(i) == b.row(i) && s.row(i) == a.row(i) && a.row(i) != b.row(i)).count();
        let want = (rate * a.nrows() as f64).round() as usize;
        prop_assert!(changed <= want);
        prop_assert_eq!(changed, exchanged);
    }

    #[test]
    fn infonce_is_permutation_equivariant((a, b) in pair_min(2), shift in 0usize..12, tau in 0.05f64..2.0) {
        let cfg = XModalConfig { temperature: tau, ..XModalConfig::with_mode("biinfonce") };
        let n = a.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &perm);
        let l = bi_infonce_loss(&a, &b, &cfg).unwrap();
        let lp = bi_infonce_loss(&pa, &pb, &cfg).unwrap();
        prop_assert!((l - lp).abs() < 1e-9);
        prop_assert!(l >= 0.0);
    }
}

#[test]
fn swap_count_on_five_frames() {
    let a = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
    let b = -&a - 1.0;
    let cfg = XModalConfig {
        swap_rate: 0.2,
        ..XModalConfig::with_mode("swap")
    };
    let (t, _) = modality_swap(&a, &b, &cfg, 9).unwrap();
    assert_eq!((0..5).filter(|&i| t.row(i) != a.row(i)).count(), 1);
}

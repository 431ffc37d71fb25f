use cstt_core::transducer::{transducer_loss, transducer_loss_oracle, LogitLattice};
use ndarray::Array3;
use proptest::prelude::*;

/// Sum of path probabilities by direct recursion over lattice moves.
fn path_sum(lp: &Array3<f64>, target: &[usize], blank: usize, t: usize, u: usize) -> f64 {
    let (t_len, u1, _) = lp.dim();
    if t == t_len - 1 && u == u1 - 1 {
        return lp[[t, u, blank]].exp();
    }
    let mut p = 0.0;
    if t + 1 < t_len {
        p += lp[[t, u, blank]].exp() * path_sum(lp, target, blank, t + 1, u);
    }
    if u + 1 < u1 {
        p += lp[[t, u, target[u]]].exp() * path_sum(lp, target, blank, t, u + 1);
    }
    p
}

fn recursive_nll(lat: &LogitLattice, target: &[usize]) -> f64 {
    -path_sum(&lat.log_probs(), target, lat.blank_id(), 0, 0).ln()
}

fn instance() -> impl Strategy<Value = (LogitLattice, Vec<usize>)> {
    (1usize..=4, 0usize..=3, 2usize..=5, 0usize..5).prop_flat_map(|(t, u, v, b)| {
        let blank = b % v;
        let labels: Vec<usize> = (0..v).filter(|&k| k != blank).collect();
        (
            proptest::collection::vec(-4.0f64..4.0, t * (u + 1) * v),
            proptest::collection::vec(proptest::sample::select(labels), u),
        )
            .prop_map(move |(vals, target)| {
                let lat = LogitLattice::new(Array3::from_shape_vec((t, u + 1, v), vals).unwrap(), blank).unwrap();
                (lat, target)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dp_matches_path_enumeration((lat, target) in instance()) {
        let dp = transducer_loss(&lat, &target).unwrap().nll;
        let rec = recursive_nll(&lat, &target);
        prop_assert!((dp - rec).abs() <= 1e-8, "dp {dp} vs recursion {rec}");
        let oracle = transducer_loss_oracle(&lat, &target).unwrap();
        prop_assert!((dp - oracle).abs() <= 1e-8);
    }

    #[test]
    fn gradient_matches_central_differences((lat, target) in instance()) {
        let res = transducer_loss(&lat, &target).unwrap();
        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0f64;
        for idx in ndarray::indices(lat.values().dim()) {
            let shifted = |d: f64| {
                let mut v = lat.values().clone();
                v[idx] += d;
                transducer_loss(&LogitLattice::new(v, lat.blank_id()).unwrap(), &target).unwrap().nll
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            diff2 += (fd - res.grad[idx]).powi(2);
            norm2 = norm2.max(fd * fd).max(res.grad[idx].powi(2));
        }
        let rel = diff2.sqrt() / norm2.sqrt().max(1e-3);
        prop_assert!(rel < 1e-4, "relative gradient error {rel}");
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_rows_sum_to_zero((lat, target) in instance()) {
        let res = transducer_loss(&lat, &target).unwrap();
        prop_assert!(res.nll >= -1e-12);
        for row in res.grad.lanes(ndarray::Axis(2)) {
            prop_assert!(row.sum().abs() < 1e-10);
        }
    }
}

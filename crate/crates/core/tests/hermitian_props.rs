use cmaflow::harness::random_pd_form;
use cmaflow::hermitian::{log_det_pd, trace_terms, HermitianForm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64, n: usize) -> (HermitianForm, HermitianForm) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_pd_form(&mut rng, n), random_pd_form(&mut rng, n))
}

proptest! {
    #[test]
    fn trace_inequality_on_random_pairs(seed in any::<u64>(), n in 1usize..=3) {
        let (h1, h2) = pair(seed, n);
        let t = trace_terms(&h1, &h2).unwrap();
        prop_assert!(t.holds(1e-12), "{t:?}");
    }

    #[test]
    fn log_det_scales_by_dimension(seed in any::<u64>(), n in 1usize..=3, c in 0.01f64..100.0) {
        let (h, _) = pair(seed, n);
        let lhs = log_det_pd(&h.scale(c)).unwrap();
        let rhs = n as f64 * c.ln() + log_det_pd(&h).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn eigenvalues_match_trace_and_determinant(seed in any::<u64>(), n in 1usize..=3) {
        let (h, _) = pair(seed, n);
        let ev = h.eigenvalues();
        let ev = &ev[..n];
        prop_assert!(ev.windows(2).all(|w| w[0] <= w[1]));
        let sum: f64 = ev.iter().sum();
        let prod: f64 = ev.iter().product();
        prop_assert!((sum - h.trace()).abs() <= 1e-9 * (1.0 + h.trace().abs()));
        prop_assert!((prod.ln() - log_det_pd(&h).unwrap()).abs() <= 1e-8);
    }

    #[test]
    fn inverse_is_two_sided(seed in any::<u64>(), n in 1usize..=3) {
        let (h, _) = pair(seed, n);
        let g = h.inverse_pd().unwrap();
        // tr(H G) = n exactly when G = H^{-1}
        prop_assert!((h.trace_product(&g) - n as f64).abs() <= 1e-9);
    }
}

#[test]
fn equal_forms_saturate_the_lower_bound() {
    let h = HermitianForm::from_diag(&[1.0, 2.0, 3.0]);
    let t = trace_terms(&h, &h).unwrap();
    assert!((t.lower - 3.0).abs() < 1e-12 && (t.middle - 3.0).abs() < 1e-12);
}

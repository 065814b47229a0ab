//! The trace inequality for pairs of positive Hermitian forms, sampled at random.

use cmaflow::harness::random_pd_form;
use cmaflow::hermitian::trace_terms;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmaflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=3 {
        let (mut lower_slack, mut upper_slack) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..10_000 {
            let h1 = random_pd_form(&mut rng, n);
            let h2 = random_pd_form(&mut rng, n);
            let t = trace_terms(&h1, &h2)?;
            assert!(t.holds(1e-12), "{t:?}");
            lower_slack = lower_slack.min((t.middle - t.lower) / t.middle);
            upper_slack = upper_slack.min((t.upper - t.middle) / t.upper);
        }
        println!("n = {n}: 10000 pairs, tightest relative slack lower {lower_slack:.2e} upper {upper_slack:.2e}");
    }
    Ok(())
}

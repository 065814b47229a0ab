use std::sync::Arc;

use cmaflow::calculus::{complex_hessian, GridField, Operators};
use cmaflow::geometry::{classify_grid, make_domain, DomainKind};
use cmaflow::hermitian::HermitianForm;
use proptest::prelude::*;

fn quadratic_case(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let d = 2 * n;
    (prop::collection::vec(-2.0f64..2.0, d * d), prop::collection::vec(-1.0f64..1.0, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn discrete_hessian_is_exact_on_quadratics(
        (a, b) in quadratic_case(2),
        axes in prop::collection::vec(0.7f64..1.3, 2),
    ) {
        let domain = make_domain(DomainKind::Ellipsoid(axes), 2).unwrap();
        let grid = Arc::new(classify_grid(&domain, 0.2).unwrap());
        let ops = Operators::new(grid.clone());
        let d = 4;
        let q = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..d {
                s += b[i] * x[i];
                for j in 0..d {
                    s += a[i * d + j] * x[i] * x[j];
                }
            }
            s
        };
        let field = GridField::from_fn(grid.clone(), 0.0, q);
        let exact = HermitianForm::from_real_hessian(2, |i, j| a[i * d + j] + a[j * d + i]);
        for (k, h) in complex_hessian(&ops, &field).iter().enumerate() {
            let diff = h.add(&exact.scale(-1.0));
            let err = diff.eigenvalues()[..2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err <= 1e-9, "node {k} at {:?}: {err}", grid.coords(k));
        }
    }

    #[test]
    fn feet_lie_on_the_boundary(h in 0.07f64..0.3, axis in 0.6f64..1.4) {
        let domain = make_domain(DomainKind::Ellipsoid(vec![axis]), 1).unwrap();
        let grid = classify_grid(&domain, h).unwrap();
        for f in grid.feet() {
            prop_assert!(domain.rho(&f.coords).abs() <= 1e-10);
            prop_assert!(f.arm > 0.0 && f.arm <= 1.0 + 1e-12);
        }
    }
}

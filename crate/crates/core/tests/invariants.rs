use lkik_core::circuit::{amplify_layer, Dissipator, LayerSpec};
use lkik_core::coefficients::{mve_exact, taylor_coefficients, taylor_exact};
use lkik_core::linalg::{self, c, CMatrix, CVector};
use lkik_core::liouville::{self, inv_sqrt_with, pure_state, InvSqrtOptions, Kind, SuperOperator};
use lkik_core::pauli;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;

fn rat(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Binomial `C(-1/2, p) = (-1)^p (2p)! / (4^p (p!)²)`, the target series.
fn neg_half_binomial(p: u32) -> BigRational {
    let fact = |n: u32| (1..=n as i64).fold(BigInt::one(), |a, k| a * k);
    let num = fact(2 * p);
    let den = BigInt::from(4).pow(p) * fact(p) * fact(p);
    let r = BigRational::new(num, den);
    if p % 2 == 1 {
        -r
    } else {
        r
    }
}

fn binom(n: u32, k: u32) -> BigRational {
    if k > n {
        return BigRational::zero();
    }
    (0..k).fold(BigRational::one(), |acc, i| {
        acc * rat((n - i) as i64) / rat(i as i64 + 1)
    })
}

/// Degree-`p` coefficient of `Σ_i w_i Π_l (1+x_l)^{i_l}`.
fn series_coefficient(entries: &[(Vec<u32>, BigRational)], p: &[u32]) -> BigRational {
    entries
        .iter()
        .fold(BigRational::zero(), |acc, (levels, w)| {
            acc + levels
                .iter()
                .zip(p)
                .fold(w.clone(), |t, (&i, &pl)| t * binom(i, pl))
        })
}

#[test]
fn three_layer_mve_matches_product_series() {
    for order in 1..=3u32 {
        let entries = mve_exact(3, order as usize).unwrap();
        for a in 0..=order {
            for b in 0..=order - a {
                for d in 0..=order - a - b {
                    let p = [a, b, d];
                    let want = p
                        .iter()
                        .fold(BigRational::one(), |t, &k| t * neg_half_binomial(k));
                    assert_eq!(
                        series_coefficient(&entries, &p),
                        want,
                        "order {order}, p {p:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn taylor_weights_match_univariate_series() {
    for m in 0..=10u32 {
        let entries: Vec<_> = taylor_exact(m as usize)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(j, w)| (vec![j as u32], w))
            .collect();
        for p in 0..=m {
            assert_eq!(
                series_coefficient(&entries, &[p]),
                neg_half_binomial(p),
                "M={m}, p={p}"
            );
        }
    }
}

fn random_matrix(n: usize, vals: &[(f64, f64)]) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| {
        let (re, im) = vals[i * n + j];
        c(re, im)
    })
}

fn random_layer(h: &[(f64, f64)], rates: (f64, f64, f64), dt: f64) -> LayerSpec {
    let a = random_matrix(2, h);
    let herm = (&a + a.adjoint()) * c(0.5, 0.0);
    let h2 =
        pauli::embed(&herm, &[0], 2).unwrap() + pauli::pauli_string("XX").unwrap() * c(0.4, 0.0);
    let diss = vec![
        Dissipator {
            jump: pauli::embed(&pauli::lowering(), &[0], 2).unwrap(),
            rate: rates.0,
        },
        Dissipator {
            jump: pauli::embed(&pauli::z(), &[1], 2).unwrap(),
            rate: rates.1,
        },
        Dissipator {
            jump: pauli::embed(&pauli::raising(), &[1], 2).unwrap(),
            rate: rates.2,
        },
    ];
    LayerSpec::constant("rand", dt, h2, diss).unwrap()
}

fn assert_density(rho: &CMatrix) -> Result<(), TestCaseError> {
    let n = rho.nrows();
    let tr: f64 = (0..n).map(|i| rho[(i, i)].re).sum();
    prop_assert!((tr - 1.0).abs() < 1e-10, "trace {tr}");
    prop_assert!(linalg::hermiticity_defect(rho) < 1e-10);
    let shifted = rho + linalg::identity(n) * c(1e-9, 0.0);
    prop_assert!(shifted.cholesky().is_some(), "not positive semidefinite");
    Ok(())
}

fn pair() -> impl Strategy<Value = (f64, f64)> {
    (-1.0..1.0f64, -1.0..1.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inv_sqrt_squares_to_inverse(vals in prop::collection::vec(pair(), 16), eps in 0.0..0.3f64) {
        let a = random_matrix(4, &vals);
        let s = SuperOperator::new(linalg::identity(4) + a * c(eps, 0.0), Kind::Composite);
        let (x, _, residual) = inv_sqrt_with(&s, &InvSqrtOptions::default()).unwrap();
        let check = linalg::matmul3(&x.matrix, &x.matrix, &s.matrix) - linalg::identity(4);
        prop_assert!(linalg::max_norm(&check) < 1e-9, "{}", linalg::max_norm(&check));
        prop_assert!(residual < 1e-9);
        let comm = linalg::commutator(&x.matrix, &s.matrix);
        prop_assert!(linalg::max_norm(&comm) < 1e-9);
    }

    #[test]
    fn amplified_layers_stay_physical(
        h in prop::collection::vec(pair(), 4),
        rates in (0.0..0.2f64, 0.0..0.2f64, 0.0..0.2f64),
        dt in 0.05..1.0f64,
        j in 0u32..4,
        psi in prop::collection::vec(pair(), 4),
    ) {
        let layer = random_layer(&h, rates, dt);
        let map = amplify_layer(&layer, j).unwrap();
        prop_assert!(map.trace_defect() < 1e-10, "{}", map.trace_defect());
        let v = CVector::from_iterator(4, psi.iter().map(|&(re, im)| c(re, im)));
        prop_assume!(v.norm() > 1e-3);
        let rho0 = pure_state(&(&v / c(v.norm(), 0.0))).unwrap();
        let out = liouville::DensityVector { entries: map.apply(&rho0.entries) }.devectorize();
        assert_density(&out)?;
    }

    #[test]
    fn taylor_weights_sum_to_one(m in 0usize..=12) {
        let set = taylor_coefficients(m).unwrap();
        prop_assert!((set.weight_sum() - 1.0).abs() < 1e-12);
        prop_assert!(set.gamma >= 1.0);
    }
}

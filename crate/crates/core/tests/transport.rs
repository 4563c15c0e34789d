use invlab_core::otmetric::brute_force::transport_min;
use invlab_core::otmetric::{transport, w1_exact, w1_sinkhorn, w2_diag_gaussian, DiagGaussian, FiniteDist, GroundMetric};
use proptest::prelude::*;

fn normalise(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Weights on `k` points with at least one positive entry, some possibly zero.
fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![3 => 0.01f64..1.0, 1 => Just(0.0)], k)
        .prop_filter("nonzero mass", |w| w.iter().sum::<f64>() > 0.0)
        .prop_map(normalise)
}

/// Symmetric, zero-diagonal, nonnegative cost matrix.
fn cost(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5.0, k * k).prop_map(move |mut c| {
        for i in 0..k {
            c[i * k + i] = 0.0;
            for j in 0..i {
                c[i * k + j] = c[j * k + i];
            }
        }
        c
    })
}

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=3).prop_flat_map(|k| (Just(k), dist(k), dist(k), cost(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn exact_matches_vertex_enumeration((k, p, q, c) in instance()) {
        let g = GroundMetric::new(k, c.clone()).unwrap();
        let sol = w1_exact(&FiniteDist::new(p.clone()).unwrap(), &FiniteDist::new(q.clone()).unwrap(), &g).unwrap();
        let brute = transport_min(&p, &q, |i, j| c[i * k + j]);
        prop_assert!((sol.value - brute).abs() < 1e-9, "simplex {} vs brute {}", sol.value, brute);
        prop_assert!(sol.duality_gap(&p, &q) < 1e-9);
        prop_assert!(sol.dual_infeasibility(|i, j| c[i * k + j]) < 1e-9);
    }

    #[test]
    fn plan_has_the_right_marginals((k, p, q, c) in instance()) {
        let sol = transport(&p, &q, |i, j| c[i * k + j]).unwrap();
        let mut rows = vec![0.0; k];
        let mut cols = vec![0.0; k];
        for &(i, j, m) in &sol.plan {
            prop_assert!(m >= -1e-12);
            rows[i] += m;
            cols[j] += m;
        }
        for i in 0..k {
            prop_assert!((rows[i] - p[i]).abs() < 1e-9);
            prop_assert!((cols[i] - q[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_cost_gives_symmetric_distance((k, p, q, c) in instance()) {
        let a = transport(&p, &q, |i, j| c[i * k + j]).unwrap().value;
        let b = transport(&q, &p, |i, j| c[i * k + j]).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    /// Entropic cost upper-bounds the exact one and the gap is at most
    /// eps * (log m + log n) (entropy of any coupling is bounded by that).
    #[test]
    fn sinkhorn_is_close_above_exact((k, p, q, c) in instance()) {
        let g = GroundMetric::new(k, c.clone()).unwrap();
        let fp = FiniteDist::new(p.clone()).unwrap();
        let fq = FiniteDist::new(q.clone()).unwrap();
        let exact = w1_exact(&fp, &fq, &g).unwrap().value;
        let eps = 1e-3;
        let s = w1_sinkhorn(&fp, &fq, &g, eps, 200_000).unwrap();
        let bound = eps * 2.0 * (k as f64).ln() + 1e-4;
        prop_assert!(s >= exact - 1e-4, "sinkhorn {s} below exact {exact}");
        prop_assert!(s - exact <= bound, "sinkhorn {s} exact {exact}");
    }

    #[test]
    fn w2_gaussian_matches_coordinatewise_formula(
        m1 in prop::collection::vec(-3.0f64..3.0, 4),
        m2 in prop::collection::vec(-3.0f64..3.0, 4),
        s1 in prop::collection::vec(0.01f64..2.0, 4),
        s2 in prop::collection::vec(0.01f64..2.0, 4),
    ) {
        let a = DiagGaussian::new(m1.clone(), s1.clone()).unwrap();
        let b = DiagGaussian::new(m2.clone(), s2.clone()).unwrap();
        let got = w2_diag_gaussian(&a, &b).unwrap();
        // Per-dimension W2^2 of 1-D Gaussians is (dm)^2 + (ds)^2.
        let want: f64 = (0..4).map(|i| (m1[i] - m2[i]).powi(2) + (s1[i] - s2[i]).powi(2)).sum::<f64>().sqrt();
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!((w2_diag_gaussian(&b, &a).unwrap() - got).abs() < 1e-15);
    }
}

#[test]
fn dirac_masses_cost_their_ground_distance() {
    let c = vec![0.0, 2.0, 3.0, 2.0, 0.0, 1.5, 3.0, 1.5, 0.0];
    let g = GroundMetric::new(3, c).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let v = w1_exact(&FiniteDist::dirac(3, i).unwrap(), &FiniteDist::dirac(3, j).unwrap(), &g).unwrap().value;
            assert_eq!(v, g.get(i, j));
        }
    }
}

#[test]
fn discrete_metric_gives_total_variation() {
    let p = [0.5, 0.3, 0.2];
    let q = [0.1, 0.3, 0.6];
    let v = w1_exact(&FiniteDist::new(p.to_vec()).unwrap(), &FiniteDist::new(q.to_vec()).unwrap(), &GroundMetric::discrete(3))
        .unwrap()
        .value;
    let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!((v - tv).abs() < 1e-12);
}

#[test]
fn larger_supports_agree_with_brute_force() {
    // k = 4 is still cheap for the enumeration and exercises degenerate pivots.
    let p = [0.25, 0.25, 0.25, 0.25];
    let q = [0.5, 0.0, 0.5, 0.0];
    let c = |i: usize, j: usize| (i as f64 - j as f64).abs();
    let sol = transport(&p, &q, c).unwrap();
    assert!((sol.value - transport_min(&p, &q, c)).abs() < 1e-12);
    assert!(sol.duality_gap(&p, &q) < 1e-12);
}

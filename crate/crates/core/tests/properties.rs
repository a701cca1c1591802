use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dproxsgt::algorithms::{step, tracking_mean_gap, track, AlgoConfig, AlgoState, AlgorithmId, StepContext};
use dproxsgt::compressors::Compressor;
use dproxsgt::metrics::consensus_error;
use dproxsgt::problems::{make_heterogeneous, Batch, LossKind, ProblemSpec};
use dproxsgt::proxops::{soft_threshold, Composite, Regularizer};
use dproxsgt::rng::StreamFactory;
use dproxsgt::topology::{build_custom, build_ring, Graph, WeightScheme};

fn compressor() -> impl Strategy<Value = Compressor> {
    prop_oneof![
        Just(Compressor::Identity),
        (0.05f64..1.0).prop_map(|ratio| Compressor::TopK { ratio }),
        (0.05f64..1.0).prop_map(|ratio| Compressor::RandK { ratio }),
        (1u32..16).prop_map(|s| Compressor::Qsgd { s }),
    ]
}

/// Random connected graph: a spanning path plus extra edges.
fn graph() -> impl Strategy<Value = Graph> {
    (2usize..9).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..12).prop_map(move |extra| {
            let edges = (1..n).map(|i| (i - 1, i)).chain(extra.into_iter().filter(|(a, b)| a != b));
            Graph::from_edges(n, edges).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn built_matrices_are_doubly_stochastic_and_contract(g in graph(), metropolis in any::<bool>(), gamma in 0.05f64..=1.0) {
        let scheme = if metropolis { WeightScheme::Metropolis } else { WeightScheme::Uniform };
        let w = build_custom(&g, scheme).unwrap();
        prop_assert!(w.max_stochastic_deviation() <= 1e-12);
        prop_assert!(w.rho() < 1.0);
        prop_assert!(w.weights().iter().all(|&v| v >= 0.0));
        prop_assert!(w.damped(gamma).unwrap().rho() < 1.0);
    }

    #[test]
    fn consensus_error_matches_pairwise_oracle(m in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let x = Array2::from_shape_vec((3, 4), m).unwrap();
        // sum_i |x_i - xbar|^2 = (1 / 2n) sum_{i,j} |x_i - x_j|^2
        let n = 4.0;
        let mut pairs = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let d = &x.column(i) - &x.column(j);
                pairs += d.dot(&d);
            }
        }
        prop_assert!((consensus_error(x.view()) - pairs / (2.0 * n)).abs() <= 1e-10 * pairs.max(1.0));
    }

    #[test]
    fn compressor_error_within_alpha(q in compressor(), v in proptest::collection::vec(-10.0f64..10.0, 1..40), seed in any::<u64>()) {
        let x = Array1::from_vec(v);
        let d = x.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, msg) = q.compress(x.view(), &mut rng);
        prop_assert_eq!(msg.decode(), y.clone());
        prop_assert_eq!(msg.bit_cost, q.bit_cost(d));
        if !q.is_randomized() {
            let err = (&x - &y).mapv(|e| e * e).sum();
            prop_assert!(err <= q.alpha_sq(d) * x.dot(&x) + 1e-12);
        }
    }

    #[test]
    fn l1_prox_is_soft_threshold(v in proptest::collection::vec(-3.0f64..3.0, 1..20), mu in 0.0f64..2.0, step in 0.01f64..2.0) {
        let x = Array1::from_vec(v);
        let p = Regularizer::l1(mu).prox(step, x.view());
        for (a, b) in p.iter().zip(&x) {
            prop_assert_eq!(*a, soft_threshold(*b, mu * step));
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn tracker_mean_follows_gradient_mean(
        q in compressor(),
        seed in 0u64..1000,
        gamma in 0.1f64..=1.0,
        batch in 1usize..6,
        algo in prop_oneof![Just(AlgorithmId::DProxSgt), Just(AlgorithmId::CDProxSgt), Just(AlgorithmId::CDProxSgtReference)],
    ) {
        let p = make_heterogeneous(&ProblemSpec {
            loss: LossKind::Logistic, d: 6, workers: 4, per_worker: 15, skew_delta: 1.0, noise: 0.1,
            reg: Regularizer::l1(0.01), seed,
        }).unwrap();
        let w = build_ring(4, WeightScheme::Metropolis).unwrap();
        let cfg = AlgoConfig {
            gamma_x: gamma, gamma_y: gamma, compressor_x: q, compressor_y: q,
            ..AlgoConfig::new(0.1 / p.smoothness(), Batch::Size(batch), 25)
        };
        let ctx = StepContext { problem: &p, mixing: &w, cfg: &cfg, streams: StreamFactory::new(seed) };
        let mut s = AlgoState::new(Array1::zeros(6).view(), 4, algo.is_compressed());
        for _ in 0..25 {
            let tr = track(algo, &s, &ctx).unwrap();
            prop_assert!(tracking_mean_gap(&tr.y, &tr.grads) <= 1e-10);
            step(algo, &mut s, &ctx).unwrap();
        }
        prop_assert!(s.x.iter().all(|v| v.is_finite()));
    }
}

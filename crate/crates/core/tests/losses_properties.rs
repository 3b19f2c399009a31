use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmamba_core::losses::{
    cmdt_loss, cmdt_loss_graph, cross_entropy, ser_loss, to_complex_domain, vec_sim, LossConfig,
    PrototypeBank,
};
use tfmamba_core::numerics::{dft_oracle, finite_diff_check, DiffValue, Graph, Tensor};

fn complex_vec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), n)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
        .prop_filter("nonzero", |v: &Vec<Complex64>| v.iter().any(|z| z.norm() > 1e-3))
}

fn pair() -> impl Strategy<Value = (Vec<Complex64>, Vec<Complex64>)> {
    (1usize..20).prop_flat_map(|n| (complex_vec(n), complex_vec(n)))
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

proptest! {
    #[test]
    fn similarity_scale_invariant((u, v) in pair(), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
        let su: Vec<_> = u.iter().map(|z| z * alpha).collect();
        let sv: Vec<_> = v.iter().map(|z| z * beta).collect();
        let base = vec_sim(&u, &v).unwrap();
        prop_assert!((vec_sim(&su, &sv).unwrap() - base).abs() <= 1e-14);
    }

    #[test]
    fn similarity_bounded((u, v) in pair()) {
        prop_assert!(vec_sim(&u, &v).unwrap().abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn complex_domain_matches_oracle(v in prop::collection::vec(-3.0f64..3.0, 2..40)) {
        let fast = to_complex_domain(&v).unwrap();
        let slow = dft_oracle(&v).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).norm() <= 1e-10);
        }
    }

    #[test]
    fn cmdt_positive_with_mixed_labels(seed: u64, n in 2usize..8, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = PrototypeBank::new(random_rows(&mut rng, k, 6)).unwrap();
        let pooled = random_rows(&mut rng, n, 6);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = (labels[1] + 1) % k;
        let l = cmdt_loss(&pooled, &labels, &bank, &LossConfig::default()).unwrap();
        prop_assert!(l > 0.0);
    }

    #[test]
    fn ser_loss_linear_in_cmdt(ce in 0.0f64..5.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let cfg = LossConfig::default();
        let lhs = ser_loss(ce, a + b, &cfg) - ser_loss(ce, a, &cfg);
        prop_assert!((lhs - cfg.lambda * b).abs() <= 1e-12);
    }
}

#[test]
fn weaker_positive_raises_loss() {
    // row 0 of the similarity matrix with the positive similarity lowered
    // while the negatives stay fixed
    let tau = 0.1;
    let negatives = [0.2, -0.4, 0.1];
    let row = |pos: f64| {
        let mut logits = vec![pos / tau];
        logits.extend(negatives.iter().map(|s| s / tau));
        cross_entropy(&logits, 0).unwrap()
    };
    let mut last = row(1.0);
    for pos in [0.8, 0.5, 0.0, -0.5, -1.0] {
        let next = row(pos);
        assert!(next > last);
        last = next;
    }
}

#[test]
fn anchor_moved_towards_negative_raises_loss() {
    let p0 = vec![1.0, 0.0, 0.5, -0.3, 0.2, 0.9];
    let p1 = vec![-0.4, 0.7, 0.1, 0.6, -0.8, 0.0];
    let bank = PrototypeBank::new(Tensor::from_rows(&[p0.clone(), p1.clone()]).unwrap()).unwrap();
    let cfg = LossConfig::default();
    let mut last = f64::NEG_INFINITY;
    for mix in [0.0, 0.25, 0.5, 0.75] {
        let anchor: Vec<f64> = p0.iter().zip(&p1).map(|(a, b)| (1.0 - mix) * a + mix * b).collect();
        let pooled = Tensor::from_rows(&[anchor, p1.clone()]).unwrap();
        let l = cmdt_loss(&pooled, &[0, 1], &bank, &cfg).unwrap();
        assert!(l > last);
        last = l;
    }
}

#[test]
fn ser_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pooled = random_rows(&mut rng, 4, 7);
    let bank = random_rows(&mut rng, 3, 7);
    let head = random_rows(&mut rng, 7, 3);
    let labels = [2, 0, 1, 2];
    let cfg = LossConfig {
        tau: 0.5,
        lambda: 0.1,
    };
    let params: Vec<DiffValue> = [pooled, bank, head].into_iter().map(DiffValue::new).collect();
    let report = finite_diff_check(
        &params,
        |g: &mut Graph, v: &[_]| {
            let logits = g.matmul(v[0], v[2]);
            let ce = g.cross_entropy(logits, &labels)?;
            let cmdt = cmdt_loss_graph(g, v[0], &labels, v[1], &cfg)?;
            let weighted = g.scale(cmdt, cfg.lambda);
            Ok(g.add(ce, weighted))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

use cutoff_core::tensor::{gradcheck, Graph, ParamStore, Tensor, TensorError, Var, LAYER_NORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `v` to a scalar through fixed random weights so every output
/// coordinate contributes a distinct amount.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(v), &mut rng);
    let w = g.constant(&w)?;
    let m = g.mul(v, w)?;
    g.sum(m)
}

fn store_with(inputs: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        s.add(format!("x{i}"), t.clone(), false);
    }
    s
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let store = store_with(inputs);
    gradcheck::<TensorError, _>(&store, |g, s| {
        let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect::<Result<_, _>>()?;
        let out = f(g, &vars)?;
        probe(g, out, 99)
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::new();
    let id = g.constant(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let b = g.constant(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let c = g.matmul(id, b).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
    let b = g.constant(&Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
    let c = g.matmul(p, b).unwrap();
    assert_eq!(g.value(c), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_rejects_inner_mismatch_with_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let err = check(&[a, b], |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    for &p in g.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);
    let x = g.constant(&Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    assert!((g.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()).unwrap();
    assert_eq!(g.softmax(x), Err(TensorError::NonFinite { op: "softmax" }));
    let x = g.constant(&Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).unwrap()).unwrap();
    assert!(g.softmax(x).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(&Tensor::ones(&[4])).unwrap();
    let bias = g.constant(&Tensor::zeros(&[4])).unwrap();
    let x = g.constant(&Tensor::full(&[1, 4], 3.5)).unwrap();
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let gain = g.constant(&Tensor::ones(&[2])).unwrap();
    let bias = g.constant(&Tensor::zeros(&[2])).unwrap();
    let x = g.constant(&Tensor::from_rows(&[&[1.0, -1.0]])).unwrap();
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    // mean 0, variance 1: output is x / sqrt(1 + eps)
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((g.value(y)[0] - expect).abs() < 1e-15);
    assert!((g.value(y)[1] + expect).abs() < 1e-15);
    assert!((expect - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    let err = check(&[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_and_structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);

    let cases: Vec<(&str, f64)> = vec![
        ("add", check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))),
        ("mul", check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))),
        ("add_row", check(&[a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]))),
        ("scale", check(&[a.clone()], |g, v| g.scale(v[0], -2.5))),
        ("gelu", check(&[a.clone()], |g, v| g.gelu(v[0]))),
        ("softmax", check(&[a.clone()], |g, v| g.softmax(v[0]))),
        ("transpose", check(&[a.clone()], |g, v| g.transpose(v[0]))),
        ("slice_cols", check(&[a.clone()], |g, v| g.slice_cols(v[0], 1, 3))),
        (
            "concat_cols",
            check(&[a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "stack_rows",
            check(&[row.clone(), row.clone()], |g, v| g.stack_rows(&[v[0], v[1]])),
        ),
        ("select_rows", check(&[a.clone()], |g, v| g.select_rows(v[0], &[2, 0, 2]))),
        ("gather_rows", check(&[a.clone()], |g, v| g.gather_rows(v[0], &[1, 1, 0]))),
        ("reshape", check(&[a.clone()], |g, v| g.reshape(v[0], &[12]))),
        ("mean_rows", check(&[a.clone()], |g, v| g.mean_rows(v[0]))),
        ("mean", check(&[a.clone()], |g, v| g.mean(v[0]))),
        (
            "cross_entropy_rows",
            check(&[a.clone()], |g, v| g.cross_entropy_rows(v[0], &[0, 3, 1])),
        ),
        (
            "log_clamped",
            check(&[Tensor::new(vec![4], vec![0.2, 0.5, 0.9, 1.7]).unwrap()], |g, v| {
                g.log_clamped(v[0], 1e-12)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn backward_of_sum_is_all_ones_and_half_norm_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random(&[2, 3], &mut rng);

    let mut g = Graph::new();
    let v = g.leaf(&p).unwrap();
    let s = g.sum(v).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(v).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let v = g.leaf(&p).unwrap();
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    let grads = g.backward(half).unwrap();
    for (gv, pv) in grads.wrt(v).unwrap().iter().zip(p.data()) {
        assert!((gv - pv).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut g = Graph::new();
    let v = g.leaf(&Tensor::ones(&[3])).unwrap();
    assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphConsumed);
    assert_eq!(g.sum(v).unwrap_err(), TensorError::GraphConsumed);
}

#[test]
fn vars_from_another_graph_are_rejected() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let v = g1.leaf(&Tensor::ones(&[2])).unwrap();
    assert_eq!(g2.sum(v).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn backward_visits_each_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.leaf(&random(&[4, 4], &mut rng)).unwrap();
    let w = g.leaf(&random(&[4, 4], &mut rng)).unwrap();
    let mut h = x;
    for _ in 0..6 {
        let m = g.matmul(h, w).unwrap();
        let a = g.gelu(m).unwrap();
        h = g.add(a, h).unwrap();
    }
    let s = g.sum(h).unwrap();
    let n = g.len();
    g.backward(s).unwrap();
    assert_eq!(g.visit_counts().len(), n);
    assert!(g.visit_counts().iter().all(|&c| c == 1), "{:?}", g.visit_counts());
}

#[test]
fn param_nodes_accumulate_across_uses() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let mut g = Graph::new();
    let a = g.param(&store, id).unwrap();
    let b = g.param(&store, id).unwrap();
    assert_eq!(a, b);
    let s1 = g.sum(a).unwrap();
    let s2 = g.sum(b).unwrap();
    let t = g.add(s1, s2).unwrap();
    let grads = g.backward(t).unwrap();
    assert_eq!(grads.param(id).unwrap(), &[2.0, 2.0]);
    store.assign_grads(&grads);
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn gradcheck_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = store_with(&[random(&[5], &mut rng)]);

    // quadratic: central differences are exact up to rounding
    let r = gradcheck::<TensorError, _>(&store, |g, s| {
        let p = g.param(s, cutoff_core::ParamId(0))?;
        let sq = g.mul(p, p)?;
        let sc = g.scale(sq, 3.0)?;
        g.sum(sc)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    assert_eq!(r.coordinates, 5);

    // softmax + cross-entropy composite
    let r = gradcheck::<TensorError, _>(&store, |g, s| {
        let p = g.param(s, cutoff_core::ParamId(0))?;
        let row = g.reshape(p, &[1, 5])?;
        let ce = g.cross_entropy_rows(row, &[2])?;
        g.sum(ce)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);

    // constant: analytic and numeric both zero
    let r = gradcheck::<TensorError, _>(&store, |g, _| g.constant(&Tensor::scalar(4.0))).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn gradcheck_rejects_non_finite_objective() {
    let store = store_with(&[Tensor::ones(&[2])]);
    let r = gradcheck::<TensorError, _>(&store, |g, _| g.constant(&Tensor::scalar(f64::NAN)));
    assert!(r.is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_normalized_and_positive(
        vals in prop::collection::vec(-50.0f64..50.0, 1..40),
        width in 1usize..8,
    ) {
        let rows = vals.len() / width;
        prop_assume!(rows >= 1);
        let data = vals[..rows * width].to_vec();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![rows, width], data).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        for row in g.value(y).chunks(width) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn random_matmul_chains_pass_gradcheck(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let err = check(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.gelu(c)
        });
        prop_assert!(err < 1e-6, "{}", err);
    }
}

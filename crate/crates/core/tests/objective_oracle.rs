use cutoff_core::objective::{js_consistency, total_loss, LossWeights};
use cutoff_core::tensor::gradcheck;
use cutoff_core::{Error, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn entropy(p: &[f64]) -> f64 {
    -compensated_sum(p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()))
}

/// Entropy form of the generalized JS divergence:
/// `H(mean) - mean_i H(p_i)`, algebraically equal to the mean KL to the mixture.
fn js_oracle(dists: &[Vec<f64>]) -> f64 {
    let k = dists.len() as f64;
    let c = dists[0].len();
    let mean: Vec<f64> = (0..c)
        .map(|j| compensated_sum(dists.iter().map(|d| d[j])) / k)
        .collect();
    entropy(&mean) - compensated_sum(dists.iter().map(|d| entropy(d))) / k
}

fn random_distribution(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // skewed draws so some entries are tiny
    let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powi(3) + 1e-9).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn js_of(dists: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = dists
        .iter()
        .map(|d| g.leaf(&Tensor::new(vec![d.len()], d.clone()).unwrap()).unwrap())
        .collect();
    let js = js_consistency(&mut g, &vars).unwrap();
    g.scalar(js)
}

#[test]
fn js_matches_entropy_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.gen_range(2..=10);
        let n = rng.gen_range(1..=5);
        let dists: Vec<Vec<f64>> = (0..=n).map(|_| random_distribution(c, &mut rng)).collect();
        let got = js_of(&dists);
        let want = js_oracle(&dists);
        worst = worst.max((got - want).abs());
        assert!(got >= 0.0);
        assert!(got <= (c as f64).ln() + 1e-12);
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn js_bounded_by_log_classes_for_extreme_inputs() {
    // disjoint one-hot distributions attain ln K for K <= C inputs
    for c in 2..=6 {
        let dists: Vec<Vec<f64>> = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let js = js_of(&dists);
        assert!((js - (c as f64).ln()).abs() < 1e-12, "{c}: {js}");
    }
}

#[test]
fn js_is_exactly_permutation_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let c = rng.gen_range(2..=10);
        let n = rng.gen_range(1..=5);
        let dists: Vec<Vec<f64>> = (0..=n).map(|_| random_distribution(c, &mut rng)).collect();
        let mut order: Vec<usize> = (0..dists.len()).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| dists[i].clone()).collect();
        assert_eq!(js_of(&dists).to_bits(), js_of(&permuted).to_bits());

        // gradients follow the permutation exactly
        let grads_of = |ds: &[Vec<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ds
                .iter()
                .map(|d| g.leaf(&Tensor::new(vec![c], d.clone()).unwrap()).unwrap())
                .collect();
            let js = js_consistency(&mut g, &vars).unwrap();
            let grads = g.backward(js).unwrap();
            vars.iter().map(|&v| grads.wrt(v).unwrap().to_vec()).collect::<Vec<_>>()
        };
        let base = grads_of(&dists);
        let perm = grads_of(&permuted);
        for (slot, &i) in order.iter().enumerate() {
            assert_eq!(perm[slot], base[i]);
        }
    }
}

#[test]
fn js_is_zero_iff_inputs_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..200 {
        let c = rng.gen_range(2..=10);
        let p = random_distribution(c, &mut rng);
        let same = vec![p.clone(); rng.gen_range(2..=6)];
        assert_eq!(js_of(&same), 0.0);
        let mut other = same.clone();
        other[0] = random_distribution(c, &mut rng);
        assert!(js_of(&other) > 0.0);
    }
}

#[test]
fn js_gradient_matches_finite_differences() {
    // inputs are softmaxed logits so perturbations stay on the simplex
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut store = ParamStore::new();
    for i in 0..4 {
        store.add(format!("z{i}"), Tensor::normal(&[5], 1.0, &mut rng), false);
    }
    let report = gradcheck::<Error, _>(&store, |g, s| {
        let probs = s
            .ids()
            .map(|id| {
                let z = g.param(s, id)?;
                g.softmax(z)
            })
            .collect::<Result<Vec<_>, _>>()?;
        js_consistency(g, &probs)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn total_loss_gradient_and_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for n in 1..=3 {
        let mut store = ParamStore::new();
        for i in 0..=n {
            store.add(format!("logits{i}"), Tensor::normal(&[4], 1.5, &mut rng), false);
        }
        let weights = LossWeights::new(rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)).unwrap();
        let label = rng.gen_range(0..4);

        let build = |g: &mut Graph, s: &ParamStore| {
            let logits = (0..=n)
                .map(|i| g.param(s, ParamId(i)))
                .collect::<Result<Vec<_>, _>>()?;
            total_loss(g, logits[0], &logits[1..], &[label], &weights)
        };
        let mut g = Graph::new();
        let obj = build(&mut g, &store).unwrap();
        let b = &obj.breakdown;
        assert_eq!(b.ce_augmented.len(), n);
        assert!((b.recombine(&weights) - b.total).abs() < 1e-12);
        assert!(b.js >= 0.0);

        let report = gradcheck::<Error, _>(&store, |g, s| Ok(build(g, s)?.total)).unwrap();
        assert!(report.max_rel_error < 1e-6, "n={n}: {report:?}");
    }
}

#[test]
fn total_loss_over_positions() {
    // seq2seq form: [rows, C] logits with one target per row
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut store = ParamStore::new();
    for i in 0..3 {
        store.add(format!("logits{i}"), Tensor::normal(&[3, 5], 1.0, &mut rng), false);
    }
    let weights = LossWeights::new(0.5, 2.0).unwrap();
    let report = gradcheck::<Error, _>(&store, |g, s| {
        let l: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect::<Result<_, _>>()?;
        Ok(total_loss(g, l[0], &l[1..], &[4, 0, 2], &weights)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

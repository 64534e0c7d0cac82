use cutoff_core::adversarial::{adversarial_step_loss, pgd_perturb, AdvConfig};
use cutoff_core::models::{Classifier, EmbeddingClassifier, EncoderConfig};
use cutoff_core::objective::cross_entropy;
use cutoff_core::trainer::PassCounter;
use cutoff_core::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// logits = (1^T W) A: every row of W shares the gradient A (p - e_y).
struct LinearToy {
    params: ParamStore,
    classes: usize,
}

impl LinearToy {
    fn new(d: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        params.add("a", Tensor::normal(&[d, c], 1.0, rng), true);
        LinearToy { params, classes: c }
    }

    fn a(&self) -> &Tensor {
        self.params.get(ParamId(0))
    }
}

impl EmbeddingClassifier for LinearToy {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits_with(&self, g: &mut Graph, store: &ParamStore, w: Var) -> Result<Var> {
        let rows = g.shape(w)[0];
        let ones = g.constant(&Tensor::ones(&[1, rows]))?;
        let pooled = g.matmul(ones, w)?;
        let a = g.param(store, ParamId(0))?;
        let logits = g.matmul(pooled, a)?;
        Ok(g.reshape(logits, &[self.classes])?)
    }
}

fn clean_ce<M: EmbeddingClassifier>(m: &M, w: &Tensor, label: usize) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(w).unwrap();
    let logits = m.logits_with(&mut g, m.params(), x).unwrap();
    let ce = cross_entropy(&mut g, logits, label).unwrap();
    g.scalar(ce)
}

fn small_classifier(seed: u64) -> Classifier {
    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        width: 8,
        ffn_width: 16,
        max_len: 8,
        vocab: 10,
        classes: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Classifier::new(cfg, &mut rng).unwrap();
    m.randomize(0.3, &mut rng);
    m
}

#[test]
fn zero_ball_leaves_input_and_doubles_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = small_classifier(1);
    let w = Tensor::normal(&[5, 8], 1.0, &mut rng);
    let cfg = AdvConfig::new(3, 0.1, 0.0).unwrap();
    let perturbed = pgd_perturb(&m, &w, 1, &cfg, &mut PassCounter::new()).unwrap();
    assert_eq!(perturbed, w);
    let loss = adversarial_step_loss(&m, &w, 1, &cfg, &mut PassCounter::new()).unwrap();
    let ce = clean_ce(&m, &w, 1);
    assert!((loss.total - 2.0 * ce).abs() < 1e-12);
}

#[test]
fn single_step_matches_analytic_sign_on_linear_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (l, d, c) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(2..5));
        let toy = LinearToy::new(d, c, &mut rng);
        let w = Tensor::normal(&[l, d], 1.0, &mut rng);
        let label = rng.gen_range(0..c);
        let eta = rng.gen_range(0.01..0.5);
        let eps = rng.gen_range(0.01..0.5);

        // p = softmax(sum_rows(W) A); dCE/dW[r, j] = sum_k A[j, k] (p_k - [k = y])
        let pooled: Vec<f64> = (0..d).map(|j| (0..l).map(|r| w.get2(r, j)).sum()).collect();
        let z: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| pooled[j] * toy.a().get2(j, k)).sum())
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        let grad_col: Vec<f64> = (0..d)
            .map(|j| {
                (0..c)
                    .map(|k| toy.a().get2(j, k) * (e[k] / total - f64::from(u8::from(k == label))))
                    .sum()
            })
            .collect();

        let cfg = AdvConfig::new(1, eta, eps).unwrap();
        let out = pgd_perturb(&toy, &w, label, &cfg, &mut PassCounter::new()).unwrap();
        let step = eta.min(eps);
        for r in 0..l {
            for j in 0..d {
                let expect = w.get2(r, j) + step * grad_col[j].signum();
                assert!((out.get2(r, j) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn perturbation_stays_in_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toy = LinearToy::new(6, 3, &mut rng);
    let m = small_classifier(3);
    for trial in 0..1000 {
        let w = Tensor::normal(&[4, if trial % 2 == 0 { 6 } else { 8 }], 1.0, &mut rng);
        let cfg = AdvConfig::new(rng.gen_range(1..4), rng.gen_range(0.01..1.0), rng.gen_range(0.0..0.5)).unwrap();
        let label = rng.gen_range(0..3);
        let out = if trial % 2 == 0 {
            pgd_perturb(&toy, &w, label, &cfg, &mut PassCounter::new()).unwrap()
        } else {
            pgd_perturb(&m, &w, label, &cfg, &mut PassCounter::new()).unwrap()
        };
        // W' - W is computed in floating point, so allow one rounding of W
        let slack = f64::EPSILON * 4.0;
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= cfg.epsilon * (1.0 + slack) + slack * b.abs());
        }
    }
}

#[test]
fn passes_are_one_plus_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = small_classifier(4);
    let w = Tensor::normal(&[5, 8], 1.0, &mut rng);
    for t in [1usize, 2, 3, 5] {
        let mut counter = PassCounter::new();
        counter.begin_step();
        adversarial_step_loss(&m, &w, 0, &AdvConfig::new(t, 0.05, 0.1).unwrap(), &mut counter).unwrap();
        let step = counter.end_step();
        assert_eq!((step.forwards, step.backwards), (1 + t as u64, 1 + t as u64));

        let mut counter = PassCounter::new();
        pgd_perturb(&m, &w, 0, &AdvConfig::new(t, 0.05, 0.1).unwrap(), &mut counter).unwrap();
        assert_eq!((counter.forwards(), counter.backwards()), (t as u64, t as u64));
    }
}

#[test]
fn ascent_raises_loss_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = small_classifier(5);
    let cfg = AdvConfig::new(3, 0.02, 0.05).unwrap();
    let (mut clean, mut adv, mut wins) = (0.0, 0.0, 0);
    let trials = 200;
    for _ in 0..trials {
        let w = Tensor::normal(&[5, 8], 1.0, &mut rng);
        let label = rng.gen_range(0..3);
        let loss = adversarial_step_loss(&m, &w, label, &cfg, &mut PassCounter::new()).unwrap();
        assert!((loss.clean_ce - clean_ce(&m, &w, label)).abs() < 1e-12);
        clean += loss.clean_ce;
        adv += loss.perturbed_ce;
        wins += usize::from(loss.perturbed_ce >= loss.clean_ce);
    }
    assert!(adv > clean, "{adv} <= {clean}");
    assert!(wins * 10 >= trials * 9, "{wins}/{trials}");
}

#[test]
fn gradients_sum_to_objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let toy = LinearToy::new(3, 2, &mut rng);
    let w = Tensor::normal(&[2, 3], 1.0, &mut rng);
    let cfg = AdvConfig::new(2, 0.1, 0.15).unwrap();
    let loss = adversarial_step_loss(&toy, &w, 1, &cfg, &mut PassCounter::new()).unwrap();
    let mut store = toy.params.clone();
    for g in &loss.gradients {
        store.accumulate_grads(g);
    }
    // with delta held fixed, d/dA [CE(W) + CE(W + delta)] by finite differences
    let perturbed: Vec<f64> = w.data().iter().zip(loss.deltas[0].data()).map(|(a, b)| a + b).collect();
    let wp = Tensor::new(vec![2, 3], perturbed).unwrap();
    let objective = |s: &ParamStore| {
        let t = LinearToy {
            params: s.clone(),
            classes: 2,
        };
        clean_ce(&t, &w, 1) + clean_ce(&t, &wp, 1)
    };
    let analytic = store.get(ParamId(0)).grad().unwrap().to_vec();
    for k in 0..6 {
        let mut plus = toy.params.clone();
        plus.get_mut(ParamId(0)).data_mut()[k] += 1e-6;
        let mut minus = toy.params.clone();
        minus.get_mut(ParamId(0)).data_mut()[k] -= 1e-6;
        let numeric = (objective(&plus) - objective(&minus)) / 2e-6;
        assert!((numeric - analytic[k]).abs() < 1e-6, "{numeric} vs {}", analytic[k]);
    }
}

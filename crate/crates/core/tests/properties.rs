use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcpg_core::attention::{
    policy_rollout, AttentionTrace, NoiseSource, PolicyKind, PolicyParams, RngNoise, SampleMode,
    StepNoise,
};
use dcpg_core::autodiff::{Graph, ParamStore, Tensor};
use dcpg_core::distributions::{action_to_mu, discrete_logprob, ActionSpace};
use dcpg_core::encoders::{gcn_reason, gru_step, region_affinity, GruParams};
use dcpg_core::losses::triplet_loss;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(0.01f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

/// Policy over `t` regions of width `d`, with its parameter store.
fn policy(d: usize, hidden: usize, seed: u64) -> (ParamStore, PolicyParams, ActionSpace) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = ActionSpace::new(10, 1.0).unwrap();
    let p = PolicyParams::new(&mut store, "p", d, hidden, &space, 1, &mut rng).unwrap();
    (store, p, space)
}

fn rollout(
    store: &ParamStore,
    p: &PolicyParams,
    space: &ActionSpace,
    feats: &Tensor,
    kind: PolicyKind,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
) -> (Graph, AttentionTrace) {
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let tr = policy_rollout(&mut g, store, f, p, space, kind, mode, noise).unwrap();
    (g, tr)
}

/// Repeats one fixed draw at every step.
struct Fixed(StepNoise);

impl NoiseSource for Fixed {
    fn draw(&mut self, categories: usize) -> StepNoise {
        StepNoise {
            gumbel: vec![self.0.gumbel[0]; categories],
            ..self.0.clone()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7)) {
        let mut g = Graph::new();
        let v = g.leaf(x);
        let s = g.softmax(v, 1).unwrap();
        let out = g.value(s).clone();
        for r in 0..4 {
            let row = out.row_slice(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(a in matrix(3, 4), b in matrix(4, 2)) {
        let grads = |which: u8| {
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let m = g.matmul(va, vb).unwrap();
            let s1 = g.sigmoid(m);
            let l1 = g.sum(s1);
            let t = g.tanh(va);
            let sq = g.square(t);
            let l2 = g.sum(sq);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap();
            let ga = g.grad(va).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; 12]);
            let gb = g.grad(vb).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; 8]);
            [ga, gb].concat()
        };
        let (sum, g1, g2) = (grads(0), grads(1), grads(2));
        for i in 0..sum.len() {
            prop_assert!((sum[i] - (g1[i] + g2[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_backward_is_repeatable(a in matrix(3, 3), b in matrix(3, 3)) {
        let run = || {
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let m = g.matmul(va, vb).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let l = g.mean(s);
            let sq = g.square(l);
            g.backward(sq).unwrap();
            (g.item(sq).to_bits(), g.grad(va).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn discrete_logprob_round_trips(p in simplex(6), i in 0usize..6) {
        let mut g = Graph::new();
        let probs = g.constant(Tensor::row(p.clone()));
        let lp = discrete_logprob(&mut g, probs, i).unwrap();
        let back = g.item(lp).exp();
        prop_assert!((back - p[i]).abs() <= 1e-15 * p[i].max(1.0) * 4.0);
    }

    #[test]
    fn action_to_mu_is_monotone_and_bounded(n in 1usize..300) {
        let mus: Vec<f64> = (0..=n).map(|i| action_to_mu(i, n).unwrap()).collect();
        prop_assert_eq!(mus[0], 0.5);
        prop_assert!(mus.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(mus[n] <= 1.0 / (1.0 + (-1.0f64).exp()));
        prop_assert!(action_to_mu(n + 1, n).is_err());
    }

    #[test]
    fn gcn_with_zero_weight_is_identity(f in matrix(5, 4), r in matrix(5, 5)) {
        let mut g = Graph::new();
        let (vf, vr) = (g.constant(f.clone()), g.constant(r));
        let w = g.constant(Tensor::zeros(&[4, 4]));
        let out = gcn_reason(&mut g, vf, vr, w).unwrap();
        prop_assert_eq!(g.value(out), &f);
    }

    #[test]
    fn tied_affinity_is_symmetric_psd(f in matrix(5, 4), w in matrix(4, 3), x in vec(-1.0f64..1.0, 5)) {
        let mut g = Graph::new();
        let (vf, vw) = (g.constant(f), g.constant(w));
        let a = region_affinity(&mut g, vf, vw, vw).unwrap();
        let a = g.value(a).clone();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!((a.at(i, j) - a.at(j, i)).abs() <= 1e-12);
            }
        }
        let quad: f64 = (0..5).flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * a.at(i, j) * x[j])
            .sum();
        prop_assert!(quad >= -1e-9);
    }

    #[test]
    fn gru_state_stays_bounded(
        x in vec(-5.0f64..5.0, 3),
        big in vec(-1e3f64..1e3, 3),
        h in vec(-0.999f64..0.999, 4),
        seed in 0u64..1000,
    ) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GruParams::new(&mut store, "gru", 3, 4, &mut rng);
        let step = |x: Vec<f64>| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g, &store);
            let (vx, vh) = (g.constant(Tensor::row(x)), g.constant(Tensor::row(h.clone())));
            let out = gru_step(&mut g, vx, vh, &vars).unwrap();
            g.value(out).data().to_vec()
        };
        prop_assert!(step(x).iter().all(|v| v.abs() < 1.0));
        // tanh rounds to exactly ±1 once saturated
        prop_assert!(step(big).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn episode_logprob_is_additive(feats in matrix(4, 3), seed in 0u64..1000) {
        let (store, p, space) = policy(3, 5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, tr) = rollout(&store, &p, &space, &feats, PolicyKind::Compound,
            SampleMode::Stochastic, &mut RngNoise(&mut rng));
        let steps: f64 = tr.steps.iter().flat_map(|s| &s.heads).map(|h| h.discrete_logprob).sum();
        let total = g.item(tr.discrete_logprob.unwrap());
        prop_assert!((total - steps).abs() <= 1e-12 * steps.abs().max(1.0));
        prop_assert!((tr.discrete_logprob_sum - steps).abs() <= 1e-12 * steps.abs().max(1.0));
    }

    #[test]
    fn deterministic_rollout_ignores_noise(feats in matrix(4, 3), seed in 0u64..1000, g0 in -2.0f64..2.0) {
        let (store, p, space) = policy(3, 5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, a) = rollout(&store, &p, &space, &feats, PolicyKind::Compound,
            SampleMode::Deterministic, &mut RngNoise(&mut rng));
        let mut fixed = Fixed(StepNoise { gumbel: vec![g0], uniform: 0.3, normal: 1.7 });
        let (_, b) = rollout(&store, &p, &space, &feats, PolicyKind::Compound,
            SampleMode::Deterministic, &mut fixed);
        prop_assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn attention_weights_lie_in_unit_interval(feats in matrix(6, 3), seed in 0u64..1000) {
        let (store, p, space) = policy(3, 5, seed);
        for kind in [PolicyKind::Compound, PolicyKind::DiscreteOnly, PolicyKind::ContinuousOnly] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, tr) = rollout(&store, &p, &space, &feats, kind,
                SampleMode::Stochastic, &mut RngNoise(&mut rng));
            prop_assert!(tr.weights().iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }

    #[test]
    fn triplet_is_shift_invariant_and_non_negative(s in matrix(5, 5), c in -3.0f64..3.0) {
        let value = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let l = triplet_loss(&mut g, v, 0.2).unwrap();
            g.item(l)
        };
        let shifted = Tensor::matrix(5, 5, s.data().iter().map(|x| x + c).collect()).unwrap();
        let (a, b) = (value(s), value(shifted));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

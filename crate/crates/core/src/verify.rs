//! Self-contained property suites run by the `verify` command and the
//! acceptance tests. Each check compares against an independent oracle:
//! central differences, Monte-Carlo frequencies, quadrature or brute-force
//! enumeration.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, NoiseSource, PolicyKind, RngNoise, SampleMode, StepNoise};
use crate::autodiff::{grad_check, Adam, Graph, ParamStore, Tensor, Var};
use crate::distributions::{
    action_to_mu, argmax, categorical_from_uniform, categorical_sample, discrete_logprob,
    gumbel_noise, gumbel_softmax_with_noise, normal_log_density, normal_logprob,
    normal_sample_with_eps, softmax, standard_normal, straight_through,
};
use crate::encoders::{gcn_reason, gru_scan, region_affinity, GruParams};
use crate::error::{Error, Result};
use crate::harness::dataset::{generate_dataset, DatasetSpec, Instance};
use crate::harness::model::{DataDims, Model};
use crate::harness::train::batch_objective;
use crate::harness::ModelConfig;
use crate::losses::{
    discrete_pg_loss, instance_loss, text_decoding_loss, triplet_loss, DecoderParams, PgNorm,
};
use crate::rewards::{
    average_precision, pg_baseline, rank_of, recall_at_1, Direction, SimilarityMatrix,
};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const BANDIT_REWARDS: [f64; 3] = [1.0, 0.5, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradcheck,
    Distributions,
    Metrics,
    Bandit,
    Baseline,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Gradcheck,
        Suite::Distributions,
        Suite::Metrics,
        Suite::Bandit,
        Suite::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Distributions => "distributions",
            Suite::Metrics => "metrics",
            Suite::Bandit => "bandit",
            Suite::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::Config(format!(
                    "unknown suite `{s}`; available suites: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity (error, deviation, probability, ...).
    pub value: f64,
    pub detail: String,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub millis: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<14} {:<44} {:>12.3e} {:>9.1} ms  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite.name(),
                c.name,
                c.value,
                c.millis,
                c.detail
            ));
        }
        out
    }
}

struct Runner {
    checks: Vec<Check>,
}

impl Runner {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, f64, String)>) {
        let t = Instant::now();
        let (passed, value, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, f64::NAN, format!("error: {e}")),
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            value,
            detail,
            millis: t.elapsed().as_secs_f64() * 1e3,
        });
    }
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    let t = Instant::now();
    let mut r = Runner { checks: Vec::new() };
    match suite {
        Suite::Gradcheck => gradcheck_suite(&mut r),
        Suite::Distributions => distribution_suite(&mut r),
        Suite::Metrics => metric_suite(&mut r),
        Suite::Bandit => bandit_suite(&mut r),
        Suite::Baseline => baseline_suite(&mut r),
    }
    SuiteReport {
        suite,
        checks: r.checks,
        millis: t.elapsed().as_secs_f64() * 1e3,
    }
}

// ---------------------------------------------------------------- gradcheck

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn rand_t(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("valid shape")
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`, so no output symmetry hides
/// a wrong gradient.
fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let (r, c) = g.value(out).dims();
    let w = g.constant(rand_t(r, c, -1.0, 1.0, 977 + (r * 31 + c) as u64));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn unary(f: fn(&mut Graph, Var) -> Result<Var>) -> Builder {
    Box::new(move |g, v| {
        let o = f(g, v[0])?;
        probe(g, o)
    })
}

fn binary(f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Builder {
    Box::new(move |g, v| {
        let o = f(g, v[0], v[1])?;
        probe(g, o)
    })
}

fn gradcheck_cases() -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let a = || rand_t(3, 4, -1.0, 1.0, 1);
    let b = || rand_t(3, 4, -1.0, 1.0, 2);
    let pos = || rand_t(3, 4, 0.5, 2.0, 3);
    vec![
        ("matmul", vec![a(), rand_t(4, 2, -1.0, 1.0, 4)], binary(|g, x, y| g.matmul(x, y))),
        ("add", vec![a(), b()], binary(|g, x, y| g.add(x, y))),
        ("add (row broadcast)", vec![a(), rand_t(1, 4, -1.0, 1.0, 5)], binary(|g, x, y| g.add(x, y))),
        ("sub", vec![a(), b()], binary(|g, x, y| g.sub(x, y))),
        ("mul", vec![a(), b()], binary(|g, x, y| g.mul(x, y))),
        ("mul (column broadcast)", vec![a(), rand_t(3, 1, -1.0, 1.0, 6)], binary(|g, x, y| g.mul(x, y))),
        ("div", vec![a(), pos()], binary(|g, x, y| g.div(x, y))),
        ("scale", vec![a()], unary(|g, x| Ok(g.scale(x, -1.7)))),
        ("add_scalar", vec![a()], unary(|g, x| Ok(g.add_scalar(x, 0.3)))),
        ("sigmoid", vec![a()], unary(|g, x| Ok(g.sigmoid(x)))),
        ("tanh", vec![a()], unary(|g, x| Ok(g.tanh(x)))),
        ("relu", vec![a()], unary(|g, x| Ok(g.relu(x)))),
        ("exp", vec![a()], unary(|g, x| Ok(g.exp(x)))),
        ("log", vec![pos()], unary(|g, x| g.log(x))),
        ("square", vec![a()], unary(|g, x| Ok(g.square(x)))),
        ("softplus", vec![a()], unary(|g, x| Ok(g.softplus(x)))),
        ("sum", vec![a()], Box::new(|g: &mut Graph, v: &[Var]| {
            let s = g.sum(v[0]);
            Ok(g.scale(s, 0.7))
        })),
        ("mean", vec![a()], Box::new(|g: &mut Graph, v: &[Var]| {
            let s = g.mean(v[0]);
            Ok(g.square(s))
        })),
        ("sum_axis 0", vec![a()], unary(|g, x| g.sum_axis(x, 0))),
        ("mean_axis 1", vec![a()], unary(|g, x| g.mean_axis(x, 1))),
        ("concat rows", vec![a(), b()], binary(|g, x, y| g.concat(&[x, y], 0))),
        ("concat cols", vec![a(), b()], binary(|g, x, y| g.concat(&[x, y], 1))),
        ("select_rows", vec![a()], unary(|g, x| g.select_rows(x, &[2, 0, 2]))),
        ("gather", vec![a()], unary(|g, x| g.gather(x, &[(0, 1), (2, 3), (0, 1)]))),
        ("transpose", vec![a()], unary(|g, x| Ok(g.transpose(x)))),
        ("softmax rows", vec![a()], unary(|g, x| g.softmax(x, 1))),
        ("softmax columns", vec![a()], unary(|g, x| g.softmax(x, 0))),
        ("log_softmax", vec![a()], unary(|g, x| g.log_softmax(x, 1))),
        ("normalize_rows", vec![a()], unary(|g, x| g.normalize_rows(x))),
        ("cosine_similarity", vec![a(), b()], binary(|g, x, y| g.cosine_similarity(x, y))),
        ("straight_through", vec![rand_t(1, 5, -1.0, 1.0, 7)], unary(|g, x| {
            let p = g.softmax_rows(x);
            straight_through(g, 3, p, 4)
        })),
        ("normal_logprob", vec![
            rand_t(1, 1, -1.0, 1.0, 8),
            rand_t(1, 1, -1.0, 1.0, 9),
            rand_t(1, 1, 0.5, 1.5, 10),
        ], Box::new(|g: &mut Graph, v: &[Var]| normal_logprob(g, v[0], v[1], v[2]))),
        ("normal reparameterized sample", vec![
            rand_t(1, 1, -1.0, 1.0, 11),
            rand_t(1, 1, 0.5, 1.5, 12),
        ], Box::new(|g: &mut Graph, v: &[Var]| {
            let x = normal_sample_with_eps(g, v[0], v[1], 0.83)?;
            Ok(g.square(x))
        })),
        ("gumbel-softmax + discrete logprob", vec![rand_t(1, 6, -1.0, 1.0, 13)], Box::new(|g: &mut Graph, v: &[Var]| {
            let noise = gumbel_noise(6, &mut ChaCha8Rng::seed_from_u64(14));
            let p = gumbel_softmax_with_noise(g, v[0], &noise, 0.7)?;
            discrete_logprob(g, p, 2)
        })),
        ("gcn reasoning", vec![
            rand_t(4, 3, -1.0, 1.0, 15),
            rand_t(3, 2, -1.0, 1.0, 16),
            rand_t(3, 2, -1.0, 1.0, 17),
            rand_t(3, 3, -1.0, 1.0, 18),
        ], Box::new(|g: &mut Graph, v: &[Var]| {
            let r = region_affinity(g, v[0], v[1], v[2])?;
            let o = gcn_reason(g, v[0], r, v[3])?;
            probe(g, o)
        })),
        ("gru scan", {
            let mut store = ParamStore::new();
            let p = GruParams::new(&mut store, "g", 3, 4, &mut ChaCha8Rng::seed_from_u64(19));
            let mut ts = vec![rand_t(5, 3, -1.0, 1.0, 20)];
            ts.extend(p.ids().map(|id| {
                let t = store.value(id);
                let (r, c) = t.dims();
                rand_t(r, c, -0.8, 0.8, 21 + id_hash(r, c))
            }));
            ts
        }, Box::new(|g: &mut Graph, v: &[Var]| {
            let vars = crate::encoders::GruVars::from_slice(&v[1..]);
            let hs = gru_scan(g, v[0], &vars)?;
            let last = *hs.last().expect("rows");
            probe(g, last)
        })),
        ("triplet loss", vec![rand_t(5, 5, -0.5, 0.5, 22)], Box::new(|g: &mut Graph, v: &[Var]| triplet_loss(g, v[0], 0.2))),
        ("instance loss", vec![rand_t(4, 5, -1.0, 1.0, 23), rand_t(5, 6, -1.0, 1.0, 24)], Box::new(|g: &mut Graph, v: &[Var]| instance_loss(g, v[0], &[1, 5, 0, 1], v[1]))),
        ("discrete pg loss", vec![rand_t(2, 4, -1.0, 1.0, 25)], Box::new(|g: &mut Graph, v: &[Var]| {
            let p = g.softmax_rows(v[0]);
            let lp0 = discrete_logprob(g, p, 1)?;
            let q = g.softmax_rows(v[0]);
            let r1 = g.row(q, 1)?;
            let lp1 = discrete_logprob(g, r1, 3)?;
            let mk = |g: &Graph, lp: Var| AttentionTrace {
                steps: vec![],
                discrete_logprob_sum: g.item(lp),
                continuous_logprob_sum: 0.0,
                mode: SampleMode::Stochastic,
                kind: PolicyKind::DiscreteOnly,
                att: vec![],
                discrete_logprob: Some(lp),
                continuous_logprob: None,
            };
            let (t0, t1) = (mk(g, lp0), mk(g, lp1));
            discrete_pg_loss(g, &[&t0, &t1], &[0.6, -0.4], PgNorm::Mean)
        })),
        ("text decoding loss", decoder_inputs(), Box::new(decoder_builder)),
    ]
}

fn id_hash(r: usize, c: usize) -> u64 {
    (r * 7 + c * 13) as u64
}

fn decoder_fixture() -> (ParamStore, DecoderParams) {
    let mut store = ParamStore::new();
    let d = DecoderParams::new(&mut store, 5, 3, 4, 3, &mut ChaCha8Rng::seed_from_u64(26));
    (store, d)
}

fn decoder_inputs() -> Vec<Tensor> {
    let (store, _) = decoder_fixture();
    let mut ts: Vec<Tensor> = store
        .ids()
        .map(|id| {
            let (r, c) = store.value(id).dims();
            rand_t(r, c, -0.7, 0.7, 27 + id_hash(r, c))
        })
        .collect();
    ts.push(rand_t(1, 4, -1.0, 1.0, 28));
    ts
}

fn decoder_builder(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let (store, d) = decoder_fixture();
    for (id, &var) in store.ids().zip(v) {
        g.bind(id, var);
    }
    let vars = d.bind(g, &store);
    let tokens = crate::encoders::TokenSeq::new(vec![4, 0, 2, 2, 1])?;
    text_decoding_loss(g, v[v.len() - 1], &tokens, &vars)
}

/// Tiny model and batch for the end-to-end check.
pub fn composite_fixture() -> Result<(Model, Vec<Instance>)> {
    let spec = DatasetSpec {
        classes: 3,
        regions: 3,
        tokens: 3,
        dim: 4,
        vocab: 5,
        train_per_class: 1,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec)?;
    let cfg = ModelConfig {
        word_dim: 3,
        hidden: 3,
        embed: 4,
        actions: 4,
        lambda: 2.0,
        ..ModelConfig::default()
    };
    let model = Model::new(&cfg, DataDims::from(&spec))?;
    Ok((model, ds.train))
}

/// Zeroes the Gaussian draw so the detached continuous sample equals μ.
struct MeanSample<N>(N);

impl<N: NoiseSource> NoiseSource for MeanSample<N> {
    fn draw(&mut self, categories: usize) -> StepNoise {
        StepNoise {
            normal: 0.0,
            ..self.0.draw(categories)
        }
    }
}

/// Finite-difference check of the full rollout → fuse → objective graph
/// with respect to every model parameter.
pub fn composite_grad_check() -> Result<f64> {
    let (model, batch) = composite_fixture()?;
    let ids: Vec<_> = model.store.ids().collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let items: Vec<&Instance> = batch.iter().collect();
    grad_check(
        |g, v| {
            for (&id, &var) in ids.iter().zip(v) {
                g.bind(id, var);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            let (total, _) = batch_objective(&model, g, &items, &mut MeanSample(RngNoise(&mut rng)))?;
            total.ok_or_else(|| Error::Invalid("objective has no terms".into()))
        },
        &inputs,
        GRAD_EPS,
    )
}

fn gradcheck_suite(r: &mut Runner) {
    for (name, inputs, f) in gradcheck_cases() {
        r.check(name, || {
            let err = grad_check(|g, v| f(g, v), &inputs, GRAD_EPS)?;
            Ok((err < GRAD_TOL, err, format!("max rel err < {GRAD_TOL:e}")))
        });
    }
    r.check("composite rollout -> fuse -> objective", || {
        let err = composite_grad_check()?;
        Ok((err < GRAD_TOL, err, format!("max rel err < {GRAD_TOL:e}")))
    });
}

// ------------------------------------------------------------ distributions

const DRAWS: usize = 100_000;

fn max_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn distribution_suite(r: &mut Runner) {
    for (i, logits) in [vec![0.0, 0.0, 0.0], vec![0.5, -0.3, 1.2, 0.0]].into_iter().enumerate() {
        r.check(&format!("gumbel-max frequencies, case {i}"), || {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut counts = vec![0.0; logits.len()];
            for _ in 0..DRAWS {
                let g = gumbel_noise(logits.len(), &mut rng);
                let z: Vec<f64> = logits.iter().zip(&g).map(|(l, g)| l + g).collect();
                counts[argmax(&z)] += 1.0;
            }
            let freq: Vec<f64> = counts.iter().map(|c| c / DRAWS as f64).collect();
            let dev = max_abs_dev(&freq, &softmax(&logits));
            Ok((dev <= 0.01, dev, "max |freq - softmax| <= 0.01".into()))
        });
    }
    r.check("categorical [0.25, 0.75]", || {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut ones = 0usize;
        for _ in 0..DRAWS {
            ones += categorical_sample(&[0.25, 0.75], &mut rng)?;
        }
        let dev = (ones as f64 / DRAWS as f64 - 0.75).abs();
        Ok((dev <= 0.01, dev, "|freq - 0.75| <= 0.01".into()))
    });
    r.check("categorical uniform over 100", || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let p = vec![0.01; 100];
        let mut counts = vec![0.0; 100];
        for _ in 0..DRAWS {
            counts[categorical_sample(&p, &mut rng)?] += 1.0;
        }
        let freq: Vec<f64> = counts.iter().map(|c| c / DRAWS as f64).collect();
        let dev = max_abs_dev(&freq, &p);
        Ok((dev <= 0.003, dev, "max |freq - 0.01| <= 0.003".into()))
    });
    r.check("categorical inverse-cdf edges", || {
        let ok = categorical_from_uniform(&[1.0, 0.0, 0.0], 0.999_999)? == 0
            && categorical_from_uniform(&[0.0, 0.0, 1.0], 0.0)? == 2
            && categorical_from_uniform(&[0.5, -0.1, 0.6], 0.3).is_err();
        Ok((ok, 0.0, "degenerate and invalid simplices".into()))
    });
    r.check("normal density integrates to 1", || {
        let mut worst = 0.0f64;
        for &(mu, sigma) in &[(0.0, 1.0), (0.62, 0.05), (-3.0, 2.5), (0.7, 1e-3)] {
            let n = 40_000;
            let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
            let h = (hi - lo) / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let x = lo + h * i as f64;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                s += w * normal_log_density(x, mu, sigma)?.exp();
            }
            worst = worst.max((s * h - 1.0).abs());
        }
        Ok((worst <= 1e-6, worst, "|∫ f - 1| <= 1e-6 by trapezoid over μ±8σ".into()))
    });
    r.check("action_to_mu closed forms", || {
        let e = 1.0 / (1.0 + (-1.0f64).exp());
        let lo = action_to_mu(0, 100)?;
        let hi = action_to_mu(100, 100)?;
        let mid = action_to_mu(50, 100)?;
        let ok = lo == 0.5
            && hi == e
            && (mid - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15
            && action_to_mu(101, 100).is_err();
        let dev = (hi - 0.7311).abs();
        Ok((ok, dev, format!("mu(0) = {lo}, mu(100) = {hi:.6}")))
    });
    r.check("action_to_mu strictly monotone", || {
        let mus = (0..=100).map(|i| action_to_mu(i, 100)).collect::<Result<Vec<_>>>()?;
        let ok = mus.windows(2).all(|w| w[1] > w[0]) && mus[0] > 0.0;
        Ok((ok, mus[100] - mus[0], "range".into()))
    });
    r.check("normal sample moments", || {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let xs: Vec<f64> = (0..DRAWS).map(|_| standard_normal(&mut rng)).collect();
        let m = xs.iter().sum::<f64>() / DRAWS as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / DRAWS as f64;
        let ok = m.abs() <= 0.02 && (v - 1.0).abs() <= 0.03;
        Ok((ok, m.abs().max((v - 1.0).abs()), format!("mean {m:.4}, var {v:.4}")))
    });
    r.check("reparameterization derivatives", || {
        let eps = -0.37;
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::scalar(0.6));
        let s = g.leaf(Tensor::scalar(0.2));
        let x = normal_sample_with_eps(&mut g, mu, s, eps)?;
        g.backward(x)?;
        let dmu = g.grad(mu).map_or(f64::NAN, |v| v[0]);
        let ds = g.grad(s).map_or(f64::NAN, |v| v[0]);
        let dev = (dmu - 1.0).abs().max((ds - eps).abs());
        Ok((dev < 1e-15, dev, "dx/dμ = 1, dx/dσ = ε".into()))
    });
}

// ------------------------------------------------------------------ metrics

fn brute_rank(scores: &[f64], relevant: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // descending score, ties by index
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&i| i == relevant).expect("present") + 1
}

/// General average precision over the ranked list with one relevant item.
fn brute_ap(scores: &[f64], relevant: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0.0;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if i == relevant {
            hits += 1.0;
            total += hits / (k + 1) as f64;
        }
    }
    total / 1.0
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Checks one score vector in both directions through a similarity matrix
/// whose query row / column carries `scores`.
fn metric_case(scores: &[f64]) -> Result<usize> {
    let n = scores.len();
    let mut mismatches = 0;
    for relevant in 0..n {
        let want_rank = brute_rank(scores, relevant);
        let want_r1 = if want_rank == 1 { 1.0 } else { 0.0 };
        let want_ap = brute_ap(scores, relevant);
        let mut row = vec![0.0; n * n];
        let mut col = vec![0.0; n * n];
        for j in 0..n {
            row[relevant * n + j] = scores[j];
            col[j * n + relevant] = scores[j];
        }
        let sr = SimilarityMatrix::new(n, row)?;
        let sc = SimilarityMatrix::new(n, col)?;
        let got = [
            (recall_at_1(&sr, relevant, Direction::ImageToText), average_precision(&sr, relevant, Direction::ImageToText)),
            (recall_at_1(&sc, relevant, Direction::TextToImage), average_precision(&sc, relevant, Direction::TextToImage)),
        ];
        for (r1, ap) in got {
            if r1 != want_r1 || ap != want_ap || rank_of(scores, relevant) != want_rank {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

fn metric_suite(r: &mut Runner) {
    r.check("R@1 and AP over every strict ranking, n <= 6", || {
        let mut cases = 0;
        let mut bad = 0;
        for n in 1..=6 {
            for p in permutations(n) {
                let scores: Vec<f64> = p.iter().map(|&x| x as f64 * 0.1).collect();
                bad += metric_case(&scores)?;
                cases += 1;
            }
        }
        Ok((bad == 0, bad as f64, format!("{cases} rankings, {bad} mismatches")))
    });
    r.check("R@1 and AP with tied scores, n <= 6", || {
        let mut cases = 0;
        let mut bad = 0;
        for n in 1..=6u32 {
            for code in 0..3usize.pow(n) {
                let mut c = code;
                let scores: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = (c % 3) as f64;
                        c /= 3;
                        v
                    })
                    .collect();
                bad += metric_case(&scores)?;
                cases += 1;
            }
        }
        Ok((bad == 0, bad as f64, format!("{cases} score vectors, {bad} mismatches")))
    });
}

// ------------------------------------------------------------------- bandit

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Marginal arm probabilities `P_a = E_g[softmax((l + g)/τ)_a]` of the
/// relaxed-then-categorical draw, and their Jacobian `∂P_a/∂l_j`, by
/// tensor-product quadrature over the Gumbel quantiles of three arms.
pub fn bandit_marginals(logits: &[f64; 3], tau: f64, nodes: usize) -> ([f64; 3], [[f64; 3]; 3]) {
    let (x, w) = gauss_legendre(nodes);
    let g: Vec<f64> = x.iter().map(|u| -(-u.ln()).ln()).collect();
    let mut p = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for i in 0..nodes {
        for j in 0..nodes {
            for k in 0..nodes {
                let wt = w[i] * w[j] * w[k];
                let z = [
                    (logits[0] + g[i]) / tau,
                    (logits[1] + g[j]) / tau,
                    (logits[2] + g[k]) / tau,
                ];
                let y = softmax(&z);
                for a in 0..3 {
                    p[a] += wt * y[a];
                    for b in 0..3 {
                        let d = if a == b { 1.0 } else { 0.0 };
                        jac[a][b] += wt * y[a] * (d - y[b]) / tau;
                    }
                }
            }
        }
    }
    (p, jac)
}

/// Gradient of `J = Σ_a P_a R_a` with respect to the logits.
pub fn bandit_analytic_gradient(logits: &[f64; 3]) -> [f64; 3] {
    let (_, jac) = bandit_marginals(logits, 1.0, 96);
    let mut grad = [0.0; 3];
    for (a, row) in jac.iter().enumerate() {
        for b in 0..3 {
            grad[b] += BANDIT_REWARDS[a] * row[b];
        }
    }
    grad
}

fn bandit_trace(g: &mut Graph, logits: Var, rng: &mut ChaCha8Rng) -> Result<(AttentionTrace, usize)> {
    let noise = gumbel_noise(3, rng);
    let probs = gumbel_softmax_with_noise(g, logits, &noise, 1.0)?;
    let soft = g.value(probs).data().to_vec();
    let arm = categorical_from_uniform(&soft, rng.random())?;
    let lp = discrete_logprob(g, probs, arm)?;
    let trace = AttentionTrace {
        steps: vec![],
        discrete_logprob_sum: g.item(lp),
        continuous_logprob_sum: 0.0,
        mode: SampleMode::Stochastic,
        kind: PolicyKind::DiscreteOnly,
        att: vec![],
        discrete_logprob: Some(lp),
        continuous_logprob: None,
    };
    Ok((trace, arm))
}

/// Mean over `samples` one-draw estimates of `-∇ loss`, where the loss is
/// the discrete PG loss with advantage `R - baseline`.
pub fn bandit_gradient_estimate(logits: &[f64; 3], samples: usize, baseline: f64, seed: u64) -> Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [0.0; 3];
    let mut g = Graph::new();
    for _ in 0..samples {
        g.clear();
        let l = g.leaf(Tensor::row(logits.to_vec()));
        let (trace, arm) = bandit_trace(&mut g, l, &mut rng)?;
        let adv = BANDIT_REWARDS[arm] - baseline;
        let loss = discrete_pg_loss(&mut g, &[&trace], &[adv], PgNorm::Mean)?;
        g.backward(loss)?;
        let grad = g.grad(l).expect("tracked leaf");
        for j in 0..3 {
            acc[j] -= grad[j];
        }
    }
    Ok(acc.map(|a| a / samples as f64))
}

/// Trains bandit logits with the discrete PG loss and leave-one-out batch
/// baseline; returns the best-arm marginal after each step.
pub fn bandit_optimize(steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let id = store.add("logits", Tensor::row(vec![0.0; 3]));
    let adam = Adam::new(lr);
    let mut best = Vec::with_capacity(steps);
    let mut g = Graph::new();
    for _ in 0..steps {
        g.clear();
        let l = g.param(&store, id);
        let mut traces = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (t, arm) = bandit_trace(&mut g, l, &mut rng)?;
            traces.push(t);
            rewards.push(BANDIT_REWARDS[arm]);
        }
        let (_, adv) = pg_baseline(&rewards, 1.0)?;
        let refs: Vec<&AttentionTrace> = traces.iter().collect();
        let loss = discrete_pg_loss(&mut g, &refs, &adv, PgNorm::Mean)?;
        store.zero_grad();
        g.backward(loss)?;
        g.accumulate_into(&mut store)?;
        adam.step(&mut store)?;
        let v = store.value(id).data();
        let (p, _) = bandit_marginals(&[v[0], v[1], v[2]], 1.0, 24);
        best.push(p[0]);
    }
    Ok(best)
}

pub const BANDIT_LOGITS: [f64; 3] = [0.0, 0.5, 1.0];

fn bandit_suite(r: &mut Runner) {
    r.check("pg gradient mean vs analytic, 100k samples", || {
        let want = bandit_analytic_gradient(&BANDIT_LOGITS);
        let got = bandit_gradient_estimate(&BANDIT_LOGITS, DRAWS, 0.5, 200)?;
        let rel = (0..3)
            .map(|j| (got[j] - want[j]).abs() / want[j].abs())
            .fold(0.0, f64::max);
        Ok((
            rel <= 0.05,
            rel,
            format!("estimate {got:.4?} analytic {want:.4?}"),
        ))
    });
    r.check("best arm probability > 0.95 within 2000 steps", || {
        let curve = bandit_optimize(2000, 16, 0.05, 201)?;
        let hit = curve.iter().position(|&p| p > 0.95);
        let last = *curve.last().expect("steps");
        Ok((
            hit.is_some() && last > 0.95,
            last,
            match hit {
                Some(s) => format!("first > 0.95 at step {}", s + 1),
                None => "never exceeded 0.95".into(),
            },
        ))
    });
}

// ----------------------------------------------------------------- baseline

fn baseline_suite(r: &mut Runner) {
    r.check("β = 1 advantages sum to zero", || {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let k = rng.random_range(2..=128);
            let rewards: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=2.0)).collect();
            let (_, adv) = pg_baseline(&rewards, 1.0)?;
            worst = worst.max(adv.iter().sum::<f64>().abs());
        }
        Ok((worst <= 1e-12, worst, "10000 random batches, |Σ A| <= 1e-12".into()))
    });
    r.check("baselines of [1, 2, 3]", || {
        let (b, _) = pg_baseline(&[1.0, 2.0, 3.0], 0.5)?;
        Ok((b == [2.5, 2.0, 1.5], 0.0, format!("{b:?}")))
    });
}

//! Sampling and log-density pieces of the compound action law: a relaxed
//! categorical over discrete action labels whose draw fixes the mean of a
//! Normal, from which the continuous action is sampled.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{invalid, Error, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Discrete action labels `0..=n` with Gumbel-softmax temperature.
///
/// `n` is the divisor in the label-to-mean map, so there are `n + 1` logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    n: usize,
    temperature: f64,
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self {
            n: 100,
            temperature: 1.0,
        }
    }
}

impl ActionSpace {
    pub fn new(n: usize, temperature: f64) -> Result<Self> {
        if n < 2 {
            return invalid(format!("action space needs n >= 2, got {n}"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return invalid(format!("temperature must be positive, got {temperature}"));
        }
        Ok(Self { n, temperature })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Number of logits: one per label in `0..=n`.
    pub fn categories(&self) -> usize {
        self.n + 1
    }

    /// `label / n` for every label; the straight-through coefficients.
    pub fn label_fractions(&self) -> Vec<f64> {
        (0..=self.n).map(|i| i as f64 / self.n as f64).collect()
    }
}

/// One draw of the compound distribution at a single timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompoundSample {
    pub soft_probs: Vec<f64>,
    pub hard_index: usize,
    pub discrete_logprob: f64,
    pub mu: f64,
    pub sigma: f64,
    pub raw_sample: f64,
    pub att: f64,
    pub continuous_logprob: f64,
}

pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..k).map(|_| gumbel.sample(rng)).collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gumbel_softmax: temperature must be positive, got {t}"
        )))
    }
}

/// `softmax((logits + g) / τ)` with `g` the supplied Gumbel noise.
pub fn gumbel_softmax_with_noise(
    g: &mut Graph,
    logits: Var,
    noise: &[f64],
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let shape = g.shape(logits).to_vec();
    let noise = g.constant(crate::autodiff::Tensor::new(shape, noise.to_vec())?);
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    Ok(g.softmax_rows(scaled))
}

/// Relaxed categorical draw on the tape.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    let noise = gumbel_noise(g.value(logits).len(), rng);
    gumbel_softmax_with_noise(g, logits, &noise, temperature)
}

/// Tape-free Gumbel-softmax on plain values.
pub fn gumbel_softmax_values<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let noise = gumbel_noise(logits.len(), rng);
    let z: Vec<f64> = logits
        .iter()
        .zip(&noise)
        .map(|(l, n)| (l + n) / temperature)
        .collect();
    Ok(softmax(&z))
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return invalid("categorical: empty probability vector");
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return invalid(format!("categorical: invalid probability {p}"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return invalid(format!("categorical: probabilities sum to {s}"));
    }
    Ok(())
}

/// Draws index `i` with probability `probs[i]` from a single uniform `u`.
pub fn categorical_from_uniform(probs: &[f64], u: f64) -> Result<usize> {
    check_simplex(probs)?;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

pub fn categorical_sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let u: f64 = rng.random();
    categorical_from_uniform(probs, u)
}

/// `log probs[index]` on the tape.
pub fn discrete_logprob(g: &mut Graph, probs: Var, index: usize) -> Result<Var> {
    let t = g.value(probs);
    if index >= t.len() {
        return invalid(format!(
            "discrete_logprob: index {index} out of range for {} categories",
            t.len()
        ));
    }
    if !(t.data()[index] > 0.0) {
        return Err(Error::Domain {
            op: "discrete_logprob",
            detail: format!("probability at index {index} is zero (log would be -inf)"),
        });
    }
    let picked = g.gather(probs, &[(0, index)])?;
    g.log(picked)
}

/// `logistic(index / n)`.
pub fn action_to_mu(index: usize, n: usize) -> Result<f64> {
    if n == 0 || index > n {
        return invalid(format!("action_to_mu: index {index} outside 0..={n}"));
    }
    Ok(sigmoid(index as f64 / n as f64))
}

/// Forward value `hard_index / n`; gradient as if it were
/// `Σ_i (i / n) · soft_probs[i]`.
pub fn straight_through(g: &mut Graph, hard_index: usize, soft_probs: Var, n: usize) -> Result<Var> {
    let k = g.value(soft_probs).len();
    if hard_index >= k {
        return invalid(format!(
            "straight_through: index {hard_index} out of range for {k} categories"
        ));
    }
    let coeffs: Vec<f64> = (0..k).map(|i| i as f64 / n as f64).collect();
    g.straight_through(soft_probs, &coeffs, hard_index as f64 / n as f64)
}

fn check_sigma(op: &'static str, sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: format!("sigma must be positive, got {sigma}"),
        })
    }
}

/// `mu + sigma · eps` on the tape for a given standard-normal `eps`.
pub fn normal_sample_with_eps(g: &mut Graph, mu: Var, sigma: Var, eps: f64) -> Result<Var> {
    if let Some(&s) = g.value(sigma).data().iter().find(|s| !(**s > 0.0)) {
        check_sigma("normal_sample", s)?;
    }
    let noise = g.scale(sigma, eps);
    g.add(mu, noise)
}

/// Reparameterized Normal draw; returns the sample and the `eps` used.
pub fn normal_sample_reparam<R: Rng + ?Sized>(
    g: &mut Graph,
    mu: Var,
    sigma: Var,
    rng: &mut R,
) -> Result<(Var, f64)> {
    let eps = standard_normal(rng);
    Ok((normal_sample_with_eps(g, mu, sigma, eps)?, eps))
}

/// Univariate Normal log-density on the tape.
pub fn normal_logprob(g: &mut Graph, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    for &s in g.value(sigma).data() {
        check_sigma("normal_logprob", s)?;
    }
    let diff = g.sub(x, mu)?;
    let sq = g.square(diff);
    let var = g.square(sigma);
    let var2 = g.scale(var, 2.0);
    let quad = g.div(sq, var2)?;
    let log_sigma = g.log(sigma)?;
    let norm = g.add(log_sigma, quad)?;
    let neg = g.neg(norm);
    Ok(g.add_scalar(neg, -HALF_LN_2PI))
}

/// Plain-value Normal log-density.
pub fn normal_log_density(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma("normal_logprob", sigma)?;
    let z = (x - mu) / sigma;
    Ok(-HALF_LN_2PI - sigma.ln() - 0.5 * z * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn action_space_validation() {
        assert!(ActionSpace::new(1, 1.0).is_err());
        assert!(ActionSpace::new(100, 0.0).is_err());
        let s = ActionSpace::default();
        assert_eq!((s.n(), s.categories(), s.temperature()), (100, 101, 1.0));
    }

    #[test]
    fn dominated_logits_are_near_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let y = gumbel_softmax_values(&[10.0, -10.0, -10.0], 1.0, &mut rng).unwrap();
            assert!(y[0] > 0.99, "{y:?}");
        }
    }

    #[test]
    fn gumbel_softmax_is_seed_deterministic() {
        let a = gumbel_softmax_values(&[0.3, -1.0, 2.0], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = gumbel_softmax_values(&[0.3, -1.0, 2.0], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.unwrap(), b.unwrap());
        assert!(gumbel_softmax_values(&[0.0], 0.0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn categorical_degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(categorical_sample(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(categorical_sample(&[0.5, -0.1, 0.6], &mut rng).is_err());
        assert!(categorical_sample(&[0.5, 0.4], &mut rng).is_err());
    }

    #[test]
    fn discrete_logprob_values() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![1.0, 0.0, 0.0]));
        let lp = discrete_logprob(&mut g, p, 0).unwrap();
        assert_eq!(g.item(lp), 0.0);
        assert!(matches!(
            discrete_logprob(&mut g, p, 1),
            Err(Error::Domain { .. })
        ));
        let half = g.leaf(Tensor::row(vec![0.5, 0.5]));
        let lp = discrete_logprob(&mut g, half, 1).unwrap();
        assert!((g.item(lp) - 0.5f64.ln()).abs() < 1e-15);
        let uni = g.leaf(Tensor::row(vec![0.01; 100]));
        let lp = discrete_logprob(&mut g, uni, 37).unwrap();
        assert!((g.item(lp) - (-4.605_170_185_988_091)).abs() < 1e-12);
    }

    #[test]
    fn action_to_mu_closed_forms() {
        assert_eq!(action_to_mu(0, 100).unwrap(), 0.5);
        assert!((action_to_mu(100, 100).unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((action_to_mu(50, 100).unwrap() - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!(action_to_mu(101, 100).is_err());
        let mus: Vec<f64> = (0..=100).map(|i| action_to_mu(i, 100).unwrap()).collect();
        assert!(mus.windows(2).all(|w| w[1] > w[0]));
        assert!(mus[0] > 0.5 - 1e-15 && mus[100] <= 0.7311);
    }

    #[test]
    fn normal_logprob_closed_forms() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.3));
        let mu = g.leaf(Tensor::scalar(0.3));
        let one = g.leaf(Tensor::scalar(1.0));
        let lp = normal_logprob(&mut g, x, mu, one).unwrap();
        assert!((g.item(lp) + 0.918_938_533_204_672_8).abs() < 1e-15);

        let sigma = 0.7;
        let v = normal_log_density(0.3 + sigma, 0.3, sigma).unwrap();
        assert!((v - (-HALF_LN_2PI - sigma.ln() - 0.5)).abs() < 1e-14);
        assert!(normal_log_density(0.0, 0.0, 0.0).is_err());
        let zero = g.leaf(Tensor::scalar(0.0));
        assert!(normal_logprob(&mut g, x, mu, zero).is_err());
    }

    #[test]
    fn normal_logprob_gradcheck() {
        let err = grad_check(
            |g, v| normal_logprob(g, v[0], v[1], v[2]),
            &[Tensor::scalar(0.4), Tensor::scalar(-0.2), Tensor::scalar(0.8)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reparam_derivatives() {
        let eps = -0.731;
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::scalar(0.6));
        let sigma = g.leaf(Tensor::scalar(0.2));
        let x = normal_sample_with_eps(&mut g, mu, sigma, eps).unwrap();
        g.backward(x).unwrap();
        assert_eq!(g.grad(mu).unwrap(), &[1.0]);
        assert_eq!(g.grad(sigma).unwrap(), &[eps]);

        let mut g = Graph::new();
        let mu = g.leaf(Tensor::scalar(0.6));
        let tiny = g.leaf(Tensor::scalar(1e-300));
        let x = normal_sample_with_eps(&mut g, mu, tiny, 1.5).unwrap();
        assert_eq!(g.item(x), 0.6);
        let bad = g.leaf(Tensor::scalar(-1.0));
        assert!(normal_sample_with_eps(&mut g, mu, bad, 1.0).is_err());
    }

    #[test]
    fn straight_through_definition() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![0.0, 0.0, 1.0]));
        let st = straight_through(&mut g, 2, p, 2).unwrap();
        assert_eq!(g.item(st), 1.0);
        let q = g.leaf(Tensor::row(vec![0.6, 0.3, 0.1]));
        let st2 = straight_through(&mut g, 2, q, 2).unwrap();
        assert_eq!(g.item(st2), 1.0);
        assert!(straight_through(&mut g, 3, q, 2).is_err());
    }

    #[test]
    fn mu_gradient_reaches_logits() {
        let space = ActionSpace::new(4, 1.0).unwrap();
        let noise = gumbel_noise(5, &mut ChaCha8Rng::seed_from_u64(4));
        let logits = Tensor::row(vec![0.1, -0.4, 0.3, 0.0, 0.2]);
        let build = |g: &mut Graph, v: &[Var]| {
            let y = gumbel_softmax_with_noise(g, v[0], &noise, space.temperature())?;
            let idx = argmax(g.value(y).data());
            let st = straight_through(g, idx, y, space.n())?;
            Ok(g.sigmoid(st))
        };
        let err = grad_check(build, std::slice::from_ref(&logits), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let mu = build(&mut g, &[l]).unwrap();
        g.backward(mu).unwrap();
        assert!(g.grad(l).unwrap().iter().any(|v| v.abs() > 1e-6));
    }
}

//! Policy-gradient attention: a GRU policy walks the region (or token)
//! sequence, draws one compound action per step, and the resulting scalar
//! attention weights rescale the features before GRU fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::distributions::{
    self, argmax, categorical_from_uniform, discrete_logprob, gumbel_softmax_with_noise,
    normal_logprob, normal_sample_with_eps, straight_through, ActionSpace, CompoundSample,
};
use crate::encoders::{gru_scan, gru_step, uniform_init, GruParams, GruVars};
use crate::error::{invalid, Error, Result};

/// Floor added to the softplus σ head.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

/// Which action law the policy draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Categorical label → mean, then Normal draw.
    Compound,
    /// Categorical label only; attention is `sigmoid(μ)`.
    DiscreteOnly,
    /// Single Gaussian whose mean comes from a linear head.
    ContinuousOnly,
}

impl PolicyKind {
    pub fn uses_discrete(self) -> bool {
        matches!(self, Self::Compound | Self::DiscreteOnly)
    }

    pub fn uses_continuous(self) -> bool {
        matches!(self, Self::Compound | Self::ContinuousOnly)
    }
}

/// Random inputs consumed by one head at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub gumbel: Vec<f64>,
    pub uniform: f64,
    pub normal: f64,
}

pub trait NoiseSource {
    fn draw(&mut self, categories: usize) -> StepNoise;
}

/// Adapts any RNG into a [`NoiseSource`].
pub struct RngNoise<'a, R: ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn draw(&mut self, categories: usize) -> StepNoise {
        let gumbel = distributions::gumbel_noise(categories, self.0);
        let uniform = self.0.random();
        let normal = distributions::standard_normal(self.0);
        StepNoise {
            gumbel,
            uniform,
            normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams {
    /// `hidden × (n + 1)` label logits.
    pub w_mu: ParamId,
    /// `hidden × 1` pre-softplus σ.
    pub w_std: ParamId,
    /// `hidden × 1` Gaussian mean head, used only by [`PolicyKind::ContinuousOnly`].
    pub w_mean: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub gru: GruParams,
    pub heads: Vec<HeadParams>,
    pub fusion: GruParams,
}

impl PolicyParams {
    /// Policy GRU `input → hidden`, `heads` action heads, fusion GRU
    /// `input → input`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        space: &ActionSpace,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&heads) {
            return invalid(format!("head count must be 1 or 2, got {heads}"));
        }
        let gru = GruParams::new(store, &format!("{prefix}.policy"), input, hidden, rng);
        let scale = 1.0 / (hidden as f64).sqrt();
        let heads = (0..heads)
            .map(|h| HeadParams {
                w_mu: store.add(
                    format!("{prefix}.head{h}.w_mu"),
                    uniform_init(hidden, space.categories(), scale, rng),
                ),
                w_std: store.add(
                    format!("{prefix}.head{h}.w_std"),
                    uniform_init(hidden, 1, scale, rng),
                ),
                w_mean: store.add(
                    format!("{prefix}.head{h}.w_mean"),
                    uniform_init(hidden, 1, scale, rng),
                ),
            })
            .collect();
        let fusion = GruParams::new(store, &format!("{prefix}.fusion"), input, input, rng);
        Ok(Self { gru, heads, fusion })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

/// One timestep of an episode: the per-head draws and the merged weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub heads: Vec<CompoundSample>,
    pub att: f64,
}

/// One episode of the attention policy over a feature sequence.
///
/// The `Var` fields point into the graph the rollout was recorded on.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub steps: Vec<StepRecord>,
    pub discrete_logprob_sum: f64,
    pub continuous_logprob_sum: f64,
    pub mode: SampleMode,
    pub kind: PolicyKind,
    /// Per-step `1 × 1` attention weights.
    pub att: Vec<Var>,
    /// Episode sum of discrete log-probabilities.
    pub discrete_logprob: Option<Var>,
    /// Episode sum of Normal log-densities.
    pub continuous_logprob: Option<Var>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.att).collect()
    }
}

struct HeadVars {
    w_mu: Var,
    w_std: Var,
    w_mean: Var,
}

struct HeadStep {
    record: CompoundSample,
    att: Var,
    dlp: Option<Var>,
    clp: Option<Var>,
}

fn head_step(
    g: &mut Graph,
    h: Var,
    head: &HeadVars,
    space: &ActionSpace,
    kind: PolicyKind,
    mode: SampleMode,
    noise: &StepNoise,
) -> Result<HeadStep> {
    let n = space.n();
    let mut soft_probs = Vec::new();
    let mut hard_index = 0;
    let mut dlp = None;
    let mu = if kind.uses_discrete() {
        let logits = g.matmul(h, head.w_mu)?;
        let probs = match mode {
            SampleMode::Stochastic => {
                gumbel_softmax_with_noise(g, logits, &noise.gumbel, space.temperature())?
            }
            SampleMode::Deterministic => g.softmax_rows(logits),
        };
        soft_probs = g.value(probs).data().to_vec();
        hard_index = match mode {
            SampleMode::Stochastic => categorical_from_uniform(&soft_probs, noise.uniform)?,
            SampleMode::Deterministic => argmax(&soft_probs),
        };
        dlp = Some(discrete_logprob(g, probs, hard_index)?);
        let st = straight_through(g, hard_index, probs, n)?;
        g.sigmoid(st)
    } else {
        let m = g.matmul(h, head.w_mean)?;
        g.sigmoid(m)
    };
    let s_pre = g.matmul(h, head.w_std)?;
    let s_soft = g.softplus(s_pre);
    let sigma = g.add_scalar(s_soft, SIGMA_FLOOR);

    let stochastic_normal = mode == SampleMode::Stochastic && kind.uses_continuous();
    let raw = if stochastic_normal {
        normal_sample_with_eps(g, mu, sigma, noise.normal)?
    } else {
        mu
    };
    let att = g.sigmoid(raw);
    // the score function treats the draw as fixed
    let raw_const = g.detach(raw);
    let clp_var = normal_logprob(g, raw_const, mu, sigma)?;
    let clp = kind.uses_continuous().then_some(clp_var);

    let record = CompoundSample {
        soft_probs,
        hard_index,
        discrete_logprob: dlp.map_or(0.0, |v| g.item(v)),
        mu: g.item(mu),
        sigma: g.item(sigma),
        raw_sample: g.item(raw),
        att: g.item(att),
        continuous_logprob: g.item(clp_var),
    };
    Ok(HeadStep {
        record,
        att,
        dlp,
        clp,
    })
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let row = g.concat(vars, 1)?;
    Ok(Some(g.sum(row)))
}

/// Rolls the policy over the rows of `features` (`T × p`) from a zero
/// hidden state, drawing one compound action per step and head.
///
/// In [`SampleMode::Deterministic`] the label is the softmax argmax (lowest
/// index on ties), the Normal is not sampled, and attention is `sigmoid(μ)`;
/// `noise` is still consulted so streams stay aligned but its values are
/// ignored.
#[allow(clippy::too_many_arguments)]
pub fn policy_rollout<N: NoiseSource + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    params: &PolicyParams,
    space: &ActionSpace,
    kind: PolicyKind,
    mode: SampleMode,
    noise: &mut N,
) -> Result<AttentionTrace> {
    if !(1..=2).contains(&params.head_count()) {
        return invalid(format!(
            "head count must be 1 or 2, got {}",
            params.head_count()
        ));
    }
    let t_len = g.value(features).rows();
    if t_len == 0 {
        return invalid("policy_rollout: empty feature sequence");
    }
    let gru = params.gru.bind(g, store);
    let heads: Vec<HeadVars> = params
        .heads
        .iter()
        .map(|h| HeadVars {
            w_mu: g.param(store, h.w_mu),
            w_std: g.param(store, h.w_std),
            w_mean: g.param(store, h.w_mean),
        })
        .collect();
    rollout_with_vars(g, features, &gru, &heads, space, kind, mode, noise)
}

#[allow(clippy::too_many_arguments)]
fn rollout_with_vars<N: NoiseSource + ?Sized>(
    g: &mut Graph,
    features: Var,
    gru: &GruVars,
    heads: &[HeadVars],
    space: &ActionSpace,
    kind: PolicyKind,
    mode: SampleMode,
    noise: &mut N,
) -> Result<AttentionTrace> {
    let t_len = g.value(features).rows();
    let mut h = g.constant(Tensor::zeros(&[1, gru.hidden(g)]));
    let mut steps = Vec::with_capacity(t_len);
    let mut atts = Vec::with_capacity(t_len);
    let mut dlps = Vec::new();
    let mut clps = Vec::new();
    for t in 0..t_len {
        let x = g.row(features, t)?;
        h = gru_step(g, x, h, gru)?;
        let mut records = Vec::with_capacity(heads.len());
        let mut head_atts = Vec::with_capacity(heads.len());
        for head in heads {
            let draw = noise.draw(space.categories());
            let step = head_step(g, h, head, space, kind, mode, &draw)?;
            records.push(step.record);
            head_atts.push(step.att);
            dlps.extend(step.dlp);
            clps.extend(step.clp);
        }
        let att = if head_atts.len() == 1 {
            head_atts[0]
        } else {
            let row = g.concat(&head_atts, 1)?;
            g.mean(row)
        };
        steps.push(StepRecord {
            heads: records,
            att: g.item(att),
        });
        atts.push(att);
    }
    let discrete_logprob = sum_vars(g, &dlps)?;
    let continuous_logprob = sum_vars(g, &clps)?;
    Ok(AttentionTrace {
        discrete_logprob_sum: discrete_logprob.map_or(0.0, |v| g.item(v)),
        continuous_logprob_sum: continuous_logprob.map_or(0.0, |v| g.item(v)),
        steps,
        mode,
        kind,
        att: atts,
        discrete_logprob,
        continuous_logprob,
    })
}

/// Two-head rollout; the heads share the policy GRU and their attention
/// weights are averaged.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_rollout<N: NoiseSource + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    params: &PolicyParams,
    space: &ActionSpace,
    kind: PolicyKind,
    mode: SampleMode,
    noise: &mut N,
) -> Result<AttentionTrace> {
    if params.head_count() != 2 {
        return invalid(format!(
            "multi_head_rollout needs 2 heads, got {}",
            params.head_count()
        ));
    }
    policy_rollout(g, store, features, params, space, kind, mode, noise)
}

/// GRU fusion of already-adjusted features: final hidden state plus the
/// mean adjusted feature.
pub fn fuse_adjusted(g: &mut Graph, adjusted: Var, gru: &GruVars) -> Result<Var> {
    let d = g.value(adjusted).cols();
    if gru.hidden(g) != d {
        return Err(Error::Shape {
            op: "fuse",
            lhs: g.shape(adjusted).to_vec(),
            rhs: vec![gru.hidden(g)],
        });
    }
    let hs = gru_scan(g, adjusted, gru)?;
    let last = *hs.last().expect("at least one row");
    let mean = g.mean_axis(adjusted, 0)?;
    g.add(last, mean)
}

/// Scales feature row `t` by `λ · att[t]` and fuses the result.
pub fn fuse(g: &mut Graph, features: Var, att: &[Var], lambda: f64, gru: &GruVars) -> Result<Var> {
    let rows = g.value(features).rows();
    if att.len() != rows {
        return invalid(format!(
            "fuse: {} attention weights for {rows} features",
            att.len()
        ));
    }
    if !(lambda > 0.0) {
        return invalid(format!("fuse: lambda must be positive, got {lambda}"));
    }
    let col = g.concat(att, 0)?;
    let scaled = g.scale(col, lambda);
    let adjusted = g.mul(features, scaled)?;
    fuse_adjusted(g, adjusted, gru)
}

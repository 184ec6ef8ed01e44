//! Objective terms: score-function losses for both action components,
//! hardest-negative triplet ranking, instance classification, and a small
//! shared causal-convolution text decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoders::{uniform_init, TokenSeq};
use crate::error::{invalid, Result};

/// How per-trace PG terms are combined over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgNorm {
    /// `-(1/K) Σ_k A_k · logp_k`
    Mean,
    /// `-Σ_k A_k · logp_k`
    Sum,
}

fn pg_loss(g: &mut Graph, logps: &[Var], advantages: &[f64], norm: PgNorm) -> Result<Var> {
    if logps.len() != advantages.len() {
        return invalid(format!(
            "pg loss: {} traces but {} advantages",
            logps.len(),
            advantages.len()
        ));
    }
    if logps.is_empty() {
        return invalid("pg loss: empty batch");
    }
    let row = g.concat(logps, 1)?;
    let adv = g.constant(Tensor::row(advantages.to_vec()));
    let weighted = g.mul(row, adv)?;
    let total = g.sum(weighted);
    let scale = match norm {
        PgNorm::Mean => -1.0 / logps.len() as f64,
        PgNorm::Sum => -1.0,
    };
    Ok(g.scale(total, scale))
}

/// REINFORCE loss on the episode sums of discrete log-probabilities.
pub fn discrete_pg_loss(
    g: &mut Graph,
    traces: &[&AttentionTrace],
    advantages: &[f64],
    norm: PgNorm,
) -> Result<Var> {
    let logps = traces
        .iter()
        .map(|t| {
            t.discrete_logprob
                .ok_or_else(|| crate::Error::Invalid("trace has no discrete actions".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    pg_loss(g, &logps, advantages, norm)
}

/// REINFORCE loss on the episode sums of Normal log-densities.
pub fn continuous_pg_loss(
    g: &mut Graph,
    traces: &[&AttentionTrace],
    advantages: &[f64],
    norm: PgNorm,
) -> Result<Var> {
    let logps = traces
        .iter()
        .map(|t| {
            t.continuous_logprob
                .ok_or_else(|| crate::Error::Invalid("trace has no continuous actions".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    pg_loss(g, &logps, advantages, norm)
}

/// Score-function loss directly on per-instance log-probability nodes.
pub fn pg_loss_from_logprobs(
    g: &mut Graph,
    logps: &[Var],
    advantages: &[f64],
    norm: PgNorm,
) -> Result<Var> {
    pg_loss(g, logps, advantages, norm)
}

/// Index of the largest entry other than `skip`; lowest index on ties.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = None::<(usize, f64)>;
    for (j, v) in values.enumerate() {
        if j == skip {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.expect("at least two items").0
}

/// Hinge triplet loss with the hardest in-batch negative in each direction,
/// averaged over the `K` pairs of the `K × K` similarity matrix `s`.
pub fn triplet_loss(g: &mut Graph, s: Var, margin: f64) -> Result<Var> {
    let t = g.value(s).clone();
    let (k, k2) = t.dims();
    if k != k2 {
        return invalid(format!("triplet loss needs a square matrix, got {k}x{k2}"));
    }
    if k < 2 {
        return invalid("triplet loss needs at least 2 pairs");
    }
    if !(margin > 0.0) {
        return invalid(format!("margin must be positive, got {margin}"));
    }
    let diag_at: Vec<(usize, usize)> = (0..k).map(|i| (i, i)).collect();
    let row_neg: Vec<(usize, usize)> = (0..k)
        .map(|i| (i, hardest((0..k).map(|j| t.at(i, j)), i)))
        .collect();
    let col_neg: Vec<(usize, usize)> = (0..k)
        .map(|j| (hardest((0..k).map(|i| t.at(i, j)), j), j))
        .collect();
    let diag = g.gather(s, &diag_at)?;
    let mut hinge = |neg_at: &[(usize, usize)]| -> Result<Var> {
        let neg = g.gather(s, neg_at)?;
        let d = g.sub(neg, diag)?;
        let m = g.add_scalar(d, margin);
        Ok(g.relu(m))
    };
    let a = hinge(&row_neg)?;
    let b = hinge(&col_neg)?;
    let both = g.add(a, b)?;
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / k as f64))
}

/// Mean softmax cross-entropy of `emb · w_cls` at the true labels.
pub fn instance_loss(g: &mut Graph, emb: Var, labels: &[usize], w_cls: Var) -> Result<Var> {
    let rows = g.value(emb).rows();
    let classes = g.value(w_cls).cols();
    if labels.len() != rows {
        return invalid(format!("{} labels for {rows} embeddings", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return invalid(format!("label {bad} outside {classes} classes"));
    }
    let logits = g.matmul(emb, w_cls)?;
    cross_entropy(g, logits, labels)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let lsm = g.log_softmax(logits, 1)?;
    let at: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = g.gather(lsm, &at)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Causal-convolution decoder shared by the image- and text-conditioned
/// decoding losses. Two layers with kernel 3; the first layer also sees the
/// conditioning embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub vocab: usize,
    pub table: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub wc: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

pub struct DecoderVars {
    vocab: usize,
    table: Var,
    w1: Var,
    b1: Var,
    wc: Var,
    w2: Var,
    b2: Var,
    w_out: Var,
    b_out: Var,
}

pub const DECODER_KERNEL: usize = 3;

impl DecoderParams {
    /// `vocab` output tokens; the input table has one extra row used as the
    /// start token.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: usize,
        embed: usize,
        cond: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let k = DECODER_KERNEL;
        let s1 = 1.0 / ((k * embed) as f64).sqrt();
        let s2 = 1.0 / ((k * channels) as f64).sqrt();
        Self {
            vocab,
            table: store.add("decoder.table", uniform_init(vocab + 1, embed, 0.5, rng)),
            w1: store.add("decoder.w1", uniform_init(k * embed, channels, s1, rng)),
            b1: store.add("decoder.b1", Tensor::zeros(&[1, channels])),
            wc: store.add(
                "decoder.wc",
                uniform_init(cond, channels, 1.0 / (cond as f64).sqrt(), rng),
            ),
            w2: store.add("decoder.w2", uniform_init(k * channels, channels, s2, rng)),
            b2: store.add("decoder.b2", Tensor::zeros(&[1, channels])),
            w_out: store.add("decoder.w_out", Tensor::zeros(&[channels, vocab])),
            b_out: store.add("decoder.b_out", Tensor::zeros(&[1, vocab])),
        }
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> DecoderVars {
        DecoderVars {
            vocab: self.vocab,
            table: g.param(store, self.table),
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            wc: g.param(store, self.wc),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
            w_out: g.param(store, self.w_out),
            b_out: g.param(store, self.b_out),
        }
    }
}

/// `[x, shift1(x), shift2(x)]` along columns, with zero rows shifted in.
fn causal_window(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let mut parts = vec![x];
    for s in 1..DECODER_KERNEL {
        let mut m = vec![0.0; n * n];
        for j in s..n {
            m[j * n + (j - s)] = 1.0;
        }
        let shift = g.constant(Tensor::matrix(n, n, m)?);
        parts.push(g.matmul(shift, x)?);
    }
    g.concat(&parts, 1)
}

/// Teacher-forced next-token cross-entropy of `target` given the
/// conditioning embedding `cond` (`1 × D`).
pub fn text_decoding_loss(
    g: &mut Graph,
    cond: Var,
    target: &TokenSeq,
    dec: &DecoderVars,
) -> Result<Var> {
    if target.is_empty() {
        return invalid("text decoding target is empty");
    }
    if let Some(&bad) = target.ids().iter().find(|&&t| t >= dec.vocab) {
        return invalid(format!(
            "target token {bad} outside decoder vocabulary {}",
            dec.vocab
        ));
    }
    let mut inputs = Vec::with_capacity(target.len());
    inputs.push(dec.vocab);
    inputs.extend_from_slice(&target.ids()[..target.len() - 1]);
    let x = g.select_rows(dec.table, &inputs)?;

    let win1 = causal_window(g, x)?;
    let c = g.matmul(cond, dec.wc)?;
    let l1 = g.matmul(win1, dec.w1)?;
    let l1 = g.add(l1, dec.b1)?;
    let l1 = g.add(l1, c)?;
    let h1 = g.relu(l1);

    let win2 = causal_window(g, h1)?;
    let l2 = g.matmul(win2, dec.w2)?;
    let l2 = g.add(l2, dec.b2)?;
    let r2 = g.relu(l2);
    let h2 = g.add(r2, h1)?;

    let logits = g.matmul(h2, dec.w_out)?;
    let logits = g.add(logits, dec.b_out)?;
    cross_entropy(g, logits, target.ids())
}

/// Every term of the training objective; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub triplet: Option<Var>,
    pub instance: Option<Var>,
    pub decode_image: Option<Var>,
    pub decode_text: Option<Var>,
    pub pg_discrete_image: Option<Var>,
    pub pg_continuous_image: Option<Var>,
    pub pg_discrete_text: Option<Var>,
    pub pg_continuous_text: Option<Var>,
}

/// Scalar values of each objective term and their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub triplet: f64,
    pub instance: f64,
    pub decode_image: f64,
    pub decode_text: f64,
    pub pg_discrete_image: f64,
    pub pg_continuous_image: f64,
    pub pg_discrete_text: f64,
    pub pg_continuous_text: f64,
    pub total: f64,
}

impl LossTerms {
    fn all(&self) -> [Option<Var>; 8] {
        [
            self.triplet,
            self.instance,
            self.decode_image,
            self.decode_text,
            self.pg_discrete_image,
            self.pg_continuous_image,
            self.pg_discrete_text,
            self.pg_continuous_text,
        ]
    }
}

impl LossBundle {
    pub fn components(&self) -> [f64; 8] {
        [
            self.triplet,
            self.instance,
            self.decode_image,
            self.decode_text,
            self.pg_discrete_image,
            self.pg_continuous_image,
            self.pg_discrete_text,
            self.pg_continuous_text,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Unweighted sum of the enabled terms. Returns `None` for the graph total
/// when every term is disabled.
pub fn total_loss(g: &mut Graph, terms: &LossTerms) -> Result<(Option<Var>, LossBundle)> {
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.item(v));
    let present: Vec<Var> = terms.all().into_iter().flatten().collect();
    let total = if present.is_empty() {
        None
    } else {
        let row = g.concat(&present, 1)?;
        Some(g.sum(row))
    };
    let bundle = LossBundle {
        triplet: val(g, terms.triplet),
        instance: val(g, terms.instance),
        decode_image: val(g, terms.decode_image),
        decode_text: val(g, terms.decode_text),
        pg_discrete_image: val(g, terms.pg_discrete_image),
        pg_continuous_image: val(g, terms.pg_continuous_image),
        pg_discrete_text: val(g, terms.pg_discrete_text),
        pg_continuous_text: val(g, terms.pg_continuous_text),
        total: val(g, total),
    };
    Ok((total, bundle))
}

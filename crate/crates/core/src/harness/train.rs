//! Training loop with per-epoch validation and best-checkpoint selection.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{class_distinct_batches, Instance, Split, SyntheticDataset};
use super::eval::{evaluate, EvalReport, RECALL_KS};
use super::log::{LogRecord, MetricLog};
use super::model::{Checkpoint, DataDims, Model};
use crate::attention::{AttentionTrace, NoiseSource, RngNoise, SampleMode};
use crate::autodiff::{Adam, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    continuous_pg_loss, discrete_pg_loss, instance_loss, text_decoding_loss, total_loss,
    triplet_loss, LossBundle, LossTerms,
};
use crate::rewards::{apply_baseline, instance_rewards, SimilarityMatrix};

use super::config::ModelConfig;

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Record elapsed milliseconds in every log record. Off by default so
    /// logs are reproducible byte for byte.
    pub wall_time: bool,
}

pub struct TrainOutcome {
    pub log: MetricLog,
    /// Parameters after the last step.
    pub last: Checkpoint,
    /// Parameters with the best validation selection score.
    pub best: Checkpoint,
    pub best_report: EvalReport,
    /// Model holding the best parameters.
    pub model: Model,
}

/// Result of one optimization step.
pub struct StepStats {
    pub losses: LossBundle,
    pub reward: f64,
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let row = g.concat(vars, 1)?;
    Ok(g.mean(row))
}

/// Builds the full objective on one batch and records it on `g`. Returns
/// the graph total (if any term is enabled) with the per-term values.
pub fn batch_objective<N: NoiseSource + ?Sized>(
    model: &Model,
    g: &mut Graph,
    batch: &[&Instance],
    noise: &mut N,
) -> Result<(Option<Var>, StepStats)> {
    let cfg = &model.config;
    let mut img = Vec::with_capacity(batch.len());
    let mut txt = Vec::with_capacity(batch.len());
    let mut img_traces: Vec<AttentionTrace> = Vec::new();
    let mut txt_traces: Vec<AttentionTrace> = Vec::new();
    for inst in batch {
        let a = model.encode_image(g, inst, SampleMode::Stochastic, noise)?;
        let b = model.encode_text(g, inst, SampleMode::Stochastic, noise)?;
        img.push(a.emb);
        txt.push(b.emb);
        img_traces.extend(a.trace);
        txt_traces.extend(b.trace);
    }
    let i_mat = g.concat(&img, 0)?;
    let t_mat = g.concat(&txt, 0)?;
    let t_tr = g.transpose(t_mat);
    let s = g.matmul(i_mat, t_tr)?;

    let k = batch.len();
    let sim = SimilarityMatrix::new(k, g.value(s).data().to_vec())?;
    let mut records = instance_rewards(&sim, cfg.reward);
    apply_baseline(&mut records, cfg.beta)?;
    let advantages: Vec<f64> = records.iter().map(|r| r.advantage).collect();
    let reward = records.iter().map(|r| r.reward).sum::<f64>() / k as f64;

    let mut terms = LossTerms::default();
    if cfg.triplet {
        terms.triplet = Some(triplet_loss(g, s, cfg.margin)?);
    }
    if cfg.instance {
        let both = g.concat(&[i_mat, t_mat], 0)?;
        let labels: Vec<usize> = batch.iter().chain(batch).map(|i| i.label).collect();
        let w = g.param(&model.store, model.classifier());
        terms.instance = Some(instance_loss(g, both, &labels, w)?);
    }
    if cfg.decode {
        let dec = model.decoder().bind(g, &model.store);
        let mut di = Vec::with_capacity(k);
        let mut dt = Vec::with_capacity(k);
        for (idx, inst) in batch.iter().enumerate() {
            di.push(text_decoding_loss(g, img[idx], &inst.tokens, &dec)?);
            dt.push(text_decoding_loss(g, txt[idx], &inst.tokens, &dec)?);
        }
        terms.decode_image = Some(mean_of(g, &di)?);
        terms.decode_text = Some(mean_of(g, &dt)?);
    }
    if let Some(kind) = model.kind() {
        let it: Vec<&AttentionTrace> = img_traces.iter().collect();
        let tt: Vec<&AttentionTrace> = txt_traces.iter().collect();
        if kind.uses_discrete() {
            terms.pg_discrete_image = Some(discrete_pg_loss(g, &it, &advantages, cfg.pg_norm)?);
            terms.pg_discrete_text = Some(discrete_pg_loss(g, &tt, &advantages, cfg.pg_norm)?);
        }
        if kind.uses_continuous() {
            terms.pg_continuous_image =
                Some(continuous_pg_loss(g, &it, &advantages, cfg.pg_norm)?);
            terms.pg_continuous_text =
                Some(continuous_pg_loss(g, &tt, &advantages, cfg.pg_norm)?);
        }
    }
    let (total, losses) = total_loss(g, &terms)?;
    Ok((total, StepStats { losses, reward }))
}

/// Trains `config` on `data`, streaming each record to `sink` as it is
/// produced.
pub fn train_with(
    config: &ModelConfig,
    data: &SyntheticDataset,
    opts: TrainOptions,
    mut sink: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.len() < 2 {
        return Err(Error::Config("training split needs at least 2 instances".into()));
    }
    if data.val.len() < RECALL_KS[2] {
        return Err(Error::Config(format!(
            "validation split needs at least {} instances, got {}",
            RECALL_KS[2],
            data.val.len()
        )));
    }
    let mut model = Model::new(config, DataDims::from(&data.spec))?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed);
    noise.set_stream(NOISE_STREAM);
    let start = Instant::now();
    let wall = |on: bool| on.then(|| start.elapsed().as_secs_f64() * 1e3);

    let mut log = MetricLog::new();
    let mut emit = |log: &mut MetricLog, r: LogRecord| -> Result<()> {
        sink(&r)?;
        log.push(r);
        Ok(())
    };
    let mut best: Option<(Checkpoint, EvalReport)> = None;
    let mut step = 0;
    let mut g = Graph::new();
    for epoch in 0..config.epochs {
        let lr = if epoch >= config.lr_drop_epoch {
            config.lr * config.lr_drop_factor
        } else {
            config.lr
        };
        let adam = Adam::new(lr);
        for batch in class_distinct_batches(&data.train, config.batch_size, &mut shuffle) {
            let items: Vec<&Instance> = batch.iter().map(|&i| &data.train[i]).collect();
            g.clear();
            let (total, stats) = batch_objective(&model, &mut g, &items, &mut RngNoise(&mut noise))?;
            if !stats.losses.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{:?}", stats.losses),
                });
            }
            model.store.zero_grad();
            if let Some(total) = total {
                if g.is_tracked(total) {
                    g.backward(total).map_err(|e| Error::Diverged {
                        epoch,
                        step,
                        detail: e.to_string(),
                    })?;
                    g.accumulate_into(&mut model.store)?;
                }
            }
            adam.step(&mut model.store)?;
            emit(
                &mut log,
                LogRecord::Batch {
                    epoch,
                    step,
                    lr,
                    losses: stats.losses,
                    reward: stats.reward,
                    wall_ms: wall(opts.wall_time),
                },
            )?;
            step += 1;
        }
        let report = evaluate(&model, &data.val)?;
        let improved = best
            .as_ref()
            .is_none_or(|(_, b)| report.selection() > b.selection());
        if improved {
            best = Some((model.checkpoint(epoch), report));
        }
        emit(
            &mut log,
            LogRecord::Eval {
                epoch,
                step,
                split: Split::Val,
                report,
                best: improved,
                wall_ms: wall(opts.wall_time),
            },
        )?;
    }
    let last = model.checkpoint(config.epochs - 1);
    let (best, best_report) = best.expect("at least one epoch");
    model.store.load(&best.params)?;
    Ok(TrainOutcome {
        log,
        last,
        best,
        best_report,
        model,
    })
}

pub fn train(config: &ModelConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    train_with(config, data, TrainOptions::default(), |_| Ok(()))
}

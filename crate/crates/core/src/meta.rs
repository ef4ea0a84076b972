//! First-order bi-level meta-training and episodic fine-tuning.
//!
//! The inner loop adapts the matcher parameters `w` by plain gradient descent
//! on a split of the support set, with the encoder `θ` held fixed. The outer
//! loop scores the adapted `w_τ` on the episode queries and updates `(θ, w)`
//! with Adam, treating `w_τ` as a constant function of `w`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, DEFAULT_LOG_EPS};
use crate::encoder::{embed, MultiLevelEmbedding};
use crate::episodes::{sample_episode, Episode, Protocol, Registry, Split, TaskRecord};
use crate::error::{Error, Result};
use crate::matcher::{forward_joint, label_column, match_and_fuse, onehot, predict_from_embeddings};
use crate::metrics;
use crate::model::{EncoderParams, MatchParams, ModelConfig, ModelParams};
use crate::optim::{Adam, OptimizerKind};
use crate::smiles::MolGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub protocol: Protocol,
    pub support_size: usize,
    pub query_size: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            protocol: Protocol::Balanced,
            support_size: 20,
            query_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Inner-loop step size α.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub batch_tasks: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub support_split_fraction: f64,
    pub episode: EpisodeConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Worker threads for per-task work; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.05,
            inner_steps: 5,
            meta_lr: 0.001,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            batch_tasks: 21,
            max_epochs: 200,
            seed: 0,
            support_split_fraction: 0.5,
            episode: EpisodeConfig::default(),
            patience: None,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return fail(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1".into());
        }
        if !(self.support_split_fraction > 0.0 && self.support_split_fraction < 1.0) {
            return fail(format!(
                "support_split_fraction must lie in (0, 1), got {}",
                self.support_split_fraction
            ));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return fail(format!("meta_lr must be non-negative, got {}", self.meta_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_tasks == 0 {
            return fail("batch_tasks must be at least 1".into());
        }
        if self.episode.support_size == 0 || self.episode.query_size == 0 {
            return fail("support_size and query_size must be positive".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        Ok(())
    }
}

/// Mixes a base seed with a path of counters (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x94D0_49BB_1331_11EB);
        h ^= h >> 30;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Stratified split of support indices into `(S′, Q′)`.
///
/// `S′` receives `round(n · fraction)` examples. Each class with at least two
/// members keeps at least one on each side; a class with a single member
/// goes to `S′`.
pub fn split_support(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<Vec<usize>> = [1u8, 0]
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    let quota_bounds = |n: usize| match n {
        0 => (0, 0),
        1 => (1, 1),
        n => (1, n - 1),
    };
    let mut quota: Vec<usize> = classes
        .iter()
        .map(|c| {
            let (lo, hi) = quota_bounds(c.len());
            ((c.len() as f64 * fraction).floor() as usize).clamp(lo, hi)
        })
        .collect();
    let target = (labels.len() as f64 * fraction).round() as usize;
    // Top up toward the target, positives first.
    let mut total: usize = quota.iter().sum();
    for (c, q) in classes.iter().zip(quota.iter_mut()) {
        let (_, hi) = quota_bounds(c.len());
        while total < target && *q < hi {
            *q += 1;
            total += 1;
        }
        if c.len() == 1 {
            log::warn!("class with a single support member kept on the inner support side");
        }
    }
    let mut s = Vec::new();
    let mut q = Vec::new();
    for (c, &k) in classes.iter().zip(&quota) {
        s.extend_from_slice(&c[..k]);
        q.extend_from_slice(&c[k..]);
    }
    s.sort_unstable();
    q.sort_unstable();
    (s, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedParams {
    pub w: MatchParams,
    pub task_id: String,
    /// Inner loss at each step, before that step's update.
    pub losses: Vec<f64>,
    /// Inner loss at the adapted parameters.
    pub final_loss: f64,
}

/// Summed cross-entropy of the query predictions and its gradient with
/// respect to `w`, from fixed embeddings.
pub fn matcher_loss_and_grad(
    zs: &MultiLevelEmbedding,
    ys: &[u8],
    zq: &MultiLevelEmbedding,
    yq: &[u8],
    w: &MatchParams,
) -> Result<(f64, MatchParams)> {
    let mut g = Graph::new();
    let wv = w.bind(&mut g, true);
    let s: Vec<_> = zs.layers.iter().map(|z| g.constant(z.clone())).collect();
    let q: Vec<_> = zq.layers.iter().map(|z| g.constant(z.clone())).collect();
    let pred = match_and_fuse::<ChaCha8Rng>(&mut g, &q, &s, &label_column(ys), &wv, 0.0, None)?;
    let loss = g.cross_entropy(pred.probs, &onehot(yq), DEFAULT_LOG_EPS)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), wv.grads(&grads)))
}

fn matcher_loss(
    zs: &MultiLevelEmbedding,
    ys: &[u8],
    zq: &MultiLevelEmbedding,
    yq: &[u8],
    w: &MatchParams,
) -> Result<f64> {
    let (probs, _) = predict_from_embeddings(zs, ys, zq, w)?;
    let mut g = Graph::new();
    let p = g.constant(probs);
    let loss = g.cross_entropy(p, &onehot(yq), DEFAULT_LOG_EPS)?;
    Ok(g.value(loss).item())
}

/// Gradient descent on `w` over fixed embeddings of `S′` and `Q′`.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_embedded(
    task_id: &str,
    zs: &MultiLevelEmbedding,
    ys: &[u8],
    zq: &MultiLevelEmbedding,
    yq: &[u8],
    w: &MatchParams,
    alpha: f64,
    steps: usize,
    freeze_bias: bool,
) -> Result<AdaptedParams> {
    let mut w_t = w.clone();
    if yq.is_empty() || ys.is_empty() || steps == 0 {
        if steps > 0 {
            log::warn!("task {task_id}: inner split left one side empty; skipping adaptation");
        }
        return Ok(AdaptedParams {
            w: w_t,
            task_id: task_id.to_string(),
            losses: Vec::new(),
            final_loss: f64::NAN,
        });
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = matcher_loss_and_grad(zs, ys, zq, yq, &w_t)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                value: loss,
                context: format!("inner loop of task {task_id}, step {step}"),
            });
        }
        losses.push(loss);
        let mut grad_leaves = grad.named().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
        let n = grad_leaves.len();
        if freeze_bias {
            grad_leaves[n - 1] = Tensor::zeros(grad_leaves[n - 1].shape());
        }
        for (p, g) in w_t.leaves_mut().into_iter().zip(&grad_leaves) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= alpha * d;
            }
        }
    }
    let final_loss = matcher_loss(zs, ys, zq, yq, &w_t)?;
    Ok(AdaptedParams {
        w: w_t,
        task_id: task_id.to_string(),
        losses,
        final_loss,
    })
}

/// Adapts `w` on `(S′ → Q′)` with the encoder fixed.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    task_id: &str,
    encoder: &EncoderParams,
    w: &MatchParams,
    s_prime: (&[&MolGraph], &[u8]),
    q_prime: (&[&MolGraph], &[u8]),
    alpha: f64,
    steps: usize,
    freeze_bias: bool,
) -> Result<AdaptedParams> {
    if s_prime.0.is_empty() {
        return Err(Error::EmptySupport);
    }
    let all: Vec<&MolGraph> = s_prime.0.iter().chain(q_prime.0).copied().collect();
    let z = embed(&all, encoder)?;
    let ns = s_prime.0.len();
    let zs = z.select(&(0..ns).collect::<Vec<_>>());
    let zq = z.select(&(ns..all.len()).collect::<Vec<_>>());
    inner_adapt_embedded(task_id, &zs, s_prime.1, &zq, q_prime.1, w, alpha, steps, freeze_bias)
}

/// Summed query cross-entropy, eval mode.
pub fn episode_loss(
    query: (&[&MolGraph], &[u8]),
    support: (&[&MolGraph], &[u8]),
    encoder: &EncoderParams,
    w: &MatchParams,
) -> Result<f64> {
    let probs = crate::matcher::predict(support.0, support.1, query.0, encoder, w)?;
    let mut g = Graph::new();
    let p = g.constant(probs);
    let loss = g.cross_entropy(p, &onehot(query.1), DEFAULT_LOG_EPS)?;
    Ok(g.value(loss).item())
}

/// Loss and gradients of one task's contribution to the outer objective.
#[derive(Debug, Clone)]
pub struct TaskStep {
    pub task_id: String,
    pub loss: f64,
    pub grads: ModelParams,
}

/// Samples an episode, adapts `w` on the support split and differentiates
/// the query loss at `(θ, w_τ)`.
pub fn task_step(
    task: &TaskRecord,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskStep> {
    let ep = sample_episode(
        task,
        cfg.episode.protocol,
        cfg.episode.support_size,
        cfg.episode.query_size,
        derive_seed(seed, &[0]),
    )?;
    outer_step(&ep, params, model, cfg, seed)
}

pub fn outer_step(
    ep: &Episode,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskStep> {
    let sg = ep.support_graphs();
    let sy = ep.support_labels();
    let qg = ep.query_graphs();
    let qy = ep.query_labels();
    let (si, qi) = split_support(&sy, cfg.support_split_fraction, derive_seed(seed, &[1]));
    let pick = |idx: &[usize]| -> (Vec<&MolGraph>, Vec<u8>) {
        (idx.iter().map(|&i| sg[i]).collect(), idx.iter().map(|&i| sy[i]).collect())
    };
    let (s1g, s1y) = pick(&si);
    let (q1g, q1y) = pick(&qi);
    let adapted = inner_adapt(
        &ep.task_id,
        &params.encoder,
        &params.matcher,
        (&s1g, &s1y),
        (&q1g, &q1y),
        cfg.inner_lr,
        cfg.inner_steps,
        !model.fusion_bias,
    )?;

    let mut g = Graph::new();
    let theta = params.encoder.bind(&mut g, true);
    let w = adapted.w.bind(&mut g, true);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let probs = forward_joint(&mut g, &sg, &sy, &qg, &theta, &w, model, Some(&mut rng))?;
    let loss = g.cross_entropy(probs, &onehot(&qy), DEFAULT_LOG_EPS)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            value,
            context: format!("outer loss of task {}", ep.task_id),
        });
    }
    let grads = g.backward(loss)?;
    let mut matcher = w.grads(&grads);
    if !model.fusion_bias {
        matcher.bias = Tensor::zeros(matcher.bias.shape());
    }
    Ok(TaskStep {
        task_id: ep.task_id.clone(),
        loss: value,
        grads: ModelParams {
            encoder: theta.grads(&grads),
            matcher,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_outer_loss: f64,
    pub wall_seconds: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

fn sampleable(task: &TaskRecord, ep: &EpisodeConfig) -> bool {
    let n = task.examples.len();
    match ep.protocol {
        Protocol::Balanced => {
            let half = ep.support_size / 2;
            ep.support_size % 2 == 0
                && task.class_indices(1).len() >= half
                && task.class_indices(0).len() >= half
                && n > ep.support_size
        }
        Protocol::Unbalanced => n > ep.support_size,
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn meta_train(registry: &Registry, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX]));
    let params = ModelParams::init(model, &mut rng);
    meta_train_from(params, registry, model, cfg)
}

/// Meta-trains starting from `params`.
pub fn meta_train_from(
    mut params: ModelParams,
    registry: &Registry,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let tasks: Vec<&TaskRecord> = registry
        .split(Split::Train)
        .into_iter()
        .filter(|t| {
            let ok = sampleable(t, &cfg.episode);
            if !ok {
                log::warn!("task {} cannot supply a training episode; skipped", t.id);
            }
            ok
        })
        .collect();
    if tasks.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let valid: Vec<&TaskRecord> = registry
        .split(Split::Valid)
        .into_iter()
        .filter(|t| sampleable(t, &cfg.episode))
        .collect();

    let mut opt = Adam::new(cfg.optimizer, cfg.meta_lr, cfg.weight_decay);
    let frozen: Vec<bool> = params
        .named()
        .iter()
        .map(|(name, _)| !model.fusion_bias && name == "matcher.bias")
        .collect();
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut batch_rng);
        let batch: Vec<usize> = (0..cfg.batch_tasks).map(|i| order[i % order.len()]).collect();

        let snapshot = &params;
        let steps: Vec<Result<TaskStep>> = with_pool(cfg.workers, || {
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, &t)| {
                    let seed = derive_seed(cfg.seed, &[epoch as u64, slot as u64]);
                    task_step(tasks[t], snapshot, model, cfg, seed)
                })
                .collect()
        })?;

        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor>> = None;
        for step in steps {
            let step = step?;
            total += step.loss;
            let leaves: Vec<Tensor> = step.grads.named().into_iter().map(|(_, t)| t.clone()).collect();
            match sum.as_mut() {
                None => sum = Some(leaves),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&leaves) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mean = total / batch.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                value: mean,
                context: format!("mean outer loss at epoch {epoch}"),
            });
        }
        let grads = sum.expect("batch is nonempty");
        opt.step(&mut params.leaves_mut(), &grads, &frozen);

        let val_metric = match cfg.patience {
            Some(_) if !valid.is_empty() => Some(validation_delta_auprc(&valid, &params, model, cfg, epoch)?),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            mean_outer_loss: mean,
            wall_seconds: start.elapsed().as_secs_f64(),
            val_metric,
        };
        log::info!(
            "epoch {epoch}: mean outer loss {mean:.6}{}",
            val_metric.map(|v| format!(", validation ΔAUPRC {v:.4}")).unwrap_or_default()
        );
        log.push(entry);

        if let (Some(patience), Some(v)) = (cfg.patience, val_metric) {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }
    let last = log.len();
    Ok(match best {
        Some((_, epoch, p)) => TrainOutcome {
            params: p,
            log,
            best_epoch: epoch,
        },
        None => TrainOutcome {
            params,
            log,
            best_epoch: last,
        },
    })
}

fn validation_delta_auprc(
    tasks: &[&TaskRecord],
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[epoch as u64, i as u64, 7]);
        let ep = sample_episode(
            task,
            cfg.episode.protocol,
            cfg.episode.support_size,
            cfg.episode.query_size,
            seed,
        )?;
        let probs = finetune_and_predict(
            &params.encoder,
            &params.matcher,
            (&ep.support_graphs(), &ep.support_labels()),
            &ep.query_graphs(),
            model,
            cfg,
            seed,
        )?;
        let labels = ep.query_labels();
        let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, 0)).collect();
        total += if labels.contains(&1) {
            metrics::delta_auprc(&scores, &labels)?
        } else {
            0.0
        };
    }
    Ok(total / tasks.len() as f64)
}

/// Fine-tunes `w` on a split of the test support set, then predicts the
/// queries with the full support set as attention keys. Returns
/// `[N_q × 2]` probabilities.
pub fn finetune_and_predict(
    encoder: &EncoderParams,
    w: &MatchParams,
    support: (&[&MolGraph], &[u8]),
    query: &[&MolGraph],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Tensor> {
    let (probs, _) = finetune_and_predict_detailed(encoder, w, support, query, model, cfg, seed)?;
    Ok(probs)
}

pub fn finetune_and_predict_detailed(
    encoder: &EncoderParams,
    w: &MatchParams,
    support: (&[&MolGraph], &[u8]),
    query: &[&MolGraph],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Tensor, AdaptedParams)> {
    let (sg, sy) = support;
    if sg.is_empty() || sg.len() != sy.len() {
        return Err(Error::EmptySupport);
    }
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let all: Vec<&MolGraph> = sg.iter().chain(query).copied().collect();
    let z = embed(&all, encoder)?;
    let zs = z.select(&(0..sg.len()).collect::<Vec<_>>());
    let zq = z.select(&(sg.len()..all.len()).collect::<Vec<_>>());
    let adapted = finetune_embedded("test", &zs, sy, w, model, cfg, seed)?;
    let (probs, _) = predict_from_embeddings(&zs, sy, &zq, &adapted.w)?;
    Ok((probs, adapted))
}

/// Inner-loop adaptation on a support set given its embeddings.
pub fn finetune_embedded(
    task_id: &str,
    zs: &MultiLevelEmbedding,
    sy: &[u8],
    w: &MatchParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AdaptedParams> {
    let (si, qi) = split_support(sy, cfg.support_split_fraction, derive_seed(seed, &[1]));
    let ys: Vec<u8> = si.iter().map(|&i| sy[i]).collect();
    let yq: Vec<u8> = qi.iter().map(|&i| sy[i]).collect();
    inner_adapt_embedded(
        task_id,
        &zs.select(&si),
        &ys,
        &zs.select(&qi),
        &yq,
        w,
        cfg.inner_lr,
        cfg.inner_steps,
        !model.fusion_bias,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::mol_from_smiles;
    use crate::synth::synth_generate;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 6,
            matcher_dropout: 0.0,
            ..Default::default()
        }
    }

    fn graphs(smiles: &[&str]) -> Vec<MolGraph> {
        smiles.iter().map(|s| mol_from_smiles(s).unwrap()).collect()
    }

    fn count(labels: &[u8], idx: &[usize], class: u8) -> usize {
        idx.iter().filter(|&&i| labels[i] == class).count()
    }

    #[test]
    fn split_is_stratified() {
        let y: Vec<u8> = (0..20).map(|i| u8::from(i < 10)).collect();
        let (s, q) = split_support(&y, 0.5, 3);
        assert_eq!((count(&y, &s, 1), count(&y, &s, 0)), (5, 5));
        assert_eq!((count(&y, &q, 1), count(&y, &q, 0)), (5, 5));
        assert_eq!(split_support(&y, 0.5, 3), (s, q));

        let y = [1, 1, 1, 0, 0, 0];
        let (s, q) = split_support(&y, 0.5, 0);
        assert_eq!((s.len(), q.len()), (3, 3));
        for side in [&s, &q] {
            assert!(count(&y, side, 1) >= 1 && count(&y, side, 0) >= 1);
        }

        let y = [1, 0, 0, 0];
        let (s, q) = split_support(&y, 0.5, 0);
        assert_eq!(count(&y, &s, 1), 1);
        assert_eq!(count(&y, &q, 1), 0);
    }

    fn toy_episode() -> (Vec<MolGraph>, Vec<u8>, Vec<MolGraph>, Vec<u8>) {
        let s = graphs(&["CCO", "CCCO", "CC", "CCC", "OCCO", "CCCC"]);
        let q = graphs(&["CO", "CCCCO", "C", "CCCCC"]);
        (s, vec![1, 1, 0, 0, 1, 0], q, vec![1, 1, 0, 0])
    }

    fn refs(v: &[MolGraph]) -> Vec<&MolGraph> {
        v.iter().collect()
    }

    #[test]
    fn zero_step_size_is_identity_and_theta_untouched() {
        let cfg = tiny_model();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let theta = p.encoder.clone();
        let (s, sy, q, qy) = toy_episode();
        let a = inner_adapt("t", &p.encoder, &p.matcher, (&refs(&s), &sy), (&refs(&q), &qy), 0.0, 3, false)
            .unwrap();
        assert_eq!(a.w, p.matcher);
        assert_eq!(p.encoder, theta);
    }

    #[test]
    fn one_step_matches_finite_differences() {
        let cfg = tiny_model();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let (s, sy, q, qy) = toy_episode();
        let alpha = 0.05;
        let a = inner_adapt("t", &p.encoder, &p.matcher, (&refs(&s), &sy), (&refs(&q), &qy), alpha, 1, false)
            .unwrap();
        let flat = p.matcher.flatten();
        let h = 1e-5;
        let loss_at = |x: &[f64]| {
            episode_loss((&refs(&q), &qy), (&refs(&s), &sy), &p.encoder, &p.matcher.with_flat(x)).unwrap()
        };
        let got = a.w.flatten();
        for i in 0..flat.len() {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += h;
            dn[i] -= h;
            let g = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let want = flat[i] - alpha * g;
            let step_got = flat[i] - got[i];
            let step_want = flat[i] - want;
            let rel = (step_got - step_want).abs() / step_got.abs().max(step_want.abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: {step_got} vs {step_want}");
            assert!((got[i] - want).abs() <= 1e-4 * want.abs().max(1e-6));
        }
    }

    #[test]
    fn inner_loss_decreases_on_separable_toy() {
        let cfg = tiny_model();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let (s, sy, q, qy) = toy_episode();
        let a = inner_adapt("t", &p.encoder, &p.matcher, (&refs(&s), &sy), (&refs(&q), &qy), 0.5, 5, false)
            .unwrap();
        assert!(a.final_loss < a.losses[0], "{:?} -> {}", a.losses, a.final_loss);
    }

    #[test]
    fn frozen_bias_stays_zero() {
        let cfg = ModelConfig {
            fusion_bias: false,
            ..tiny_model()
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let (s, sy, q, qy) = toy_episode();
        let a = inner_adapt("t", &p.encoder, &p.matcher, (&refs(&s), &sy), (&refs(&q), &qy), 0.5, 3, true)
            .unwrap();
        assert_eq!(a.w.bias, p.matcher.bias);
        assert_ne!(a.w.wo, p.matcher.wo);
    }

    #[test]
    fn episode_loss_reference_values() {
        let cfg = tiny_model();
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let (s, sy, q, qy) = toy_episode();
        // Zero fusion weights give uniform predictions.
        p.matcher.wo = Tensor::zeros(p.matcher.wo.shape());
        let l = episode_loss((&refs(&q), &qy), (&refs(&s), &sy), &p.encoder, &p.matcher).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // Hand instance: scores equal the support label mean at every layer
        // when Wq = 0, so logits are the same for both queries.
        p.matcher.wq = vec![Tensor::zeros(&[6, 6])];
        p.matcher.wo = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.0]]);
        p.matcher.bias = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let two_q = &refs(&q)[..2];
        let l = episode_loss((two_q, &[1, 0]), (&refs(&s), &sy), &p.encoder, &p.matcher).unwrap();
        let m: f64 = 0.5;
        let z0 = m * 1.0 + m * 0.5 + 0.1;
        let z1 = -m + 0.2;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let want = -(p0.ln()) - (1.0 - p0).ln();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            batch_tasks: 3,
            max_epochs: 2,
            inner_steps: 2,
            episode: EpisodeConfig {
                support_size: 6,
                query_size: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn meta_train_is_deterministic_and_lr_zero_is_identity() {
        let reg = synth_generate(4, 1, 20, 1).unwrap();
        let model = tiny_model();
        let cfg = small_train();
        let a = meta_train(&reg, &model, &cfg).unwrap();
        let b = meta_train(&reg, &model, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 2);
        assert!(a.log.iter().all(|e| e.mean_outer_loss.is_finite()));

        let two = meta_train(&reg, &model, &TrainConfig { workers: Some(2), ..cfg.clone() }).unwrap();
        assert_eq!(two.params, a.params);

        let frozen = TrainConfig {
            meta_lr: 0.0,
            ..cfg
        };
        let init = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(derive_seed(0, &[u64::MAX])));
        let c = meta_train(&reg, &model, &frozen).unwrap();
        assert_eq!(c.params, init);
    }

    #[test]
    fn single_task_batch_is_one_adam_step() {
        let reg = synth_generate(1, 0, 20, 5).unwrap();
        let model = tiny_model();
        let cfg = TrainConfig {
            batch_tasks: 1,
            max_epochs: 1,
            meta_lr: 0.01,
            ..small_train()
        };
        let init = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(derive_seed(0, &[u64::MAX])));
        let got = meta_train(&reg, &model, &cfg).unwrap().params;

        let seed = derive_seed(cfg.seed, &[1, 0]);
        let step = task_step(&reg.tasks[0], &init, &model, &cfg, seed).unwrap();
        // First Adam step: p − lr · g / (|g| + ε).
        let grads: Vec<&Tensor> = step.grads.named().into_iter().map(|(_, t)| t).collect();
        for (((_, p0), (_, p1)), g) in init.named().into_iter().zip(got.named()).zip(grads) {
            for ((a, b), d) in p0.data().iter().zip(p1.data()).zip(g.data()) {
                let want = a - 0.01 * d / (d.abs() + crate::optim::EPS);
                assert!((b - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn finetune_zero_steps_is_zero_shot_and_theta_untouched() {
        let model = tiny_model();
        let p = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(6));
        let theta = p.encoder.clone();
        let (s, sy, q, _) = toy_episode();
        let cfg = TrainConfig {
            inner_steps: 0,
            ..Default::default()
        };
        let tuned = finetune_and_predict(&p.encoder, &p.matcher, (&refs(&s), &sy), &refs(&q), &model, &cfg, 1)
            .unwrap();
        let zero = crate::matcher::predict(&refs(&s), &sy, &refs(&q), &p.encoder, &p.matcher).unwrap();
        assert_eq!(tuned, zero);

        let cfg = TrainConfig::default();
        let a = finetune_and_predict(&p.encoder, &p.matcher, (&refs(&s), &sy), &refs(&q), &model, &cfg, 9)
            .unwrap();
        let b = finetune_and_predict(&p.encoder, &p.matcher, (&refs(&s), &sy), &refs(&q), &model, &cfg, 9)
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, zero);
        assert_eq!(p.encoder, theta);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { inner_lr: 0.0, ..Default::default() },
            TrainConfig { inner_steps: 0, ..Default::default() },
            TrainConfig { support_split_fraction: 1.0, ..Default::default() },
            TrainConfig { batch_tasks: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}

//! Support–query attention at every encoder layer, and fusion of the
//! per-layer scores into class probabilities.
//!
//! At layer `l` each query molecule attends over the support molecules with
//! scaled dot-product scores; the attention-weighted support labels give a
//! score in `[0, 1]`. The `L` scores are concatenated and mapped through a
//! `L × 2` linear layer (plus bias) and a softmax. Column 0 of the output is
//! the positive class.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{embed, encode_multilevel, GraphBatch, MultiLevelEmbedding};
use crate::error::{Error, Result};
use crate::model::{EncoderParams, MatchParams, Matcher, ModelConfig, ModelParams};
use crate::smiles::MolGraph;

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `[N_q × 1]` attention-weighted support labels.
    pub score: Var,
    /// `[N_q × N_s]` attention weights before dropout.
    pub attention: Var,
}

/// Values of one layer's matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub score: Tensor,
    pub attention: Tensor,
}

/// Labels as an `[N × 1]` column.
pub fn label_column(labels: &[u8]) -> Tensor {
    Tensor::new(
        vec![labels.len(), 1],
        labels.iter().map(|&y| f64::from(y)).collect(),
    )
}

/// One-hot targets with the positive class first.
pub fn onehot(labels: &[u8]) -> Tensor {
    Tensor::new(
        vec![labels.len(), 2],
        labels
            .iter()
            .flat_map(|&y| if y == 1 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn match_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    zq: Var,
    zs: Var,
    support_labels: &Tensor,
    wq: Var,
    wk: Var,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<LayerOutput> {
    let n_s = g.value(zs).rows();
    if support_labels.is_empty() || n_s == 0 {
        return Err(Error::EmptySupport);
    }
    if support_labels.rows() != n_s {
        return Err(Error::Shape {
            op: "match_layer",
            left: g.shape(zs).to_vec(),
            right: support_labels.shape().to_vec(),
        });
    }
    let d = g.value(zq).cols() as f64;
    let q = g.matmul(zq, wq)?;
    let k = g.matmul(zs, wk)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let attention = g.softmax_rows(scores);
    let y = g.constant(support_labels.clone());
    let score = match rng {
        Some(r) => {
            let weights = g.dropout(attention, dropout, r);
            g.matmul(weights, y)?
        }
        None => {
            // Attention rows may sum to 1 + ulp; keep the score a probability.
            let raw = g.matmul(attention, y)?;
            g.clamp(raw, 0.0, 1.0)
        }
    };
    Ok(LayerOutput { score, attention })
}

/// Concat → dropout → affine → softmax. Returns `[N_q × 2]` probabilities.
pub fn fuse<R: Rng + ?Sized>(
    g: &mut Graph,
    scores: &[Var],
    wo: Var,
    bias: Var,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let layers = g.value(wo).rows();
    if scores.len() != layers {
        return Err(Error::LayerCount {
            expected: layers,
            got: scores.len(),
        });
    }
    let joint = g.concat_cols(scores)?;
    let joint = match rng {
        Some(r) => g.dropout(joint, dropout, r),
        None => joint,
    };
    let logits = g.matmul(joint, wo)?;
    let logits = g.add_row(logits, bias)?;
    Ok(g.softmax_rows(logits))
}

pub struct Prediction {
    pub probs: Var,
    pub layers: Vec<LayerOutput>,
}

/// Matching at every layer followed by fusion.
pub fn match_and_fuse<R: Rng + ?Sized>(
    g: &mut Graph,
    query: &[Var],
    support: &[Var],
    support_labels: &Tensor,
    w: &Matcher<Var>,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<Prediction> {
    if query.len() != support.len() || query.len() != g.value(w.wo).rows() {
        return Err(Error::LayerCount {
            expected: g.value(w.wo).rows(),
            got: query.len(),
        });
    }
    let mut layers = Vec::with_capacity(query.len());
    for (l, (&zq, &zs)) in query.iter().zip(support).enumerate() {
        let (&wq, &wk) = w.qk(l);
        layers.push(match_layer(
            g,
            zq,
            zs,
            support_labels,
            wq,
            wk,
            dropout,
            rng.as_deref_mut(),
        )?);
    }
    let scores: Vec<Var> = layers.iter().map(|o| o.score).collect();
    let probs = fuse(g, &scores, w.wo, w.bias, dropout, rng)?;
    Ok(Prediction { probs, layers })
}

/// Eval-mode prediction from precomputed embeddings.
pub fn predict_from_embeddings(
    support: &MultiLevelEmbedding,
    support_labels: &[u8],
    query: &MultiLevelEmbedding,
    w: &MatchParams,
) -> Result<(Tensor, Vec<LayerPrediction>)> {
    if support_labels.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut g = Graph::new();
    let wv = w.bind(&mut g, false);
    let zs: Vec<Var> = support.layers.iter().map(|z| g.constant(z.clone())).collect();
    let zq: Vec<Var> = query.layers.iter().map(|z| g.constant(z.clone())).collect();
    let pred = match_and_fuse::<rand_chacha::ChaCha8Rng>(
        &mut g,
        &zq,
        &zs,
        &label_column(support_labels),
        &wv,
        0.0,
        None,
    )?;
    let layers = pred
        .layers
        .iter()
        .map(|o| LayerPrediction {
            score: g.value(o.score).clone(),
            attention: g.value(o.attention).clone(),
        })
        .collect();
    Ok((g.value(pred.probs).clone(), layers))
}

/// Encodes support and query jointly, matches at every layer and fuses.
/// Eval mode: no dropout.
pub fn predict(
    support: &[&MolGraph],
    support_labels: &[u8],
    query: &[&MolGraph],
    encoder: &EncoderParams,
    w: &MatchParams,
) -> Result<Tensor> {
    predict_detailed(support, support_labels, query, encoder, w).map(|(p, _)| p)
}

pub fn predict_detailed(
    support: &[&MolGraph],
    support_labels: &[u8],
    query: &[&MolGraph],
    encoder: &EncoderParams,
    w: &MatchParams,
) -> Result<(Tensor, Vec<LayerPrediction>)> {
    if support.is_empty() || support.len() != support_labels.len() {
        return Err(Error::EmptySupport);
    }
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let all: Vec<&MolGraph> = support.iter().chain(query).copied().collect();
    let z = embed(&all, encoder)?;
    let s_idx: Vec<usize> = (0..support.len()).collect();
    let q_idx: Vec<usize> = (support.len()..all.len()).collect();
    predict_from_embeddings(&z.select(&s_idx), support_labels, &z.select(&q_idx), w)
}

/// Differentiable forward over a joint support ∪ query batch. Returns the
/// probability node. `rng` switches on training-mode dropout.
#[allow(clippy::too_many_arguments)]
pub fn forward_joint<R: Rng + ?Sized>(
    g: &mut Graph,
    support: &[&MolGraph],
    support_labels: &[u8],
    query: &[&MolGraph],
    theta: &crate::model::Encoder<Var>,
    w: &Matcher<Var>,
    cfg: &ModelConfig,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let batch = GraphBatch::new(support.iter().chain(query).copied());
    let z = encode_multilevel(g, &batch, theta, cfg.encoder_dropout, rng.as_deref_mut())?;
    let s_idx: Vec<usize> = (0..support.len()).collect();
    let q_idx: Vec<usize> = (support.len()..support.len() + query.len()).collect();
    let mut zs = Vec::with_capacity(z.len());
    let mut zq = Vec::with_capacity(z.len());
    for &zl in &z {
        zs.push(g.gather_rows(zl, &s_idx)?);
        zq.push(g.gather_rows(zl, &q_idx)?);
    }
    let pred = match_and_fuse(
        g,
        &zq,
        &zs,
        &label_column(support_labels),
        w,
        cfg.matcher_dropout,
        rng,
    )?;
    Ok(pred.probs)
}

/// Convenience wrapper over [`predict`] for a full parameter set.
pub fn predict_with(
    support: &[&MolGraph],
    support_labels: &[u8],
    query: &[&MolGraph],
    params: &ModelParams,
) -> Result<Tensor> {
    predict(support, support_labels, query, &params.encoder, &params.matcher)
}

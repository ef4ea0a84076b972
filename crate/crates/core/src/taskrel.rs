//! Task vectors, task relationship matrices and the implicit parameter
//! updates they drive.
//!
//! With a relation matrix `M`, task parameters move toward each other:
//! `w_i ← w_i + Σ_j M_ij (w_j − w_i)`, and a shared block moves by
//! `η Σ_i Σ_j M_ij (w_j − w_i)`.

use std::fmt;

use crate::autodiff::{softmax_rows, Tensor};
use crate::encoder::embed;
use crate::episodes::{sample_episode, TaskRecord};
use crate::error::{Error, Result};
use crate::meta::{finetune_embedded, TrainConfig};
use crate::model::{MatchParams, ModelConfig, ModelParams};
use crate::smiles::MolGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorMode {
    /// Flattened `w_τ − w` after inner adaptation on the support set.
    AdaptedDelta,
    /// Per-layer mean support embedding, concatenated over layers.
    MeanSupportEmbedding,
}

impl std::str::FromStr for VectorMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adapted-w-delta" => Ok(VectorMode::AdaptedDelta),
            "mean-support-embedding" => Ok(VectorMode::MeanSupportEmbedding),
            other => Err(format!("unknown task vector mode {other:?}")),
        }
    }
}

impl fmt::Display for VectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VectorMode::AdaptedDelta => "adapted-w-delta",
            VectorMode::MeanSupportEmbedding => "mean-support-embedding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Dot,
    Cosine,
    /// Negated squared distance.
    Euclidean,
}

impl std::str::FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot" => Ok(Kernel::Dot),
            "cosine" => Ok(Kernel::Cosine),
            "euclidean" => Ok(Kernel::Euclidean),
            other => Err(format!("unknown relation metric {other:?}")),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Dot => "dot",
            Kernel::Cosine => "cosine",
            Kernel::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub values: Vec<f64>,
    pub mode: VectorMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRelationMatrix {
    pub m: Tensor,
    pub metric: Kernel,
    pub task_ids: Vec<String>,
    pub normalized: bool,
}

impl TaskRelationMatrix {
    /// Row-wise softmax (temperature 1).
    pub fn row_normalized(&self) -> TaskRelationMatrix {
        TaskRelationMatrix {
            m: softmax_rows(&self.m),
            normalized: true,
            ..self.clone()
        }
    }
}

/// Builds the task vector of one sampled episode of `task`.
pub fn task_vector(
    task: &TaskRecord,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mode: VectorMode,
    seed: u64,
) -> Result<TaskVector> {
    let ep = sample_episode(
        task,
        cfg.episode.protocol,
        cfg.episode.support_size,
        cfg.episode.query_size,
        seed,
    )?;
    let support: Vec<&MolGraph> = ep.support_graphs();
    let z = embed(&support, &params.encoder)?;
    let values = match mode {
        VectorMode::AdaptedDelta => {
            let adapted =
                finetune_embedded(&task.id, &z, &ep.support_labels(), &params.matcher, model, cfg, seed)?;
            adapted
                .w
                .flatten()
                .iter()
                .zip(params.matcher.flatten())
                .map(|(a, b)| a - b)
                .collect()
        }
        VectorMode::MeanSupportEmbedding => z
            .layers
            .iter()
            .flat_map(|zl| {
                let n = zl.rows() as f64;
                (0..zl.cols()).map(move |j| (0..zl.rows()).map(|i| zl.get(i, j)).sum::<f64>() / n)
            })
            .collect(),
    };
    Ok(TaskVector {
        task_id: task.id.clone(),
        values,
        mode,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relation_matrix(vectors: &[TaskVector], metric: Kernel) -> Result<TaskRelationMatrix> {
    if vectors.len() < 2 {
        return Err(Error::Relation(format!(
            "need at least 2 task vectors, got {}",
            vectors.len()
        )));
    }
    let (mode, len) = (vectors[0].mode, vectors[0].values.len());
    if let Some(v) = vectors.iter().find(|v| v.mode != mode || v.values.len() != len) {
        return Err(Error::Relation(format!(
            "task {} has mode {} and length {}, expected {mode} and {len}",
            v.task_id,
            v.mode,
            v.values.len()
        )));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| dot(&v.values, &v.values).sqrt()).collect();
    if metric == Kernel::Cosine {
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroTaskVector(vectors[i].task_id.clone()));
        }
    }
    let n = vectors.len();
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let (a, b) = (&vectors[i].values, &vectors[j].values);
            let v = match metric {
                Kernel::Dot => dot(a, b),
                Kernel::Cosine if i == j => 1.0,
                Kernel::Cosine => (dot(a, b) / (norms[i] * norms[j])).clamp(-1.0, 1.0),
                Kernel::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>(),
            };
            m.data_mut()[i * n + j] = v;
            m.data_mut()[j * n + i] = v;
        }
    }
    Ok(TaskRelationMatrix {
        m,
        metric,
        task_ids: vectors.iter().map(|v| v.task_id.clone()).collect(),
        normalized: false,
    })
}

fn check_square(m: &Tensor, n: usize) -> Result<()> {
    if m.shape() != [n, n] {
        return Err(Error::Relation(format!(
            "relation matrix is {:?}, expected {n}×{n}",
            m.shape()
        )));
    }
    Ok(())
}

fn flatten_all(template: &MatchParams, ws: &[MatchParams]) -> Result<Vec<Vec<f64>>> {
    let shapes = |w: &MatchParams| -> Vec<Vec<usize>> {
        w.named().iter().map(|(_, t)| t.shape().to_vec()).collect()
    };
    let want = shapes(template);
    ws.iter()
        .enumerate()
        .map(|(i, w)| {
            if shapes(w) != want {
                return Err(Error::Relation(format!("parameter set {i} differs in shape")));
            }
            Ok(w.flatten())
        })
        .collect()
}

/// `w_k + Σ_j M_kj (w_j − w_k)` for every row `k` of `m`, with `base[k]`
/// standing in for the leading `w_k`.
fn pull(base: &[&[f64]], flat: &[Vec<f64>], m: &Tensor) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|k| {
            let mut out = base[k].to_vec();
            for (j, wj) in flat.iter().enumerate() {
                let c = m.get(k, j);
                if c != 0.0 {
                    for ((o, a), b) in out.iter_mut().zip(wj).zip(&flat[k]) {
                        *o += c * (a - b);
                    }
                }
            }
            out
        })
        .collect()
}

/// Simultaneous update `w_τ ← w_τ + Σ_j M_τj (w_j − w_τ)`.
pub fn implicit_inner_update(w_all: &[MatchParams], m: &Tensor) -> Result<Vec<MatchParams>> {
    if w_all.is_empty() {
        return Ok(Vec::new());
    }
    check_square(m, w_all.len())?;
    let flat = flatten_all(&w_all[0], w_all)?;
    let base: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
    Ok(pull(&base, &flat, m)
        .iter()
        .map(|v| w_all[0].with_flat(v))
        .collect())
}

/// `block + η Σ_i Σ_j M_ij (w_j − w_i)` on a block shaped like `w`.
pub fn implicit_outer_update(
    block: &MatchParams,
    w_all: &[MatchParams],
    m: &Tensor,
    eta: f64,
) -> Result<MatchParams> {
    if !eta.is_finite() {
        return Err(Error::Relation(format!("step size {eta} is not finite")));
    }
    check_square(m, w_all.len())?;
    let flat = flatten_all(block, w_all)?;
    let mut out = block.flatten();
    if eta == 0.0 {
        return Ok(block.clone());
    }
    for i in 0..flat.len() {
        for j in 0..flat.len() {
            let c = eta * m.get(i, j);
            if c != 0.0 {
                for ((o, a), b) in out.iter_mut().zip(&flat[j]).zip(&flat[i]) {
                    *o += c * (a - b);
                }
            }
        }
    }
    Ok(block.with_flat(&out))
}

/// Parameters for each test task: `w + Σ_k M_jk (w_k − w_j)`.
pub fn implicit_inference_update(
    w: &MatchParams,
    w_all_test: &[MatchParams],
    m_test: &Tensor,
) -> Result<Vec<MatchParams>> {
    check_square(m_test, w_all_test.len())?;
    let flat = flatten_all(w, w_all_test)?;
    let shared = w.flatten();
    let base: Vec<&[f64]> = vec![shared.as_slice(); flat.len()];
    Ok(pull(&base, &flat, m_test)
        .iter()
        .map(|v| w.with_flat(v))
        .collect())
}

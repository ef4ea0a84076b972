//! GIN encoder with per-layer mean pooling.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderParams, GinLayer};
use crate::smiles::{MolGraph, BOND_DIM};

/// Several molecules concatenated into one disconnected graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub atom_feats: Tensor,
    /// Directed message edges: both directions of every bond.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// One row per directed edge; `None` when the batch has no bonds.
    pub edge_feats: Option<Tensor>,
    /// Molecule index of every atom.
    pub segment: Vec<usize>,
    pub n_molecules: usize,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a MolGraph>) -> Self {
        let mut rows = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut edge_rows = Vec::new();
        let mut segment = Vec::new();
        let mut offset = 0;
        let mut n_molecules = 0;
        let mut width = 0;
        for (m, g) in graphs.into_iter().enumerate() {
            width = g.atom_feats.cols();
            rows.extend_from_slice(g.atom_feats.data());
            for (&(u, v), f) in g.bonds.iter().zip(&g.bond_feats) {
                src.extend([offset + u, offset + v]);
                dst.extend([offset + v, offset + u]);
                edge_rows.extend_from_slice(f);
                edge_rows.extend_from_slice(f);
            }
            segment.extend(std::iter::repeat(m).take(g.n_atoms()));
            offset += g.n_atoms();
            n_molecules += 1;
        }
        assert!(n_molecules > 0, "GraphBatch needs at least one molecule");
        let edge_feats = (!src.is_empty()).then(|| Tensor::new(vec![src.len(), BOND_DIM], edge_rows));
        GraphBatch {
            atom_feats: Tensor::new(vec![offset, width], rows),
            src,
            dst,
            edge_feats,
            segment,
            n_molecules,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.segment.len()
    }
}

/// Bond embeddings for every directed edge, shared by all layers.
pub fn edge_embeddings(g: &mut Graph, batch: &GraphBatch, bond_w: Var) -> Result<Option<Var>> {
    match &batch.edge_feats {
        Some(f) => {
            let feats = g.constant(f.clone());
            Ok(Some(g.matmul(feats, bond_w)?))
        }
        None => Ok(None),
    }
}

/// `MLP((1 + eps)·h_v + Σ_{u ∈ N(v)} (h_u + e_vu))` for every atom.
pub fn gin_layer(
    g: &mut Graph,
    h: Var,
    batch: &GraphBatch,
    edges: Option<Var>,
    params: &Encoder<Var>,
    layer: usize,
) -> Result<Var> {
    let GinLayer { w1, b1, w2, b2, eps } = params
        .layers
        .get(layer)
        .ok_or(Error::LayerOutOfRange {
            index: layer,
            layers: params.layers.len(),
        })?
        .clone();
    if g.value(h).rows() != batch.n_atoms() {
        return Err(Error::Shape {
            op: "gin_layer",
            left: g.shape(h).to_vec(),
            right: vec![batch.n_atoms()],
        });
    }
    let scaled = g.mul_scalar(h, eps)?;
    let mut pre = g.add(h, scaled)?;
    if let Some(e) = edges {
        let neighbours = g.gather_rows(h, &batch.src)?;
        let messages = g.add(neighbours, e)?;
        let agg = g.scatter_add_rows(messages, &batch.dst, batch.n_atoms())?;
        pre = g.add(pre, agg)?;
    }
    let x = g.matmul(pre, w1)?;
    let x = g.add_row(x, b1)?;
    let x = g.relu(x);
    let x = g.matmul(x, w2)?;
    g.add_row(x, b2)
}

/// Per-layer molecule embeddings z⁽¹⁾..z⁽ᴸ⁾, each `[n_molecules × d]`.
pub fn encode_multilevel<R: Rng + ?Sized>(
    g: &mut Graph,
    batch: &GraphBatch,
    params: &Encoder<Var>,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    let x = g.constant(batch.atom_feats.clone());
    let h = g.matmul(x, params.input_w)?;
    let mut h = g.add_row(h, params.input_b)?;
    let edges = edge_embeddings(g, batch, params.bond_w)?;
    let mut pooled = Vec::with_capacity(params.layers.len());
    for layer in 0..params.layers.len() {
        h = gin_layer(g, h, batch, edges, params, layer)?;
        if let Some(r) = rng.as_deref_mut() {
            h = g.dropout(h, dropout, r);
        }
        pooled.push(g.segment_mean(h, &batch.segment, batch.n_molecules)?);
    }
    Ok(pooled)
}

/// Per-layer embeddings as plain values (eval mode, no gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelEmbedding {
    pub layers: Vec<Tensor>,
}

impl MultiLevelEmbedding {
    pub fn n_molecules(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn select(&self, idx: &[usize]) -> MultiLevelEmbedding {
        MultiLevelEmbedding {
            layers: self.layers.iter().map(|z| z.select_rows(idx)).collect(),
        }
    }
}

pub fn embed(graphs: &[&MolGraph], params: &EncoderParams) -> Result<MultiLevelEmbedding> {
    if graphs.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let batch = GraphBatch::new(graphs.iter().copied());
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let z = encode_multilevel::<rand_chacha::ChaCha8Rng>(&mut g, &batch, &vars, 0.0, None)?;
    Ok(MultiLevelEmbedding {
        layers: z.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

//! Parameter containers and architecture settings shared by the encoder and
//! the matcher.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! holds values (`Tensor`), graph handles (`Var`) or gradients.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::smiles::{ATOM_DIM, BOND_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub encoder_dropout: f64,
    pub matcher_dropout: f64,
    /// One (W_q, W_k) pair for every layer; otherwise one pair per layer.
    pub share_qk: bool,
    /// Learnable fusion bias. When off, the bias stays at zero.
    pub fusion_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 5,
            hidden: 300,
            encoder_dropout: 0.0,
            matcher_dropout: 0.1,
            share_qk: true,
            fusion_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub eps: T,
}

/// Encoder parameters (θ).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub input_w: T,
    pub input_b: T,
    pub bond_w: T,
    pub layers: Vec<GinLayer<T>>,
}

/// Matching and fusion parameters (w).
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wo: T,
    pub bias: T,
}

pub type EncoderParams = Encoder<Tensor>;
pub type MatchParams = Matcher<Tensor>;

impl<T> Encoder<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Encoder<U> {
        Encoder {
            input_w: f(&self.input_w),
            input_b: f(&self.input_b),
            bond_w: f(&self.bond_w),
            layers: self
                .layers
                .iter()
                .map(|l| GinLayer {
                    w1: f(&l.w1),
                    b1: f(&l.b1),
                    w2: f(&l.w2),
                    b2: f(&l.b2),
                    eps: f(&l.eps),
                })
                .collect(),
        }
    }

    /// Leaves in a fixed order, paired with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("encoder.input.w".to_string(), &self.input_w),
            ("encoder.input.b".to_string(), &self.input_b),
            ("encoder.bond.w".to_string(), &self.bond_w),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.layer{i}.w1"), &l.w1));
            out.push((format!("encoder.layer{i}.b1"), &l.b1));
            out.push((format!("encoder.layer{i}.w2"), &l.w2));
            out.push((format!("encoder.layer{i}.b2"), &l.b2));
            out.push((format!("encoder.layer{i}.eps"), &l.eps));
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.input_w, &mut self.input_b, &mut self.bond_w];
        for l in &mut self.layers {
            out.extend([&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2, &mut l.eps]);
        }
        out
    }
}

impl<T> Matcher<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Matcher<U> {
        Matcher {
            wq: self.wq.iter().map(&mut f).collect(),
            wk: self.wk.iter().map(&mut f).collect(),
            wo: f(&self.wo),
            bias: f(&self.bias),
        }
    }

    /// Query/key projections used at a given layer.
    pub fn qk(&self, layer: usize) -> (&T, &T) {
        let i = if self.wq.len() == 1 { 0 } else { layer };
        (&self.wq[i], &self.wk[i])
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, w) in self.wq.iter().enumerate() {
            out.push((format!("matcher.wq{i}"), w));
        }
        for (i, w) in self.wk.iter().enumerate() {
            out.push((format!("matcher.wk{i}"), w));
        }
        out.push(("matcher.wo".to_string(), &self.wo));
        out.push(("matcher.bias".to_string(), &self.bias));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = self.wq.iter_mut().collect();
        out.extend(self.wk.iter_mut());
        out.push(&mut self.wo);
        out.push(&mut self.bias);
        out
    }
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        Encoder {
            input_w: uniform(&[ATOM_DIM, d], ATOM_DIM, rng),
            input_b: uniform(&[1, d], ATOM_DIM, rng),
            bond_w: uniform(&[BOND_DIM, d], BOND_DIM, rng),
            layers: (0..cfg.layers)
                .map(|_| GinLayer {
                    w1: uniform(&[d, d], d, rng),
                    b1: uniform(&[1, d], d, rng),
                    w2: uniform(&[d, d], d, rng),
                    b2: uniform(&[1, d], d, rng),
                    eps: Tensor::scalar(0.0),
                })
                .collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Encoder<Var> {
        self.map(|t| leaf(g, t, trainable))
    }
}

/// Scale of the identity the query/key projections start from.
pub const QK_INIT_SCALE: f64 = 3.0;

impl MatchParams {
    /// Structured start: `Wq = Wk = QK_INIT_SCALE · I` and every fusion row
    /// `[1/L, −1/L]`, so each layer initially votes for the class its
    /// attention favours. Random projections and random fusion signs leave
    /// attention near-uniform and let layers cancel each other.
    pub fn init(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let l = cfg.layers;
        let pairs = if cfg.share_qk { 1 } else { l };
        let qk = Tensor::eye(d).map(|v| v * QK_INIT_SCALE);
        let wo = (0..l).flat_map(|_| [1.0 / l as f64, -1.0 / l as f64]).collect();
        Matcher {
            wq: vec![qk.clone(); pairs],
            wk: vec![qk; pairs],
            wo: Tensor::new(vec![l, 2], wo),
            bias: Tensor::zeros(&[1, 2]),
        }
    }

    /// Uniform ±1/√fan_in entries everywhere except a zero bias.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let pairs = if cfg.share_qk { 1 } else { cfg.layers };
        let mut wq = Vec::with_capacity(pairs);
        let mut wk = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            wq.push(uniform(&[d, d], d, rng));
            wk.push(uniform(&[d, d], d, rng));
        }
        Matcher {
            wq,
            wk,
            wo: uniform(&[cfg.layers, 2], cfg.layers, rng),
            bias: Tensor::zeros(&[1, 2]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Matcher<Var> {
        self.map(|t| leaf(g, t, trainable))
    }

    /// All values concatenated in leaf order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`MatchParams::flatten`] using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> MatchParams {
        assert_eq!(flat.len(), self.numel(), "flat length mismatch");
        let mut out = self.clone();
        let mut at = 0;
        for t in out.leaves_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Encoder<Var> {
    pub fn grads(&self, grads: &Gradients) -> EncoderParams {
        self.map(|v| grad_of(grads, *v))
    }
}

impl Matcher<Var> {
    pub fn grads(&self, grads: &Gradients) -> MatchParams {
        self.map(|v| grad_of(grads, *v))
    }
}

fn grad_of(grads: &Gradients, v: Var) -> Tensor {
    grads
        .get(v)
        .cloned()
        .expect("gradient requested for a trainable leaf")
}

fn leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
    )
}

/// θ and w together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub matcher: MatchParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(cfg, rng);
        let matcher = MatchParams::init(cfg);
        ModelParams { encoder, matcher }
    }

    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = ModelParams::init(cfg, &mut rand::rngs::mock::StepRng::new(0, 0));
        for t in p.leaves_mut() {
            *t = Tensor::zeros(t.shape());
        }
        p
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.matcher.named());
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.leaves_mut();
        out.extend(self.matcher.leaves_mut());
        out
    }
}

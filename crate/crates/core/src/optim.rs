//! Adam and AdamW over a flat list of tensors.

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam keeps weight decay as an L2 term in the gradient; AdamW decays the
/// weights directly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Adam {
            kind,
            lr,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `frozen[i]` leaves parameter `i` untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], frozen: &[bool]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = match self.kind {
                    OptimizerKind::Adam => gj + self.weight_decay * *x,
                    OptimizerKind::AdamW => gj,
                };
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mut update = (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                if self.kind == OptimizerKind::AdamW {
                    update += self.weight_decay * *x;
                }
                *x -= self.lr * update;
            }
        }
    }
}

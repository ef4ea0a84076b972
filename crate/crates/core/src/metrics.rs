//! Ranking metrics and multi-seed aggregation.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, with ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    // Rank-sum with midranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision over the descending-score sweep. Equal scores keep
/// their input order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    if order
        .windows(2)
        .any(|w| scores[w[0]] == scores[w[1]] && labels[w[0]] != labels[w[1]])
    {
        log::warn!("tied scores across classes; average precision uses input order");
    }
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

pub fn base_rate(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64
}

/// AUPRC minus the fraction of positives.
pub fn delta_auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auprc(scores, labels)? - base_rate(labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    /// `std / sqrt(n)`; absent for a single value.
    pub se: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Metric("nothing to aggregate".into()));
    }
    // Sort first so the result does not depend on seed order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let (std, se) = if n >= 2 {
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        (Some(std), Some(std / (n as f64).sqrt()))
    } else {
        (None, None)
    };
    Ok(Summary { mean, std, se, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub task_id: String,
    pub support_size: usize,
    pub auroc: Vec<f64>,
    pub auprc: Vec<f64>,
    pub delta_auprc: Vec<f64>,
}

impl EvalResult {
    pub fn summaries(&self) -> Result<[Summary; 3]> {
        Ok([
            aggregate(&self.auroc)?,
            aggregate(&self.auprc)?,
            aggregate(&self.delta_auprc)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// All (positive, negative) pairs.
    fn auroc_pairs(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Precision at every recall step of a stable descending sort.
    fn ap_sweep(s: &[f64], y: &[u8]) -> f64 {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
        let p = y.iter().filter(|&&l| l == 1).count() as f64;
        let (mut prev_r, mut ap, mut tp) = (0.0, 0.0, 0.0);
        for (k, &i) in idx.iter().enumerate() {
            tp += f64::from(y[i]);
            let r = tp / p;
            ap += (r - prev_r) * tp / (k + 1) as f64;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn worked_example() {
        let s = [0.9, 0.8, 0.3];
        let y = [1, 0, 1];
        assert_eq!(auroc(&s, &y).unwrap(), 0.5);
        assert!((auprc(&s, &y).unwrap() - 5.0 / 6.0).abs() < 1e-10);
        assert!((delta_auprc(&s, &y).unwrap() - 1.0 / 6.0).abs() < 1e-10);
    }

    #[test]
    fn edge_rankings() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.0, 0.1, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(), 0.25);
        let perfect = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0];
        let y = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        assert_eq!(delta_auprc(&perfect, &y).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn exhaustive_small_inputs_match_definitions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for n in 1..=8usize {
            for pattern in 0u32..(1 << n) {
                let y: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
                let pos = y.iter().filter(|&&l| l == 1).count();
                for trial in 0..50 {
                    // Coarse scores in half the trials to exercise ties.
                    let s: Vec<f64> = (0..n)
                        .map(|_| {
                            if trial % 2 == 0 {
                                rng.gen_range(0..4) as f64 / 4.0
                            } else {
                                rng.gen()
                            }
                        })
                        .collect();
                    if pos > 0 && pos < n {
                        assert_eq!(auroc(&s, &y).unwrap(), auroc_pairs(&s, &y), "{s:?} {y:?}");
                    }
                    if pos > 0 {
                        let ap = auprc(&s, &y).unwrap();
                        assert!((ap - ap_sweep(&s, &y)).abs() <= 1e-15, "{s:?} {y:?}");
                        let d = delta_auprc(&s, &y).unwrap();
                        assert_eq!(d, ap - pos as f64 / n as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[0.7]).unwrap();
        assert_eq!((one.mean, one.se), (0.7, None));
        let two = aggregate(&[0.6, 0.8]).unwrap();
        assert!((two.mean - 0.7).abs() < 1e-15);
        assert!((two.se.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(aggregate(&[0.8, 0.6]).unwrap(), two);
        assert!(aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(
            s in proptest::collection::vec(-10.0f64..10.0, 2..20),
            bits in proptest::collection::vec(0u8..2, 2..20),
        ) {
            let n = s.len().min(bits.len());
            let (s, mut y) = (&s[..n], bits[..n].to_vec());
            y[0] = 1;
            y[1] = 0;
            let t: Vec<f64> = s.iter().map(|x| (x * 0.5).exp() + 3.0).collect();
            prop_assert!((auroc(s, &y).unwrap() - auroc(&t, &y).unwrap()).abs() < 1e-12);
            let d = delta_auprc(s, &y).unwrap();
            prop_assert!(d <= 1.0 - base_rate(&y) + 1e-12);
        }
    }
}

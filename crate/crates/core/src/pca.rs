//! Principal component projection by power iteration with deflation.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct Pca {
    /// `[n × k]` projected coordinates.
    pub projected: Tensor,
    /// `[k × d]` unit components, one per row.
    pub components: Tensor,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Metric(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Metric(format!(
            "k = {k} out of range for a {n}×{d} matrix"
        )));
    }
    let mut centered = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.data_mut()[i * d + j] -= mean;
        }
    }
    let mut cov = centered.transpose().matmul(&centered)?;
    for v in cov.data_mut() {
        *v /= (n - 1) as f64;
    }
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();

    let mut components = Vec::with_capacity(k * d);
    let mut eigenvalues = Vec::with_capacity(k);
    for c in 0..k {
        let (lambda, v) = power_iteration(&cov, c);
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                cov.data_mut()[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda.max(0.0));
        components.extend(v);
    }
    let components = Tensor::new(vec![k, d], components);
    let projected = centered.matmul(&components.transpose())?;
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(Pca {
        projected,
        components,
        eigenvalues,
        explained_variance_ratio,
    })
}

fn power_iteration(a: &Tensor, salt: usize) -> (f64, Vec<f64>) {
    let d = a.rows();
    // Deterministic, non-degenerate start.
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + ((i + 1) * (salt + 3)) as f64 * 0.618_033_988_749 % 1.0)
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITER {
        let mut w = vec![0.0; d];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let norm = normalize(&mut w);
        if norm < 1e-300 {
            // Remaining spectrum is zero; any unit vector orthogonal to the
            // deflated directions works, keep the current one.
            lambda = 0.0;
            break;
        }
        let delta = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        lambda = norm;
        if delta < PCA_TOL {
            break;
        }
    }
    // Sign convention: largest-magnitude coordinate positive.
    let big = v
        .iter()
        .copied()
        .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn line_has_one_component() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![2.0, 4.0],
            vec![-1.0, -2.0],
        ]);
        let p = pca_project(&x, 2).unwrap();
        assert!(p.explained_variance_ratio[1] < 1e-8);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Tensor::from_rows(&rows);
        let p = pca_project(&x, 3).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let d0: f64 = (0..3).map(|c| (x.get(i, c) - x.get(j, c)).powi(2)).sum();
                let d1: f64 = (0..3)
                    .map(|c| (p.projected.get(i, c) - p.projected.get(j, c)).powi(2))
                    .sum();
                assert!((d0 - d1).abs() < 1e-8);
            }
        }
        let c = &p.components;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        let r = &p.explained_variance_ratio;
        assert!(r.windows(2).all(|w| w[0] >= w[1]) && r.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn matches_dense_eigensolver() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![6, 4], data.clone());
            let p = pca_project(&x, 2).unwrap();

            let m = nalgebra::DMatrix::from_row_slice(6, 4, &data);
            let mean = m.row_mean();
            let c = nalgebra::DMatrix::from_fn(6, 4, |i, j| m[(i, j)] - mean[j]);
            let cov = c.transpose() * &c / 5.0;
            let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            assert!((p.eigenvalues[0] - eig[0]).abs() < 1e-8, "{:?} {:?}", p.eigenvalues, eig);
            assert!((p.eigenvalues[1] - eig[1]).abs() < 1e-8, "{:?} {:?}", p.eigenvalues, eig);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(pca_project(&x, 3).is_err());
        assert!(pca_project(&x, 0).is_err());
        assert!(pca_project(&Tensor::zeros(&[1, 2]), 1).is_err());
        let p = pca_project(&x, 2).unwrap();
        assert!(p.projected.data().iter().all(|v| *v == 0.0));
    }
}

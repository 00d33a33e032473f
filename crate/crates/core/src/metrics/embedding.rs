use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MetricError, Result};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Retrieval hit rates `[top1, top2, top3]`.
///
/// Trial `k` queries motion `k mod n` against its own text and `pool - 1` distinct
/// random distractor texts, ranked by Euclidean distance; a distractor at exactly
/// the true distance does not outrank it.
pub fn r_precision(motion: &[Vec<f64>], text: &[Vec<f64>], pool: usize, trials: usize, seed: u64) -> Result<[f64; 3]> {
    let n = motion.len();
    if text.len() != n {
        return Err(MetricError::Mismatch {
            what: "motion and text embeddings",
            left: n,
            right: text.len(),
        });
    }
    if pool < 2 || n < pool {
        return Err(MetricError::TooFew {
            what: "R-precision pairs",
            have: n,
            need: pool.max(2),
        });
    }
    if trials == 0 {
        return Err(MetricError::TooFew {
            what: "R-precision trials",
            have: 0,
            need: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = [0usize; 3];
    for k in 0..trials {
        let q = k % n;
        let own = euclidean(&motion[q], &text[q]);
        let mut closer = 0;
        for d in sample(&mut rng, n - 1, pool - 1) {
            let j = if d >= q { d + 1 } else { d };
            if euclidean(&motion[q], &text[j]) < own {
                closer += 1;
            }
        }
        for (top, h) in hits.iter_mut().enumerate() {
            if closer <= top {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / trials as f64))
}

fn moments(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let e = x[0].len();
    let m = DMatrix::from_fn(n, e, |i, j| x[i][j]);
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix; negative eigenvalues
/// down to `-1e-8` (relative to the spectrum) are treated as zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetric(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(worst) = eig.eigenvalues.iter().copied().find(|v| *v < -1e-8 * scale) {
        return Err(MetricError::MatrixRoot { residual: worst.abs() });
    }
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    let residual = (&s * &s - symmetric(m)).norm() / m.norm().max(1.0);
    if residual > 1e-6 {
        return Err(MetricError::MatrixRoot { residual });
    }
    Ok(s)
}

/// Fréchet distance between Gaussian fits (sample covariance) of two embedding sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let e = a.first().map(Vec::len).unwrap_or(0);
    for (set, what) in [(a, "first FID set"), (b, "second FID set")] {
        if set.len() < e + 1 || e == 0 {
            return Err(MetricError::TooFew {
                what,
                have: set.len(),
                need: e.max(1) + 1,
            });
        }
        if set.iter().any(|v| v.len() != e) {
            return Err(MetricError::Mismatch {
                what: "embedding dimensions",
                left: e,
                right: set.iter().map(Vec::len).find(|&l| l != e).unwrap_or(e),
            });
        }
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    // tr((AB)^1/2) equals tr((A^1/2 B A^1/2)^1/2), whose argument is symmetric.
    let ra = psd_sqrt(&cov_a)?;
    let inner = psd_sqrt(&(&ra * &cov_b * &ra))?;
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * inner.trace();
    Ok(d.max(0.0))
}

/// Mean distance between each motion embedding and its paired text embedding.
pub fn mm_dist(motion: &[Vec<f64>], text: &[Vec<f64>]) -> Result<f64> {
    if motion.len() != text.len() || motion.is_empty() {
        return Err(MetricError::Mismatch {
            what: "MM-Dist pairs",
            left: motion.len(),
            right: text.len(),
        });
    }
    Ok(motion.iter().zip(text).map(|(m, t)| euclidean(m, t)).sum::<f64>() / motion.len() as f64)
}

/// Mean distance between element-matched members of two disjoint seeded subsets of size `subset`.
pub fn diversity(embeds: &[Vec<f64>], subset: usize, seed: u64) -> Result<f64> {
    if subset == 0 || embeds.len() < 2 * subset {
        return Err(MetricError::TooFew {
            what: "Diversity samples",
            have: embeds.len(),
            need: 2 * subset.max(1),
        });
    }
    let picks = sample(&mut ChaCha8Rng::seed_from_u64(seed), embeds.len(), 2 * subset).into_vec();
    let (first, second) = picks.split_at(subset);
    Ok(first
        .iter()
        .zip(second)
        .map(|(&i, &j)| euclidean(&embeds[i], &embeds[j]))
        .sum::<f64>()
        / subset as f64)
}

/// Mean over groups of the mean pairwise distance within each group.
pub fn mmodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return Err(MetricError::TooFew {
            what: "MModality generations per caption",
            have: groups.iter().map(Vec::len).min().unwrap_or(0),
            need: 2,
        });
    }
    let per_group = groups.iter().map(|g| {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                sum += euclidean(&g[i], &g[j]);
                count += 1;
            }
        }
        sum / count as f64
    });
    Ok(per_group.sum::<f64>() / groups.len() as f64)
}

/// Standard-normal vectors, for baselines and tests.
pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn oracle_retrieval_is_perfect() {
        let text = random_embeddings(40, 8, 1);
        let r = r_precision(&text, &text, 32, 200, 0).unwrap();
        assert_eq!(r, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn random_retrieval_is_chance() {
        let m = random_embeddings(200, 16, 2);
        let t = random_embeddings(200, 16, 3);
        let r = r_precision(&m, &t, 32, 10_000, 4).unwrap();
        assert!((r[0] - 1.0 / 32.0).abs() <= 0.01, "{r:?}");
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }

    #[test]
    fn retrieval_needs_a_full_pool() {
        let m = random_embeddings(10, 4, 2);
        let e = r_precision(&m, &m, 32, 10, 0).unwrap_err().to_string();
        assert!(e.contains("10") && e.contains("32"), "{e}");
    }

    #[test]
    fn fid_closed_forms() {
        let x = random_embeddings(50, 4, 5);
        assert!(fid(&x, &x).unwrap() <= 1e-8);
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![1.0], vec![3.0]];
        assert!((fid(&a, &b).unwrap() - 1.0).abs() <= 1e-9);
        let y = random_embeddings(60, 4, 6);
        assert!((fid(&x, &y).unwrap() - fid(&y, &x).unwrap()).abs() <= 1e-9);
        assert!(fid(&x[..3], &y).is_err());
    }

    #[test]
    fn fid_orders_noise_below_shift() {
        let x = random_embeddings(100, 4, 7);
        let noise = random_embeddings(100, 4, 8);
        let noisy: Vec<Vec<f64>> = x
            .iter()
            .zip(&noise)
            .map(|(a, n)| a.iter().zip(n).map(|(p, q)| p + 0.01 * q).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = x.iter().map(|a| a.iter().map(|p| p + 3.0).collect()).collect();
        assert!(fid(&x, &noisy).unwrap() < fid(&x, &shifted).unwrap());
    }

    #[test]
    fn distances_degenerate_cases() {
        let same = vec![vec![1.0, 2.0]; 70];
        assert_eq!(mm_dist(&same, &same).unwrap(), 0.0);
        assert_eq!(diversity(&same, 30, 0).unwrap(), 0.0);
        assert_eq!(mmodality(&[same[..8].to_vec(), same[..8].to_vec()]).unwrap(), 0.0);
        assert!(diversity(&same[..59], 30, 0).is_err());
        assert!(mmodality(&[same[..1].to_vec()]).is_err());
    }

    #[test]
    fn diversity_is_stable_under_duplication() {
        let x = random_embeddings(100, 8, 9);
        let doubled: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let avg = |e: &[Vec<f64>]| (0..200).map(|s| diversity(e, 30, s).unwrap()).sum::<f64>() / 200.0;
        let (a, b) = (avg(&x), avg(&doubled));
        assert!((a - b).abs() / a <= 0.05, "{a} vs {b}");
    }

    proptest! {
        #[test]
        fn precision_is_nested(seed in 0u64..1000) {
            let m = random_embeddings(40, 3, seed);
            let t = random_embeddings(40, 3, seed + 1);
            let r = r_precision(&m, &t, 32, 50, seed).unwrap();
            prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn fid_is_nonnegative_and_symmetric(seed in 0u64..1000) {
            let a = random_embeddings(12, 3, seed);
            let b = random_embeddings(15, 3, seed + 7);
            let ab = fid(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - fid(&b, &a).unwrap()).abs() <= 1e-9);
        }
    }
}

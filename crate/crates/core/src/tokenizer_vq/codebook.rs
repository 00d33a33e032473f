use rand::Rng;

use super::{Result, VqError};
use crate::tensor::Tensor;

/// `K x d` code table maintained by exponential moving averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codes: Tensor,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Vec<f64>,
    /// Assignments per code within the current reset window.
    pub usage: Vec<u64>,
    pub decay: f64,
}

impl Codebook {
    /// Starts every accumulator at count 1 with its sum equal to the code.
    pub fn from_codes(codes: Tensor, decay: f64) -> Result<Self> {
        if codes.shape.len() != 2 || codes.shape[0] == 0 {
            return Err(VqError::Shape(format!(
                "codebook needs a non-empty K x d table, got {:?}",
                codes.shape
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(VqError::Config(format!("decay {decay} outside [0, 1)")));
        }
        let k = codes.shape[0];
        Ok(Self {
            ema_counts: vec![1.0; k],
            ema_sums: codes.values.clone(),
            usage: vec![0; k],
            codes,
            decay,
        })
    }

    /// Codes drawn uniformly (with replacement) from a batch of latents.
    pub fn init_from_latents<R: Rng>(k: usize, latents: &Tensor, decay: f64, rng: &mut R) -> Result<Self> {
        let (n, d) = (latents.rows(), latents.cols());
        if n == 0 || latents.is_empty() {
            return Err(VqError::EmptyBatch);
        }
        let mut values = Vec::with_capacity(k * d);
        for _ in 0..k {
            values.extend_from_slice(latents.row(rng.gen_range(0..n)));
        }
        Self::from_codes(Tensor { shape: vec![k, d], values }, decay)
    }

    pub fn size(&self) -> usize {
        self.codes.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape[1]
    }

    /// Nearest code per latent row (squared Euclidean distance, lowest index on ties).
    pub fn quantize(&self, latents: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let d = self.dim();
        if latents.cols() != d || latents.shape.len() != 2 {
            return Err(VqError::Shape(format!(
                "latents {:?} do not match codebook dimension {d}",
                latents.shape
            )));
        }
        let k = self.size();
        let mut indices = Vec::with_capacity(latents.rows());
        let mut values = Vec::with_capacity(latents.len());
        for t in 0..latents.rows() {
            let z = latents.row(t);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let code = self.codes.row(c);
                let dist: f64 = z.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            indices.push(best);
            values.extend_from_slice(self.codes.row(best));
        }
        Ok((
            indices,
            Tensor {
                shape: latents.shape.clone(),
                values,
            },
        ))
    }

    /// Code rows for a token sequence; rejects out-of-range indices.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let k = self.size();
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        for (position, &index) in indices.iter().enumerate() {
            if index >= k {
                return Err(VqError::TokenRange { position, index, k });
            }
            values.extend_from_slice(self.codes.row(index));
        }
        Ok(Tensor {
            shape: vec![indices.len(), d],
            values,
        })
    }

    /// Moving-average update of counts and sums from one batch of assignments,
    /// then `codes = sums / (counts + 1e-6)`. Also accumulates window usage.
    pub fn ema_update(&mut self, latents: &Tensor, assignments: &[usize]) -> Result<()> {
        if assignments.is_empty() {
            return Err(VqError::EmptyBatch);
        }
        let (k, d) = (self.size(), self.dim());
        if latents.rows() != assignments.len() || latents.cols() != d {
            return Err(VqError::Shape(format!(
                "{} assignments for latents {:?}",
                assignments.len(),
                latents.shape
            )));
        }
        let mut n = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (t, &a) in assignments.iter().enumerate() {
            if a >= k {
                return Err(VqError::TokenRange { position: t, index: a, k });
            }
            n[a] += 1.0;
            self.usage[a] += 1;
            for (s, z) in sums[a * d..(a + 1) * d].iter_mut().zip(latents.row(t)) {
                *s += z;
            }
        }
        let g = self.decay;
        for (c, &nc) in n.iter().enumerate() {
            self.ema_counts[c] = g * self.ema_counts[c] + (1.0 - g) * nc;
            let denom = self.ema_counts[c] + 1e-6;
            for j in 0..d {
                let i = c * d + j;
                self.ema_sums[i] = g * self.ema_sums[i] + (1.0 - g) * sums[i];
                self.codes.values[i] = self.ema_sums[i] / denom;
            }
        }
        Ok(())
    }

    /// Replaces every code used fewer than `threshold` times in the current window
    /// by a uniformly drawn batch latent, then clears window usage. Returns the count replaced.
    pub fn reset_dead_codes<R: Rng>(&mut self, latents: &Tensor, threshold: u64, rng: &mut R) -> Result<usize> {
        let n = latents.rows();
        if n == 0 || latents.is_empty() {
            return Err(VqError::EmptyBatch);
        }
        let d = self.dim();
        if latents.cols() != d {
            return Err(VqError::Shape(format!("latents {:?} vs code dimension {d}", latents.shape)));
        }
        let mut replaced = 0;
        for c in 0..self.size() {
            if self.usage[c] < threshold {
                let z = latents.row(rng.gen_range(0..n));
                self.codes.values[c * d..(c + 1) * d].copy_from_slice(z);
                self.ema_sums[c * d..(c + 1) * d].copy_from_slice(z);
                self.ema_counts[c] = 1.0;
                replaced += 1;
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        Ok(replaced)
    }
}

/// `exp(entropy)` of a code-usage histogram.
pub fn perplexity(indices: &[usize], k: usize) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i.min(k - 1)] += 1;
    }
    let n = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let cb = Codebook::from_codes(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]), 0.99).unwrap();
        let (i, q) = cb.quantize(&t(&[1, 2], &[0.2, 0.1])).unwrap();
        assert_eq!(i, vec![0]);
        assert_eq!(q.values, vec![0.0, 0.0]);
        let (i, q) = cb.quantize(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!((i, q.values), (vec![1], vec![1.0, 1.0]));
        let (i, _) = cb.quantize(&t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert_eq!(i, vec![0]);
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let cb = Codebook::from_codes(t(&[2, 1], &[0.0, 1.0]), 0.9).unwrap();
        let e = cb.lookup(&[1, 0, 2]).unwrap_err().to_string();
        assert!(e.contains("position 2") && e.contains("index 2"), "{e}");
    }

    #[test]
    fn ema_locality_and_zero_decay() {
        let mut cb = Codebook::from_codes(t(&[3, 2], &[0.0, 0.0, 5.0, 5.0, -5.0, 1.0]), 0.5).unwrap();
        let before = cb.clone();
        cb.ema_update(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &[0, 0]).unwrap();
        assert_eq!(cb.ema_counts[0], 0.5 + 0.5 * 2.0);
        for c in 1..3 {
            assert_eq!(cb.ema_counts[c], 0.5 * before.ema_counts[c]);
            for j in 0..2 {
                assert!((cb.codes.values[c * 2 + j] - before.codes.values[c * 2 + j]).abs() < 1e-5);
            }
        }

        let mut cb = Codebook::from_codes(t(&[2, 2], &[0.0, 0.0, 9.0, 9.0]), 0.0).unwrap();
        cb.ema_update(&t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]), &[1, 1]).unwrap();
        // mean of (1,2) and (3,6) is (2,4); the 1e-6 guard perturbs it by ~2e-6
        assert!((cb.codes.values[2] - 2.0).abs() < 1e-5);
        assert!((cb.codes.values[3] - 4.0).abs() < 1e-5);
        assert!(cb.ema_update(&t(&[0, 2], &[]), &[]).is_err());
    }

    #[test]
    fn dead_codes_are_replaced_by_batch_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::from_codes(t(&[3, 2], &[0.0, 0.0, 50.0, 50.0, 60.0, 60.0]), 0.99).unwrap();
        let batch = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        for _ in 0..256 {
            cb.ema_update(&batch, &[0, 0]).unwrap();
        }
        let replaced = cb.reset_dead_codes(&batch, 1, &mut rng).unwrap();
        assert_eq!(replaced, 2);
        for c in 1..3 {
            let row = cb.codes.row(c);
            assert!(row == batch.row(0) || row == batch.row(1));
        }
        assert!(cb.usage.iter().all(|&u| u == 0));
    }

    #[test]
    fn perplexity_of_uniform_usage() {
        let idx: Vec<usize> = (0..64).map(|i| i % 16).collect();
        assert!((perplexity(&idx, 512) - 16.0).abs() < 1e-9);
        assert!((perplexity(&[3, 3, 3], 8) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantizer_is_optimal_and_idempotent(
            codes in proptest::collection::vec(-2.0f64..2.0, 24),
            z in proptest::collection::vec(-3.0f64..3.0, 15),
        ) {
            let cb = Codebook::from_codes(t(&[8, 3], &codes), 0.99).unwrap();
            let lat = t(&[5, 3], &z);
            let (idx, q) = cb.quantize(&lat).unwrap();
            for r in 0..5 {
                let dq: f64 = lat.row(r).iter().zip(q.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
                for c in 0..8 {
                    let dc: f64 = lat.row(r).iter().zip(cb.codes.row(c)).map(|(a, b)| (a - b).powi(2)).sum();
                    prop_assert!(dq <= dc);
                }
            }
            let (again, _) = cb.quantize(&q).unwrap();
            prop_assert_eq!(again, idx);
        }
    }
}

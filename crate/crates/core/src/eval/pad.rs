//! Proxy A-distance from a linear domain classifier.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

pub const PAD_MIN_SAMPLES: usize = 20;
pub const PAD_EPOCHS: usize = 500;
pub const PAD_LR: f64 = 0.1;

fn split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// Whitening map fitted on `rows`: `x -> L^{-1} (x - mean)` with
/// `L L^T = cov + ridge I`.
struct Whitener {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
}

impl Whitener {
    fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        let scale = (cov.trace() / d as f64).max(1e-300);
        let mut ridge = 1e-8 * scale;
        loop {
            let m = &cov + DMatrix::identity(d, d) * ridge;
            if let Some(ch) = m.cholesky() {
                return Self {
                    mean,
                    chol_l: ch.l(),
                };
            }
            ridge *= 10.0;
        }
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        let c = DVector::from_column_slice(x) - &self.mean;
        self.chol_l
            .solve_lower_triangular(&c)
            .expect("cholesky factor is invertible")
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `2 (1 - 2 eps)` clamped to `[0, 2]`, where `eps` is the held-out error of
/// a logistic-regression domain classifier. Each domain is split 50/50
/// (seeded); features are whitened on the training halves; the classifier
/// starts at zero and runs full-batch gradient descent.
pub fn proxy_a_distance(fs: &[Vec<f64>], ft: &[Vec<f64>], seed: u64) -> Result<f64, EvalError> {
    for (domain, n) in [("source", fs.len()), ("target", ft.len())] {
        if n < PAD_MIN_SAMPLES {
            return Err(EvalError::InsufficientSamples {
                domain,
                n,
                min: PAD_MIN_SAMPLES,
            });
        }
    }
    let d = fs[0].len();
    if fs.iter().chain(ft).any(|r| r.len() != d) || d == 0 {
        return Err(EvalError::Shape(
            "feature rows must share one non-zero width".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_train, s_test) = split(fs.len(), &mut rng);
    let (t_train, t_test) = split(ft.len(), &mut rng);

    let train_rows: Vec<(&[f64], f64)> = s_train
        .iter()
        .map(|&i| (fs[i].as_slice(), 0.0))
        .chain(t_train.iter().map(|&i| (ft[i].as_slice(), 1.0)))
        .collect();
    let test_rows: Vec<(&[f64], f64)> = s_test
        .iter()
        .map(|&i| (fs[i].as_slice(), 0.0))
        .chain(t_test.iter().map(|&i| (ft[i].as_slice(), 1.0)))
        .collect();
    let whitener = Whitener::fit(&train_rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let xs: Vec<DVector<f64>> = train_rows.iter().map(|r| whitener.apply(r.0)).collect();
    let ys: Vec<f64> = train_rows.iter().map(|r| r.1).collect();

    let n = xs.len() as f64;
    let mut w = DVector::zeros(d);
    let mut b = 0.0;
    for _ in 0..PAD_EPOCHS {
        let mut gw = DVector::zeros(d);
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let r = sigmoid(w.dot(x) + b) - y;
            gw.axpy(r, x, 1.0);
            gb += r;
        }
        w.axpy(-PAD_LR / n, &gw, 1.0);
        b -= PAD_LR * gb / n;
    }
    let errors = test_rows
        .iter()
        .filter(|(x, y)| {
            let pred = if w.dot(&whitener.apply(x)) + b > 0.0 {
                1.0
            } else {
                0.0
            };
            pred != *y
        })
        .count();
    let eps = errors as f64 / test_rows.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| nd.sample(&mut rng) + if j == 0 { shift } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let a = cloud(19, 3, 0.0, 1);
        let b = cloud(50, 3, 0.0, 2);
        assert!(matches!(
            proxy_a_distance(&a, &b, 0),
            Err(EvalError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn separated_and_identical() {
        let pad = proxy_a_distance(&cloud(500, 4, 0.0, 1), &cloud(500, 4, 10.0, 2), 7).unwrap();
        assert!(pad >= 1.9, "{pad}");
        let pad = proxy_a_distance(&cloud(500, 4, 0.0, 3), &cloud(500, 4, 0.0, 4), 7).unwrap();
        assert!(pad <= 0.3, "{pad}");
    }

    #[test]
    fn repeated_calls_agree_bitwise() {
        let a = cloud(60, 3, 0.0, 1);
        let b = cloud(60, 3, 1.0, 2);
        assert_eq!(
            proxy_a_distance(&a, &b, 5).unwrap().to_bits(),
            proxy_a_distance(&a, &b, 5).unwrap().to_bits()
        );
    }
}

//! Exact earth mover's distance between equal-size, equal-weight point sets
//! via the Hungarian algorithm.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest set size solved exactly; larger inputs are subsampled.
pub const EMD_MAX_POINTS: usize = 256;

/// Minimum-cost perfect matching on a square cost matrix (row-major `n x n`).
/// Returns `assignment[row] = column` and the total cost. `O(n^3)`.
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // potentials over 1-based rows/columns, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean transport cost of the optimal one-to-one matching, Euclidean ground
/// distance. Sets with unequal sizes, or more than [`EMD_MAX_POINTS`] points,
/// are subsampled (seeded) to a common size.
pub fn emd(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> f64 {
    let n = a.len().min(b.len()).min(EMD_MAX_POINTS);
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        if set.len() == n {
            set.to_vec()
        } else {
            let mut idx = sample(&mut rng, set.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| set[i].clone()).collect()
        }
    };
    let (sa, sb) = (pick(a), pick(b));
    assert_eq!(sa.len(), sb.len());
    let mut cost = Vec::with_capacity(n * n);
    for x in &sa {
        for y in &sb {
            cost.push(euclid(x, y));
        }
    }
    hungarian(&cost, n).1 / n as f64
}

//! Correlation and regression utilities for the factor study: Pearson r,
//! OLS R-squared via normal equations, Spearman rank correlation, and a
//! permutation test for correlation significance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::StatsError;

const RIDGE_JITTER: f64 = 1e-10;

fn check_pair(xs: &[f64], ys: &[f64], need: usize) -> Result<(), StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < need {
        return Err(StatsError::TooFew {
            need,
            got: xs.len(),
        });
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    check_pair(xs, ys, 3)?;
    if is_constant(xs) || is_constant(ys) {
        return Err(StatsError::ConstantInput);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Solves the symmetric system A b = c by Gaussian elimination with partial
/// pivoting. A is (k x k) row-major.
fn solve(mut a: Vec<f64>, mut c: Vec<f64>, k: usize) -> Result<Vec<f64>, StatsError> {
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| {
                a[i * k + col]
                    .abs()
                    .partial_cmp(&a[j * k + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * k + col].abs() < 1e-300 {
            return Err(StatsError::Singular);
        }
        if pivot != col {
            for j in 0..k {
                a.swap(col * k + j, pivot * k + j);
            }
            c.swap(col, pivot);
        }
        for row in (col + 1)..k {
            let f = a[row * k + col] / a[col * k + col];
            for j in col..k {
                a[row * k + j] -= f * a[col * k + j];
            }
            c[row] -= f * c[col];
        }
    }
    let mut b = vec![0.0; k];
    for col in (0..k).rev() {
        let mut s = c[col];
        for j in (col + 1)..k {
            s -= a[col * k + j] * b[j];
        }
        b[col] = s / a[col * k + col];
    }
    Ok(b)
}

/// R-squared of the ordinary-least-squares fit y = X beta + intercept,
/// computed by normal equations with a small ridge jitter for conditioning.
/// `x` is row-major (n rows, k columns).
pub fn ols_r2(x: &[f64], y: &[f64], k: usize) -> Result<f64, StatsError> {
    let n = y.len();
    if k == 0 || x.len() != n * k {
        return Err(StatsError::LengthMismatch(x.len(), n * k));
    }
    if n <= k + 1 {
        return Err(StatsError::TooFew { need: k + 2, got: n });
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|&v| (v - my) * (v - my)).sum();
    if sst == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    // augmented design with an intercept column
    let p = k + 1;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let cell = |row: usize, col: usize| if col < k { x[row * k + col] } else { 1.0 };
    for row in 0..n {
        for i in 0..p {
            xty[i] += cell(row, i) * y[row];
            for j in 0..p {
                xtx[i * p + j] += cell(row, i) * cell(row, j);
            }
        }
    }
    for i in 0..p {
        xtx[i * p + i] += RIDGE_JITTER;
    }
    let beta = solve(xtx, xty, p)?;
    let mut ssr = 0.0;
    for row in 0..n {
        let pred: f64 = (0..p).map(|i| beta[i] * cell(row, i)).sum();
        ssr += (y[row] - pred) * (y[row] - pred);
    }
    Ok(1.0 - ssr / sst)
}

/// Average rank with ties sharing the mean of their rank range.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson on the rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    check_pair(xs, ys, 3)?;
    pearson(&ranks(xs), &ranks(ys))
}

/// Two-sided permutation p-value for the Pearson correlation: fraction of
/// label shuffles whose |r| reaches the observed |r|.
pub fn permutation_p_value(
    xs: &[f64],
    ys: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    let observed = pearson(xs, ys)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ys.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        // a permuted copy of a nonconstant vector stays nonconstant
        if pearson(xs, &shuffled)?.abs() >= observed - 1e-15 {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_perm + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pearson_exact_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.981_980_506_061_965_8).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance_sign() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let up: Vec<f64> = xs.iter().map(|x| 3.0 * x + 2.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -0.5 * x + 1.0).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ConstantInput)
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(StatsError::TooFew { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(..))
        ));
    }

    #[test]
    fn ols_perfect_fit() {
        // y = 2 x1 - x2 + 3
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            x.extend_from_slice(&[a, b]);
            y.push(2.0 * a - b + 3.0);
        }
        let r2 = ols_r2(&x, &y, 2).unwrap();
        assert!((r2 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ols_noise_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r2 = ols_r2(&x, &y, 2).unwrap();
        assert!(r2 < 0.1, "uncorrelated R2 = {r2}");
        assert!(r2 >= 0.0);
    }

    #[test]
    fn ols_nested_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| cols[0][i] + 0.5 * cols[1][i] + 0.1 * rng.gen_range(-1.0..1.0))
            .collect();
        let design = |k: usize| -> Vec<f64> {
            (0..n)
                .flat_map(|i| cols[..k].iter().map(move |c| c[i]))
                .collect()
        };
        let mut prev = -1.0;
        for k in 1..=4 {
            let r2 = ols_r2(&design(k), &y, k).unwrap();
            assert!(r2 >= prev - 1e-9, "k={k}: {r2} < {prev}");
            prev = r2;
        }
    }

    #[test]
    fn ols_errors() {
        assert!(matches!(
            ols_r2(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 1),
            Err(StatsError::ZeroVariance)
        ));
        assert!(matches!(
            ols_r2(&[1.0, 2.0], &[1.0, 2.0], 1),
            Err(StatsError::TooFew { .. })
        ));
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 8.0, 27.0, 64.0]; // monotone but nonlinear
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_p_small_for_strong_correlation() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 0.1).collect();
        let p = permutation_p_value(&xs, &ys, 500, 0).unwrap();
        assert!(p < 0.01, "p = {p}");
        // deterministic
        let p2 = permutation_p_value(&xs, &ys, 500, 0).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn permutation_p_large_for_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = permutation_p_value(&xs, &ys, 500, 2).unwrap();
        assert!(p > 0.05, "p = {p}");
    }
}

use clknn::projection::PcaModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi rotations on a dense symmetric matrix; returns eigenvalues
/// in descending order.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn covariance(data: &[f64], d: usize) -> Vec<Vec<f64>> {
    let n = data.len() / d;
    let mean: Vec<f64> = (0..d)
        .map(|j| data.chunks_exact(d).map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in data.chunks_exact(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    cov
}

fn sample(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Correlated columns: x_j = u_j * scale_j + 0.3 * u_0.
    (0..n)
        .flat_map(|_| {
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d)
                .map(move |j| u[j] * (1.0 + j as f64 * 0.7) + 0.3 * u[0])
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn eigenvalues_match_jacobi() {
    let data = sample(500, 8, 11);
    let oracle = jacobi_eigenvalues(covariance(&data, 8));
    let pca = PcaModel::fit(&data, 8, 3).unwrap();
    for (got, want) in pca.explained_variance().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
    let full = PcaModel::fit(&data, 8, 8).unwrap();
    for (got, want) in full.explained_variance().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn components_are_eigenvectors() {
    let data = sample(300, 6, 12);
    let cov = covariance(&data, 6);
    let pca = PcaModel::fit(&data, 6, 6).unwrap();
    for (i, &lambda) in pca.explained_variance().iter().enumerate() {
        let v = pca.component(i);
        for r in 0..6 {
            let av: f64 = (0..6).map(|c| cov[r][c] * v[c]).sum();
            assert!((av - lambda * v[r]).abs() < 1e-8);
        }
    }
}

#[test]
fn full_rank_reconstruction_is_exact() {
    let data = sample(100, 5, 13);
    let pca = PcaModel::fit(&data, 5, 5).unwrap();
    for row in data.chunks_exact(5) {
        let y = pca.project(row).unwrap();
        for (j, &x) in row.iter().enumerate() {
            let back: f64 = (0..5).map(|i| y[i] * pca.component(i)[j]).sum::<f64>() + pca.mean()[j];
            assert!((back - x).abs() < 1e-9);
        }
    }
}

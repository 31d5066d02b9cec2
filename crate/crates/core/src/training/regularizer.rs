//! Timestamp embedding regularization.
//!
//! With `U` the row-normalised `N x d` timestamp embeddings, `S = U Uᵀ` is the
//! cosine similarity matrix and the loss is `mean((S - G)²)` over all `N²`
//! entries, `G` being a Gaussian band around the diagonal.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub g: Array2<f64>,
    pub sigma: f64,
}

impl GaussianTarget {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }
}

/// `G[i][j] = exp(-(i - j)² / (2σ²))`.
pub fn gaussian_target(n: usize, sigma: f64) -> Result<GaussianTarget> {
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 timestamp tokens, got {n}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
    }
    // G depends only on |i - j|, so evaluate each offset once
    let denom = 2.0 * sigma * sigma;
    let by_offset: Vec<f64> = (0..n)
        .map(|k| {
            let k = k as f64;
            (-(k * k) / denom).exp()
        })
        .collect();
    let g = Array2::from_shape_fn((n, n), |(i, j)| by_offset[i.abs_diff(j)]);
    Ok(GaussianTarget { g, sigma })
}

/// Default bandwidth, a quarter of the token count.
pub fn default_sigma(n: usize) -> f64 {
    n as f64 / 4.0
}

/// Row-normalised embeddings and the row norms.
fn normalize_rows(w: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Numerics(format!(
            "timestamp embedding row {i} has norm {}; cannot normalize",
            norms[i]
        )));
    }
    let u = &w / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Cosine similarity matrix of the rows of `w`.
pub fn cosine_similarity(w: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (u, _) = normalize_rows(w)?;
    Ok(u.dot(&u.t()))
}

fn check_shape(w: ArrayView2<f64>, target: &GaussianTarget) -> Result<()> {
    if w.nrows() != target.n() {
        return Err(Error::Shape(format!(
            "{} embedding rows but target is {}x{}",
            w.nrows(),
            target.n(),
            target.n()
        )));
    }
    Ok(())
}

pub fn reg_loss(w: ArrayView2<f64>, target: &GaussianTarget) -> Result<f64> {
    check_shape(w, target)?;
    let s = cosine_similarity(w)?;
    let n2 = (target.n() * target.n()) as f64;
    Ok(s.iter().zip(target.g.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n2)
}

/// Loss and its gradient with respect to the unnormalised `w`.
pub fn reg_loss_with_grad(w: ArrayView2<f64>, target: &GaussianTarget) -> Result<(f64, Array2<f64>)> {
    check_shape(w, target)?;
    let (u, norms) = normalize_rows(w)?;
    let n2 = (target.n() * target.n()) as f64;
    let diff = u.dot(&u.t()) - &target.g;
    let loss = diff.iter().map(|x| x * x).sum::<f64>() / n2;
    // dL/dS = 2 D / N²; S = U Uᵀ with D symmetric gives dL/dU = 4 D U / N²
    let du = diff.dot(&u) * (4.0 / n2);
    // back through u = w / |w|: (du - u (u·du)) / |w|
    let mut dw = du;
    for ((mut g, ur), &n) in dw.rows_mut().into_iter().zip(u.rows()).zip(norms.iter()) {
        let proj = g.dot(&ur);
        g.zip_mut_with(&ur, |gv, &uv| *gv = (*gv - uv * proj) / n);
    }
    Ok((loss, dw))
}

/// Mean Pearson correlation between row `i` of `S` and row `i` of `G`, with
/// the diagonal entry left out of each row.
pub fn mean_offdiag_row_correlation(s: ArrayView2<f64>, g: ArrayView2<f64>) -> f64 {
    let n = s.nrows();
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        let a: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s[[i, j]]).collect();
        let b: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| g[[i, j]]).collect();
        if let Some(r) = pearson(&a, &b) {
            total += r;
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_closed_form() {
        let g = gaussian_target(5, 1.25).unwrap();
        for i in 0..5 {
            assert_eq!(g.g[[i, i]], 1.0);
        }
        assert_eq!(g.g[[0, 1]], (-0.32f64).exp());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (i, j) = (rng.random_range(0..5), rng.random_range(0..5));
            assert_eq!(g.g[[i, j]], g.g[[j, i]]);
            assert!(g.g[[i, j]] > 0.0 && g.g[[i, j]] <= 1.0);
        }
        assert!(gaussian_target(5, 0.0).is_err());
        assert!(gaussian_target(5, -1.0).is_err());
        assert!(gaussian_target(1, 1.0).is_err());
    }

    #[test]
    fn orthogonal_rows_match_identity() {
        let w = array![[2.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.5]];
        let target = GaussianTarget {
            g: Array2::eye(3),
            sigma: 1.0,
        };
        assert_eq!(reg_loss(w.view(), &target).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let w = array![[1.0, 0.0], [1.0, 0.0]];
        let target = gaussian_target(2, 0.5).unwrap();
        let want = 0.5 * (1.0 - (-2.0f64).exp()).powi(2);
        let got = reg_loss(w.view(), &target).unwrap();
        assert!((got - want).abs() < 1e-12);
        // scalar enumeration over all four entries
        let mut sum = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let gij = (-((i as f64 - j as f64).powi(2)) / (2.0 * 0.25)).exp();
                sum += (1.0 - gij).powi(2);
            }
        }
        assert!((got - sum / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_numerics_error() {
        let w = array![[1.0, 0.0], [0.0, 0.0]];
        let target = gaussian_target(2, 0.5).unwrap();
        assert!(matches!(reg_loss(w.view(), &target), Err(Error::Numerics(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let target = gaussian_target(6, 1.5).unwrap();
        let (_, grad) = reg_loss_with_grad(w.view(), &target).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            for j in 0..4 {
                let mut wp = w.clone();
                wp[[i, j]] += h;
                let mut wm = w.clone();
                wm[[i, j]] -= h;
                let fd = (reg_loss(wp.view(), &target).unwrap() - reg_loss(wm.view(), &target).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(grad[[i, j]].abs()).max(1e-8);
                assert!((fd - grad[[i, j]]).abs() / denom < 1e-4, "({i},{j}) fd={fd} an={}", grad[[i, j]]);
            }
        }
    }

    #[test]
    fn invariant_to_row_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let target = gaussian_target(5, 1.25).unwrap();
        let base = reg_loss(w.view(), &target).unwrap();
        for c in [0.5, 3.0] {
            let mut scaled = w.clone();
            scaled.row_mut(2).mapv_inplace(|x| x * c);
            assert!((reg_loss(scaled.view(), &target).unwrap() - base).abs() < 1e-14);
        }
        assert!(base >= 0.0);
    }

    #[test]
    fn correlation_of_target_with_itself_is_one() {
        let g = gaussian_target(8, 2.0).unwrap();
        assert!((mean_offdiag_row_correlation(g.g.view(), g.g.view()) - 1.0).abs() < 1e-12);
    }
}

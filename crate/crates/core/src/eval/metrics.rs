use nalgebra::{DMatrix, DVector, SymmetricEigen};
use wspace_tensor::Tensor;

use crate::error::{Error, Result};
use crate::features::AttributeClassifier;
use crate::toyfaces::parse_text;

/// Ridge added to both covariances before the matrix square root.
pub const FID_EPSILON: f64 = 1e-6;

fn as_matrix(features: &Tensor) -> Result<DMatrix<f64>> {
    if features.rank() != 2 {
        return Err(Error::shape("[n, d]", features.shape()));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    Ok(DMatrix::from_row_slice(n, d, features.data()))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mu;
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu.transpose(), cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets `[n, d]`:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`.
///
/// `Tr((Σa Σb)^½)` is taken as the sum of singular values of `√Σa √Σb`, with
/// each root from a symmetric eigendecomposition with negative eigenvalues
/// clipped. This avoids squaring small eigenvalues, so `fid(x, x)` stays at
/// rounding level even when the feature dimension is close to the sample count.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (as_matrix(a)?, as_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::shape([xa.ncols()], [xb.ncols()]));
    }
    let d = xa.ncols();
    if xa.nrows() < d + 1 || xb.nrows() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "fid needs at least {} samples per set, got {} and {}",
            d + 1,
            xa.nrows(),
            xb.nrows()
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(&xa);
    let (mu_b, cov_b) = mean_and_cov(&xb);
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPSILON;
    let (cov_a, cov_b) = (cov_a + &eye, cov_b + &eye);
    let tr_sqrt: f64 = (sym_sqrt(&cov_a) * sym_sqrt(&cov_b)).singular_values().sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Root-mean-square difference of two feature vectors.
pub fn feature_distance(fa: &[f64], fb: &[f64]) -> f64 {
    let s: f64 = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / fa.len().max(1) as f64).sqrt()
}

/// Feature-space distance between two `[R, R, 3]` images through `F`.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, f: &AttributeClassifier) -> f64 {
    feature_distance(&f.extract_features(a), &f.extract_features(b))
}

/// Mean pairwise perceptual distance of a batch `[n, R, R, 3]`.
pub fn diversity_score(images: &Tensor, f: &AttributeClassifier) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two images".into()));
    }
    let feats = f.features(images).unstack();
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            total += feature_distance(feats[i].data(), feats[j].data());
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Per-pair fraction of text-mentioned slots the oracle confirms. A text
/// that mentions nothing scores 1.
pub fn attribute_scores(images: &Tensor, texts: &[String], oracle: &AttributeClassifier) -> Result<Vec<f64>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n != texts.len() {
        return Err(Error::InvalidArgument(format!("{n} images but {} texts", texts.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let preds = oracle.classify(images);
    Ok(preds
        .iter()
        .zip(texts)
        .map(|(p, t)| {
            let q = parse_text(t);
            if q.is_empty() {
                return 1.0;
            }
            q.iter().filter(|&(s, v)| p.discrete(s) == Some(v)).count() as f64 / q.len() as f64
        })
        .collect())
}

/// Mean of [`attribute_scores`].
pub fn attribute_accuracy(images: &Tensor, texts: &[String], oracle: &AttributeClassifier) -> Result<f64> {
    let s = attribute_scores(images, texts, oracle)?;
    Ok(if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(vec![64, 4], 1.0, &mut rng);
        assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn fid_of_a_set_with_itself_stays_zero_near_the_sample_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(vec![72, 64], 1.0, &mut rng);
        assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn fid_rejects_too_few_samples() {
        let a = Tensor::zeros(vec![3, 4]);
        assert!(fid(&a, &a).is_err());
    }

    #[test]
    fn feature_distance_is_symmetric() {
        let (a, b) = ([0.1, 0.7, -2.0], [1.3, -0.2, 0.4]);
        assert_eq!(feature_distance(&a, &b), feature_distance(&b, &a));
        assert_eq!(feature_distance(&a, &a), 0.0);
    }
}

use nalgebra::DMatrix;

use super::Mask;

/// Eigenvalues divided by their maximum (left untouched when all are zero).
pub fn normalized_spectrum(lambda: &[f64]) -> Vec<f64> {
    let max = lambda.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return lambda.to_vec();
    }
    lambda.iter().map(|l| l / max).collect()
}

/// `M_ij = (l2_i - l1_j)^2` on max-normalized spectra.
pub fn laplacian_mask(lambda1: &[f64], lambda2: &[f64]) -> Mask {
    let l1 = normalized_spectrum(lambda1);
    let l2 = normalized_spectrum(lambda2);
    Mask(DMatrix::from_fn(l2.len(), l1.len(), |i, j| (l2[i] - l1[j]).powi(2)))
}

/// Squared distance between the resolvent embeddings `(l/(l^2+1), 1/(l^2+1))`
/// of the max-normalized eigenvalues.
pub fn resolvent_mask(lambda1: &[f64], lambda2: &[f64]) -> Mask {
    let emb = |l: f64| {
        let d = l * l + 1.0;
        (l / d, 1.0 / d)
    };
    let e1: Vec<_> = normalized_spectrum(lambda1).into_iter().map(emb).collect();
    let e2: Vec<_> = normalized_spectrum(lambda2).into_iter().map(emb).collect();
    Mask(DMatrix::from_fn(e2.len(), e1.len(), |i, j| {
        (e2[i].0 - e1[j].0).powi(2) + (e2[i].1 - e1[j].1).powi(2)
    }))
}

/// `1 - exp(-d^2)` where `d` is the distance of the 1-based index pair
/// `(i, j)` to the line `j = slope * i`.
pub fn slanted_mask(k2: usize, k1: usize, slope: f64) -> Mask {
    let norm = (1.0 + slope * slope).sqrt();
    Mask(DMatrix::from_fn(k2, k1, |i, j| {
        let d = ((j + 1) as f64 - slope * (i + 1) as f64).abs() / norm;
        1.0 - (-d * d).exp()
    }))
}

use nalgebra::DMatrix;

use super::{fmap_from_p2p, FunctionalMap, PointMap};
use crate::error::{Error, Result};
use crate::mesh::MassDiagonal;
use crate::spectral::SpectralBasis;

const BLOCK: usize = 512;

/// Index of the nearest row of `targets` for every row of `queries`.
/// Ties go to the lowest index.
fn nearest_rows(queries: &DMatrix<f64>, targets: &DMatrix<f64>) -> Vec<usize> {
    // |a - b|^2 = |a|^2 - 2 a.b + |b|^2; |a|^2 is constant per query.
    let tt = targets.transpose();
    let norms: Vec<f64> = targets.row_iter().map(|r| r.norm_squared()).collect();
    let mut out = Vec::with_capacity(queries.nrows());
    let mut start = 0;
    while start < queries.nrows() {
        let len = BLOCK.min(queries.nrows() - start);
        let dots = queries.rows(start, len) * &tt;
        for i in 0..len {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, nb) in norms.iter().enumerate() {
                let d = nb - 2.0 * dots[(i, j)];
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            out.push(best);
        }
        start += len;
    }
    out
}

/// Nearest neighbour of each row of `Phi1 C^T` among the rows of `Phi2`.
pub fn p2p_from_fmap(c: &FunctionalMap, basis1: &SpectralBasis, basis2: &SpectralBasis) -> Result<PointMap> {
    let (k2, k1) = c.shape();
    if k1 > basis1.k() || k2 > basis2.k() {
        return Err(Error::KTooLarge {
            k: k1.max(k2),
            max: basis1.k().min(basis2.k()),
        });
    }
    let emb = basis1.phi_k(k1) * c.matrix().transpose();
    let targets = basis2.phi_k(k2).into_owned();
    Ok(PointMap(nearest_rows(&emb, &targets)))
}

/// Spectral upsampling from the order of `c` to `k_target`, growing by
/// `step` each round. A map already at `k_target` gets one round at fixed
/// order, so the result is always the image of a point map.
pub fn zoomout(
    c: &FunctionalMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    s2: &MassDiagonal,
    k_target: usize,
    step: usize,
) -> Result<FunctionalMap> {
    zoomout_with_map(c, basis1, basis2, s2, k_target, step).map(|(c, _)| c)
}

/// [`zoomout`] that also returns the point map extracted from the final
/// functional map.
pub fn zoomout_with_map(
    c: &FunctionalMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    s2: &MassDiagonal,
    k_target: usize,
    step: usize,
) -> Result<(FunctionalMap, PointMap)> {
    let (k2, k1) = c.shape();
    if k1 != k2 {
        return Err(Error::shape(format!("zoomout needs a square map, got {k2}x{k1}")));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("zoomout step must be positive".into()));
    }
    let max = basis1.k().min(basis2.k());
    if k_target > max || k_target < k1 {
        return Err(Error::KTooLarge { k: k_target, max });
    }
    let mut k = k1;
    let mut cur = c.clone();
    loop {
        let next = if k == k_target { k } else { (k + step).min(k_target) };
        let pm = p2p_from_fmap(&cur, basis1, basis2)?;
        cur = fmap_from_p2p(&pm, basis1, basis2, s2, next)?;
        k = next;
        if k == k_target {
            break;
        }
    }
    let pm = p2p_from_fmap(&cur, basis1, basis2)?;
    Ok((cur, pm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmap::gt_fmap;
    use crate::spectral::SpectralShape;
    use crate::synth::{make_template, TemplateKind};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_rows_brute_force() {
        let q = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 0.5, 0.5]);
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 0.1, 0.0, 0.0]);
        assert_eq!(nearest_rows(&q, &t), vec![2, 0, 1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let q = DMatrix::from_row_slice(1, 1, &[0.0]);
        let t = DMatrix::from_row_slice(3, 1, &[2.0, -1.0, 1.0]);
        assert_eq!(nearest_rows(&q, &t), vec![1]);
    }

    #[test]
    fn identity_self_map() {
        let sh = SpectralShape::new(make_template(TemplateKind::Biped, 2).unwrap(), 20).unwrap();
        let pm = p2p_from_fmap(&FunctionalMap::identity(20), &sh.basis, &sh.basis).unwrap();
        assert_eq!(pm, PointMap::identity(sh.mesh.n_vertices()));
        let z = zoomout(&FunctionalMap::identity(10), &sh.basis, &sh.basis, &sh.mass, 20, 1).unwrap();
        assert!((z.matrix() - DMatrix::<f64>::identity(20, 20)).amax() < 1e-8);
    }

    #[test]
    fn recovers_permutation() {
        let mesh = make_template(TemplateKind::Biped, 2).unwrap();
        let n = mesh.n_vertices();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let permuted = mesh.permuted(&order).unwrap();
        let s1 = SpectralShape::new(mesh, 30).unwrap();
        let s2 = SpectralShape::new(permuted, 30).unwrap();
        // old vertex order[i] became vertex i, so v maps to the position of v in order
        let mut inv = vec![0; n];
        for (i, &o) in order.iter().enumerate() {
            inv[o] = i;
        }
        let gt = PointMap::new(inv, n).unwrap();
        let c = gt_fmap(&s1.basis, &s2.basis, &gt, &s2.mass).unwrap();
        assert_eq!(p2p_from_fmap(&c, &s1.basis, &s2.basis).unwrap(), gt);
    }

    #[test]
    fn zoomout_rejects_large_target() {
        let sh = SpectralShape::new(make_template(TemplateKind::Icosphere, 1).unwrap(), 10).unwrap();
        let c = FunctionalMap::identity(5);
        assert!(matches!(
            zoomout(&c, &sh.basis, &sh.basis, &sh.mass, 11, 1),
            Err(Error::KTooLarge { .. })
        ));
    }
}

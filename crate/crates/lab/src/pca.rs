//! Two-component PCA for quick latent plots.

use nalgebra::{DMatrix, SymmetricEigen};

/// Projects each row onto the top two principal axes of the centred data.
///
/// Axes are ordered by decreasing variance and signed so that their largest
/// entry (by magnitude) is positive, which makes the output deterministic.
/// Missing axes (fewer than two columns or rows) project to zero.
pub fn project_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return vec![[0.0; 2]; n];
    }
    let mut x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    for j in 0..dim {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = vec![[0.0; 2]; n];
    for (k, &axis) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(axis).clone_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        let proj = &x * v;
        for i in 0..n {
            out[i][k] = proj[i];
        }
    }
    out
}

//! Dense linear-algebra helpers on top of `nalgebra`, plus the `f32` kernels the
//! search hot paths use.

use nalgebra::{DMatrix, DVector};

/// `f32` inner product with eight independent accumulators so the compiler can
/// keep the loop in vector registers.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let pair = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (pair[0] + pair[2]) + (pair[1] + pair[3]) + tail
}

/// Inner product accumulated in `f64`.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// `out[r] = ⟨matrix[r], x⟩` for a row-major `rows × x.len()` matrix.
#[inline]
pub fn matvec_into(matrix: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(matrix.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// Row-major `f32` copy of a matrix.
pub fn to_row_major_f32(m: &DMatrix<f64>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)] as f32);
        }
    }
    out
}

/// `Σ x xᵀ` over the columns of `cols`.
pub fn gram(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = cols * cols.transpose();
    symmetrize(&mut g);
    g
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Flips each column so its largest-magnitude entry is positive (first such
/// entry on ties).
pub fn canonicalize_column_signs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn sort_columns_desc(u: &DMatrix<f64>, values: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sorted = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    (sorted, order.iter().map(|&i| values[i]).collect())
}

/// Eigendecomposition of a symmetric matrix; eigenvectors are the columns of
/// the returned matrix, sorted by decreasing eigenvalue and sign-canonicalized.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let (mut u, values) = sort_columns_desc(&eig.eigenvectors, eig.eigenvalues.as_slice());
    canonicalize_column_signs(&mut u);
    (u, values)
}

/// All `rows` left singular vectors of a `rows × cols` matrix (as columns,
/// decreasing singular value, sign-canonicalized) and the matching singular
/// values. When `cols < rows` the missing singular values are zero and the
/// basis is completed to a full orthonormal one.
pub fn left_singular_basis(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let rows = m.nrows();
    let square = if m.ncols() < rows {
        let mut padded = DMatrix::zeros(rows, rows);
        padded.columns_mut(0, m.ncols()).copy_from(m);
        padded
    } else if m.ncols() > 2 * rows {
        // M = Rᵀ Q̃ᵀ where M ᵀ = Q̃ R; Rᵀ has the same left singular system.
        m.transpose().qr().r().transpose()
    } else {
        m.clone()
    };
    let svd = square.svd(true, false);
    let u = svd.u.expect("requested U");
    let (mut u, sigma) = sort_columns_desc(&u, svd.singular_values.as_slice());
    canonicalize_column_signs(&mut u);
    let mut sigma = sigma;
    sigma.truncate(rows);
    (u.columns(0, rows).into_owned(), sigma)
}

/// Orthonormal basis (as columns) for the span of the rows of `rows_matrix`.
fn row_space_basis(rows_matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let t = rows_matrix.transpose();
    let k = t.ncols().min(t.nrows());
    t.qr().q().columns(0, k).into_owned()
}

/// Principal angles (radians, ascending) between the row spaces of two
/// matrices with the same column count.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(
        a.ncols(),
        b.ncols(),
        "row spaces must live in the same dimension"
    );
    let qa = row_space_basis(a);
    let qb = row_space_basis(b);
    let cross = qa.transpose() * qb;
    let sv = cross.singular_values();
    let mut cosines: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    cosines.into_iter().map(f64::acos).collect()
}

/// `U diag(f(values)) Uᵀ`.
pub fn spectral_map(u: &DMatrix<f64>, values: &[f64], f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let diag = DMatrix::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|v| f(*v)),
    ));
    let mut out = u * diag * u.transpose();
    symmetrize(&mut out);
    out
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        for len in [0usize, 1, 7, 8, 9, 33] {
            let a: Vec<f32> = (0..len).map(|i| i as f32 * 0.5 - 3.0).collect();
            let b: Vec<f32> = (0..len).map(|i| 1.0 - i as f32 * 0.25).collect();
            let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-3);
        }
    }

    #[test]
    fn left_basis_of_wide_and_narrow_matrices() {
        let m = DMatrix::from_row_slice(2, 3, &[2.0, -2.0, 0.0, 0.0, 0.0, 1.0]);
        let (u, s) = left_singular_basis(&m);
        assert!((s[0] - 8f64.sqrt()).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        assert!((u[(0, 0)] - 1.0).abs() < 1e-12 && u[(1, 0)].abs() < 1e-12);

        let narrow = DMatrix::from_column_slice(3, 1, &[0.0, -3.0, 4.0]);
        let (u, s) = left_singular_basis(&narrow);
        assert_eq!(u.shape(), (3, 3));
        assert_eq!(s.len(), 3);
        assert!((s[0] - 5.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let gram = u.transpose() * &u;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
        // largest entry of (0,-0.6,0.8) is positive already
        assert!((u[(2, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn qr_route_matches_direct_svd() {
        let m = DMatrix::from_fn(3, 20, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + i as f64);
        let (u1, s1) = left_singular_basis(&m);
        let svd = m.clone().svd(true, false);
        let mut direct: Vec<f64> = svd.singular_values.iter().copied().collect();
        direct.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in s1.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
        let top = svd.singular_values.imax();
        let direct_top = DMatrix::from_row_slice(1, 3, svd.u.unwrap().column(top).as_slice());
        let ours = DMatrix::from_row_slice(1, 3, u1.column(0).as_slice());
        let angles = principal_angles(&ours, &direct_top);
        assert!(angles[0] < 1e-6);
    }

    #[test]
    fn principal_angles_of_axes() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 3.0]);
        assert!((principal_angles(&a, &b)[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(principal_angles(&a, &a)[0].abs() < 1e-7);
    }
}

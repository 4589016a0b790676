//! Sphering: query-aware linear dimensionality reduction in closed form.
//!
//! Queries define a sphering matrix `W = U S Uᵀ` (from the SVD `Q = U S Vᵀ` of
//! the stacked learning queries), so that `Q Qᵀ = Wᵀ W`. The inner-product
//! loss then becomes a plain reconstruction error of the sphered database
//! `W X`, which is minimized by its top left singular vectors `P`. The
//! projections are `A = P W⁻¹` for queries and `B = P W` for database vectors.
//!
//! [`FlexibleSpheringModel`] keeps the *full* `D × D` basis `P′` ordered by
//! singular value, so any target dimension `d` is a prefix: database vectors are
//! stored once as `x′ = P′ W x` and searched on their first `d` entries, while
//! the full `x′` still yields exact inner products `⟨P′ W⁻¹ q, x′⟩ = ⟨q, x⟩`.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::dataset::VectorSet;
use crate::error::{Error, Result};
use crate::io::{self as bin, Fingerprint};
use crate::linalg;

/// Singular values of `W` below this fraction of the largest are treated as
/// zero when forming the pseudoinverse.
pub const PINV_RELATIVE_THRESHOLD: f64 = 1e-6;

/// Below this `σ_min / σ_max`, full-dimension exactness degrades and a warning
/// is logged.
pub const CONDITION_WARNING: f64 = 1e-6;

/// Database rows used for training: larger learning sets are subsampled.
pub const MAX_LEARN_ROWS: usize = 100_000;

const MODEL_MAGIC: &[u8; 4] = b"LVSP";
const MODEL_VERSION: u32 = 1;

/// Rounds to the precision models are stored with, so that saving and loading
/// a model is lossless.
pub(crate) fn storage_round(m: DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| f64::from(v as f32))
}

/// The query-derived sphering matrix `W` and its pseudoinverse.
#[derive(Debug, Clone, PartialEq)]
pub struct SpheringTransform {
    w: DMatrix<f64>,
    w_pinv: DMatrix<f64>,
    /// Singular values of `W`, non-increasing.
    spectrum: Vec<f64>,
}

impl SpheringTransform {
    /// `W = I`; with it the sphering model degenerates to a query-agnostic SVD.
    pub fn identity(dim: usize) -> Self {
        SpheringTransform {
            w: DMatrix::identity(dim, dim),
            w_pinv: DMatrix::identity(dim, dim),
            spectrum: vec![1.0; dim],
        }
    }

    /// Builds `U S Uᵀ` and the thresholded `U S⁺ Uᵀ` from an orthonormal `U`
    /// (columns) and non-increasing `S`.
    fn from_spectrum(u: &DMatrix<f64>, s: Vec<f64>) -> Result<Self> {
        let max = s.first().copied().unwrap_or(0.0);
        if max.is_nan() || max <= 0.0 {
            return Err(Error::Numeric(
                "query set has no energy; W would be zero".into(),
            ));
        }
        let cutoff = PINV_RELATIVE_THRESHOLD * max;
        let w = linalg::spectral_map(u, &s, |v| v);
        let w_pinv = linalg::spectral_map(u, &s, |v| if v > cutoff { 1.0 / v } else { 0.0 });
        let t = SpheringTransform {
            w: storage_round(w),
            w_pinv: storage_round(w_pinv),
            spectrum: s,
        };
        if t.condition() < CONDITION_WARNING {
            log::warn!(
                "sphering matrix is ill-conditioned (σ_min/σ_max = {:.3e}); full-dimension inner products will not be exact",
                t.condition()
            );
        }
        Ok(t)
    }

    /// Eigen route: `W = U Λ^{1/2} Uᵀ` from `K_Q = Σ q qᵀ`. Small negative
    /// eigenvalues from floating-point noise are clamped to zero.
    pub fn from_query_moment(k_q: &DMatrix<f64>) -> Result<Self> {
        let (u, lambda) = linalg::symmetric_eigen_desc(k_q);
        let s = lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
        Self::from_spectrum(&u, s)
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn w_pinv(&self) -> &DMatrix<f64> {
        &self.w_pinv
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// `σ_min(W) / σ_max(W)`.
    pub fn condition(&self) -> f64 {
        match (self.spectrum.first(), self.spectrum.last()) {
            (Some(&max), Some(&min)) if max > 0.0 => min / max,
            _ => 0.0,
        }
    }
}

/// SVD route: `W = U S Uᵀ` where `Q = U S Vᵀ` stacks the queries as columns.
pub fn compute_sphering(q_learn: &VectorSet) -> Result<SpheringTransform> {
    if q_learn.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (u, s) = linalg::left_singular_basis(&q_learn.to_columns());
    SpheringTransform::from_spectrum(&u, s)
}

/// Full-spectrum sphering model, sliceable to any target dimension.
#[derive(Debug, Clone)]
pub struct FlexibleSpheringModel {
    transform: SpheringTransform,
    /// Rows are the left singular vectors of `W X`, by decreasing singular value.
    p_full: DMatrix<f64>,
    sigma: Vec<f64>,
    /// `A′ = P′ W⁺`.
    query_map: DMatrix<f64>,
    /// `B′ = P′ W`.
    database_map: DMatrix<f64>,
    query_map_f32: Vec<f32>,
    fingerprint: u64,
}

impl PartialEq for FlexibleSpheringModel {
    fn eq(&self, other: &Self) -> bool {
        self.transform.w == other.transform.w
            && self.transform.w_pinv == other.transform.w_pinv
            && self.p_full == other.p_full
            && self.sigma == other.sigma
    }
}

impl FlexibleSpheringModel {
    fn assemble(transform: SpheringTransform, p_full: DMatrix<f64>, sigma: Vec<f64>) -> Self {
        let p_full = storage_round(p_full);
        let sigma: Vec<f64> = sigma.into_iter().map(|v| f64::from(v as f32)).collect();
        let query_map = storage_round(&p_full * transform.w_pinv());
        let database_map = storage_round(&p_full * transform.w());
        let mut fp = Fingerprint::new();
        fp.bytes(MODEL_MAGIC);
        fp.matrix(transform.w());
        fp.matrix(transform.w_pinv());
        fp.matrix(&p_full);
        FlexibleSpheringModel {
            query_map_f32: linalg::to_row_major_f32(&query_map),
            transform,
            p_full,
            sigma,
            query_map,
            database_map,
            fingerprint: fp.finish(),
        }
    }

    /// `W = P′ = I`: encoding is the identity.
    pub fn identity(dim: usize) -> Self {
        Self::assemble(
            SpheringTransform::identity(dim),
            DMatrix::identity(dim, dim),
            vec![0.0; dim],
        )
    }

    /// Fits the database basis `P′` from the SVD of `W X`.
    pub fn fit(transform: SpheringTransform, x: &VectorSet) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if x.dim() != transform.dim() {
            return Err(Error::DimensionMismatch {
                record: 0,
                expected: transform.dim(),
                found: x.dim(),
            });
        }
        let sphered = transform.w() * x.to_columns();
        let (u, sigma) = linalg::left_singular_basis(&sphered);
        Ok(Self::assemble(transform, u.transpose(), sigma))
    }

    /// Eigen route used by streaming: `W` from `K_Q`, then `P′` from the
    /// eigenvectors of `W K_X W`.
    pub fn from_second_moments(k_q: &DMatrix<f64>, k_x: &DMatrix<f64>) -> Result<Self> {
        let transform = SpheringTransform::from_query_moment(k_q)?;
        let sphered = transform.w() * k_x * transform.w();
        let (u, lambda) = linalg::symmetric_eigen_desc(&sphered);
        let sigma = lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
        Ok(Self::assemble(transform, u.transpose(), sigma))
    }

    pub fn dim(&self) -> usize {
        self.p_full.nrows()
    }

    pub fn transform(&self) -> &SpheringTransform {
        &self.transform
    }

    pub fn w(&self) -> &DMatrix<f64> {
        self.transform.w()
    }

    pub fn w_pinv(&self) -> &DMatrix<f64> {
        self.transform.w_pinv()
    }

    pub fn p_full(&self) -> &DMatrix<f64> {
        &self.p_full
    }

    /// Singular values of `W X`, non-increasing.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn query_map(&self) -> &DMatrix<f64> {
        &self.query_map
    }

    pub fn database_map(&self) -> &DMatrix<f64> {
        &self.database_map
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Projection pair for target dimension `d`: the first `d` rows of `A′`
    /// and `B′`.
    pub fn slice(&self, d: usize) -> Result<ProjectionPair> {
        if d == 0 || d > self.dim() {
            return Err(Error::param(format!(
                "target dimension {d} outside [1, {}]",
                self.dim()
            )));
        }
        Ok(ProjectionPair {
            a: self.query_map.rows(0, d).into_owned(),
            b: self.database_map.rows(0, d).into_owned(),
        })
    }

    /// `A′ q` in `f32` (full `D` entries; the first `d` drive the main search).
    pub fn preprocess_query(&self, q: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.dim()];
        linalg::matvec_into(&self.query_map_f32, q, &mut out);
        out
    }

    /// `x′ = B′ x`, accumulated in `f64`.
    pub fn encode(&self, x: &[f32]) -> Vec<f32> {
        let dim = self.dim();
        (0..dim)
            .map(|r| {
                (0..dim)
                    .map(|k| self.database_map[(r, k)] * f64::from(x[k]))
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Stores the full-dimension `x′` for every row of `x`.
    pub fn project_database(&self, x: &VectorSet) -> Result<SpheredDatabase> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                record: 0,
                expected: self.dim(),
                found: x.dim(),
            });
        }
        let mut rows = Vec::with_capacity(x.len() * self.dim());
        for row in x.rows() {
            rows.extend(self.encode(row));
        }
        Ok(SpheredDatabase {
            dim: self.dim(),
            rows,
            fingerprint: self.fingerprint,
        })
    }

    /// Header (magic, version, D) then `W`, `W⁺`, `P′` and `σ`, row-major
    /// little-endian `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        bin::write_u32(w, MODEL_VERSION)?;
        bin::write_u32(w, self.dim() as u32)?;
        self.write_body(w)
    }

    pub(crate) fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        bin::write_matrix(w, self.w())?;
        bin::write_matrix(w, self.w_pinv())?;
        bin::write_matrix(w, &self.p_full)?;
        let sigma: Vec<f32> = self.sigma.iter().map(|v| *v as f32).collect();
        bin::write_f32s(w, &sigma)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        bin::expect_magic(r, MODEL_MAGIC)?;
        let version = bin::read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let dim = bin::read_u32(r)? as usize;
        Self::read_body(r, dim)
    }

    pub(crate) fn read_body<R: Read>(r: &mut R, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("model dimension is zero".into()));
        }
        let w = bin::read_matrix(r, dim, dim)?;
        let w_pinv = bin::read_matrix(r, dim, dim)?;
        let p_full = bin::read_matrix(r, dim, dim)?;
        let sigma: Vec<f64> = bin::read_f32s(r, dim)?.into_iter().map(f64::from).collect();
        let mut spectrum: Vec<f64> = w.clone().singular_values().iter().copied().collect();
        spectrum.sort_by(|a, b| b.total_cmp(a));
        let transform = SpheringTransform {
            w,
            w_pinv,
            spectrum,
        };
        Ok(Self::assemble(transform, p_full, sigma))
    }
}

/// Query-side and database-side maps approximating `⟨q, x⟩ ≈ ⟨A q, B x⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ProjectionPair {
    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn approx_ip(&self, q: &[f32], x: &[f32]) -> f64 {
        let aq = apply(&self.a, q);
        let bx = apply(&self.b, x);
        aq.iter().zip(&bx).map(|(a, b)| a * b).sum()
    }

    /// Max-entry asymmetry of `A W Wᵀ Bᵀ`; zero when `A = P W⁺`, `B = P W`.
    pub fn sphering_residual(&self, w: &DMatrix<f64>) -> f64 {
        let m = &self.a * w * w.transpose() * self.b.transpose();
        (&m - m.transpose()).amax()
    }
}

pub(crate) fn apply(m: &DMatrix<f64>, v: &[f32]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|k| m[(r, k)] * f64::from(v[k])).sum())
        .collect()
}

/// Database vectors stored as full-dimension sphered rows `x′`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpheredDatabase {
    dim: usize,
    rows: Vec<f32>,
    fingerprint: u64,
}

impl SpheredDatabase {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub(crate) fn from_parts(dim: usize, rows: Vec<f32>, fingerprint: u64) -> Self {
        SpheredDatabase {
            dim,
            rows,
            fingerprint,
        }
    }
}

/// Trains the full-spectrum sphering model; slice it to pick a target dimension.
pub fn train_flexible(x_learn: &VectorSet, q_learn: &VectorSet) -> Result<FlexibleSpheringModel> {
    if x_learn.dim() != q_learn.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: x_learn.dim(),
            found: q_learn.dim(),
        });
    }
    if x_learn.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let transform = compute_sphering(q_learn)?;
    FlexibleSpheringModel::fit(transform, x_learn)
}

/// Query-agnostic baseline in flexible form: `W = I`, `P′` from the SVD of `X`.
pub fn train_svd_flexible(x_learn: &VectorSet) -> Result<FlexibleSpheringModel> {
    FlexibleSpheringModel::fit(SpheringTransform::identity(x_learn.dim()), x_learn)
}

/// Query-agnostic baseline: `A = B =` top-`d` left singular vectors of `X`.
pub fn train_svd_baseline(x_learn: &VectorSet, d: usize) -> Result<ProjectionPair> {
    train_svd_flexible(x_learn)?.slice(d)
}

/// `Σ_x x xᵀ` over the rows of a set.
pub fn second_moment(set: &VectorSet) -> DMatrix<f64> {
    if set.is_empty() {
        return DMatrix::zeros(set.dim(), set.dim());
    }
    linalg::gram(&set.to_columns())
}

/// `Σ_q Σ_x (⟨A q, B x⟩ − ⟨q, x⟩)²`, evaluated as
/// `tr(Mᵀ K_Q M K_X)` with `M = Aᵀ B − I`.
pub fn leanvec_loss(pair: &ProjectionPair, x: &VectorSet, q: &VectorSet) -> f64 {
    leanvec_loss_from_moments(pair, &second_moment(x), &second_moment(q))
}

pub fn leanvec_loss_from_moments(
    pair: &ProjectionPair,
    k_x: &DMatrix<f64>,
    k_q: &DMatrix<f64>,
) -> f64 {
    let dim = pair.dim();
    let m = pair.a.transpose() * &pair.b - DMatrix::<f64>::identity(dim, dim);
    let left = k_q * &m;
    let right = &m * k_x;
    let loss: f64 = left.iter().zip(right.iter()).map(|(a, b)| a * b).sum();
    loss.max(0.0)
}

/// `Σ_q Σ_x ⟨q, x⟩² = tr(K_Q K_X)`, the loss of the all-zero approximation.
pub fn total_ip_energy(k_x: &DMatrix<f64>, k_q: &DMatrix<f64>) -> f64 {
    k_q.iter().zip(k_x.iter()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Similarity;

    fn cols(columns: &[[f32; 2]]) -> VectorSet {
        VectorSet::from_rows(columns, Similarity::InnerProduct).unwrap()
    }

    #[test]
    fn diagonal_queries_give_diagonal_w() {
        let t = compute_sphering(&cols(&[[1.0, 0.0], [0.0, 2.0]])).unwrap();
        let expect_w = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]);
        let expect_pinv = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.5]);
        assert!((t.w() - expect_w).amax() < 1e-6);
        assert!((t.w_pinv() - expect_pinv).amax() < 1e-6);
    }

    #[test]
    fn rank_deficient_queries_use_pseudoinverse() {
        let m = 9;
        let q = cols(&vec![[1.0, 0.0]; m]);
        let t = compute_sphering(&q).unwrap();
        assert!((t.w()[(0, 0)] - 3.0).abs() < 1e-6);
        assert!(t.w()[(1, 1)].abs() < 1e-6);
        assert!((t.w_pinv()[(0, 0)] - 1.0 / 3.0).abs() < 1e-6);
        assert!(t.w_pinv()[(1, 1)].abs() < 1e-6);
        assert_eq!(t.condition(), 0.0);
    }

    #[test]
    fn empty_queries_rejected() {
        let q = VectorSet::empty(2, Similarity::InnerProduct);
        assert!(matches!(compute_sphering(&q), Err(Error::EmptyDataset)));
    }

    #[test]
    fn dominant_axis_with_isotropic_queries() {
        let x = cols(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0]]);
        let q = cols(&[[1.0, 0.0], [0.0, 1.0]]);
        let model = train_flexible(&x, &q).unwrap();
        assert!((model.p_full()[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(model.p_full()[(0, 1)].abs() < 1e-6);
        assert!((model.sigma()[0] - 8f64.sqrt()).abs() < 1e-5);
        assert!((model.sigma()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slice_of_hand_example() {
        // W = diag(1, 2); X columns (1,0), (0,1) => W X = diag(1, 2).
        let x = cols(&[[1.0, 0.0], [0.0, 1.0]]);
        let q = cols(&[[1.0, 0.0], [0.0, 2.0]]);
        let pair = train_flexible(&x, &q).unwrap().slice(1).unwrap();
        let close = |m: &DMatrix<f64>, e: [f64; 2]| {
            (m[(0, 0)] - e[0]).abs() < 1e-6 && (m[(0, 1)] - e[1]).abs() < 1e-6
        };
        assert!(close(&pair.a, [0.0, 0.5]), "{}", pair.a);
        assert!(close(&pair.b, [0.0, 2.0]), "{}", pair.b);
    }

    #[test]
    fn slice_bounds() {
        let x = cols(&[[1.0, 0.0], [0.0, 1.0]]);
        let model = train_flexible(&x, &x).unwrap();
        assert!(model.slice(0).is_err());
        assert!(model.slice(3).is_err());
        assert!(model.slice(2).is_ok());
    }

    #[test]
    fn loss_examples() {
        let x = cols(&[[0.0, 1.0], [3.0, -1.0]]);
        let q = cols(&[[1.0, 0.0], [2.0, 2.0]]);
        let identity = ProjectionPair {
            a: DMatrix::identity(2, 2),
            b: DMatrix::identity(2, 2),
        };
        assert!(leanvec_loss(&identity, &x, &q).abs() < 1e-12);

        let e1 = ProjectionPair {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let loss = leanvec_loss(&e1, &cols(&[[0.0, 1.0]]), &cols(&[[1.0, 0.0]]));
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn svd_baseline_dominant_axis() {
        let x = cols(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0]]);
        let pair = train_svd_baseline(&x, 1).unwrap();
        assert!((pair.a[(0, 0)].abs() - 1.0).abs() < 1e-6 && pair.a[(0, 1)].abs() < 1e-6);
        assert_eq!(pair.a, pair.b);
    }

    #[test]
    fn model_file_round_trip() {
        let (x, q) = crate::dataset::synth_ood(200, 100, 5, 9, 0.7).unwrap();
        let model = train_flexible(&x, &q).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + 4 * (3 * 25 + 5));
        let back = FlexibleSpheringModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), model.fingerprint());
        assert_eq!(back.query_map(), model.query_map());
        bytes[0] = b'X';
        assert!(FlexibleSpheringModel::read_from(&mut bytes.as_slice()).is_err());
    }
}

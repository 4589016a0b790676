//! Vector datasets: the in-memory [`VectorSet`], fvecs/ivecs interchange, synthetic
//! generators and the small transforms applied before training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Similarity the dataset's ground truth was computed with.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Similarity {
    InnerProduct,
    Euclidean,
    Cosine,
}

/// Dense row-major collection of same-dimension `f32` vectors.
///
/// Rows are never the zero vector: construction rejects them with the offending
/// row index, since tag assignment and spherical k-means are undefined on them.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
    similarity: Similarity,
    normalized: bool,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>, similarity: Similarity) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Malformed {
                record: data.len() / dim,
                reason: format!("buffer length {} is not a multiple of {dim}", data.len()),
            });
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if chunk.iter().all(|v| *v == 0.0) {
                return Err(Error::ZeroRow { row });
            }
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed {
                    record: row,
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(VectorSet {
            dim,
            data,
            similarity,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], similarity: Similarity) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    record: i,
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, similarity)
    }

    /// A set with no rows.
    pub fn empty(dim: usize, similarity: Similarity) -> Self {
        VectorSet {
            dim,
            data: Vec::new(),
            similarity,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> VectorSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        VectorSet {
            dim: self.dim,
            data,
            similarity: self.similarity,
            normalized: self.normalized,
        }
    }

    /// Stacks the rows as columns of a `dim × len` matrix.
    pub fn to_columns(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.len(), |i, j| {
            f64::from(self.data[j * self.dim + i])
        })
    }
}

/// Exact nearest-neighbor ids per query, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    k: usize,
    ids: Vec<u32>,
}

impl GroundTruth {
    pub fn new(k: usize, ids: Vec<u32>) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("ground truth k must be positive"));
        }
        if !ids.len().is_multiple_of(k) {
            return Err(Error::Malformed {
                record: ids.len() / k,
                reason: "ground truth is not a whole number of rows".into(),
            });
        }
        Ok(GroundTruth { k, ids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_queries(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u32> {
        self.ids.chunks_exact(self.k)
    }

    /// Checks ids are in range and distinct per row.
    pub fn validate(&self, n: usize) -> Result<()> {
        for (q, row) in self.rows().enumerate() {
            let mut seen = row.to_vec();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Malformed {
                    record: q,
                    reason: "duplicate neighbor id".into(),
                });
            }
            if let Some(bad) = row.iter().find(|&&id| id as usize >= n) {
                return Err(Error::Malformed {
                    record: q,
                    reason: format!("neighbor id {bad} out of range for {n} vectors"),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// fvecs / ivecs
// ---------------------------------------------------------------------------

/// Parses `[i32 dim][dim × f32]` little-endian records.
pub fn parse_fvecs(bytes: &[u8], similarity: Similarity) -> Result<VectorSet> {
    let (dim, values) = parse_records(bytes)?;
    let data = values.into_iter().map(f32::from_bits).collect();
    VectorSet::new(dim, data, similarity)
}

pub fn load_fvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let bytes = std::fs::read(path)?;
    parse_fvecs(&bytes, Similarity::InnerProduct)
}

pub fn write_fvecs<W: Write>(w: &mut W, set: &VectorSet) -> Result<()> {
    let dim = set.dim() as i32;
    for row in set.rows() {
        w.write_all(&dim.to_le_bytes())?;
        crate::io::write_f32s(w, row)?;
    }
    Ok(())
}

pub fn save_fvecs(path: impl AsRef<Path>, set: &VectorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fvecs(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn parse_ivecs(bytes: &[u8]) -> Result<GroundTruth> {
    let (k, values) = parse_records(bytes)?;
    GroundTruth::new(k, values)
}

pub fn load_ivecs(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_ivecs(&bytes)
}

pub fn save_ivecs(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = gt.k() as i32;
    for row in gt.rows() {
        w.write_all(&k.to_le_bytes())?;
        crate::io::write_u32s(&mut w, row)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits a vecs file into its common record width and the raw 32-bit payloads.
fn parse_records(bytes: &[u8]) -> Result<(usize, Vec<u32>)> {
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dim = None;
    let mut values = Vec::new();
    let mut pos = 0;
    let mut record = 0;
    while pos < bytes.len() {
        let header = bytes.get(pos..pos + 4).ok_or_else(|| Error::Malformed {
            record,
            reason: "truncated dimension header".into(),
        })?;
        let d = i32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        if d <= 0 {
            return Err(Error::Malformed {
                record,
                reason: format!("non-positive dimension {d}"),
            });
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DimensionMismatch {
                    record,
                    expected,
                    found: d,
                })
            }
            _ => {}
        }
        pos += 4;
        let body = bytes
            .get(pos..pos + 4 * d)
            .ok_or_else(|| Error::Malformed {
                record,
                reason: "truncated record body".into(),
            })?;
        values.extend(
            body.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        pos += 4 * d;
        record += 1;
    }
    Ok((dim.expect("non-empty input has a record"), values))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Per-axis variance of the synthetic generators: λ_j = 1 / (1 + j).
pub fn decaying_spectrum(dim: usize) -> Vec<f64> {
    (0..dim).map(|j| 1.0 / (1.0 + j as f64)).collect()
}

fn check_counts(n: usize, m: usize, dim: usize) -> Result<()> {
    if n == 0 || m == 0 || dim == 0 {
        return Err(Error::param("n, m and dim must all be at least 1"));
    }
    Ok(())
}

fn gaussian_row<R: Rng>(rng: &mut R, scales: &[f64]) -> Vec<f64> {
    scales
        .iter()
        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn nonzero_f32(row: impl IntoIterator<Item = f64>, out: &mut Vec<f32>) {
    let start = out.len();
    out.extend(row.into_iter().map(|v| v as f32));
    // A Gaussian draw is zero with probability 0, but f32 rounding of tiny
    // values could produce one; nudge rather than fail.
    if out[start..].iter().all(|v| *v == 0.0) {
        out[start] = f32::MIN_POSITIVE;
    }
}

/// Database and queries with mismatched distributions.
///
/// Both are zero-mean Gaussians with the decaying spectrum of
/// [`decaying_spectrum`]. The query covariance is rotated by
/// `query_rotation_angle` in each coordinate plane `(e_j, e_{D-1-j})`, so the
/// query's strongest axes drift toward the database's weakest ones. An angle of
/// 0 yields in-distribution queries; π/2 swaps the spectra end for end.
pub fn synth_ood(
    n: usize,
    m: usize,
    dim: usize,
    seed: u64,
    query_rotation_angle: f64,
) -> Result<(VectorSet, VectorSet)> {
    check_counts(n, m, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = decaying_spectrum(dim).iter().map(|l| l.sqrt()).collect();

    let mut xs = Vec::with_capacity(n * dim);
    for _ in 0..n {
        nonzero_f32(gaussian_row(&mut rng, &scales), &mut xs);
    }

    let (c, s) = (query_rotation_angle.cos(), query_rotation_angle.sin());
    let mut qs = Vec::with_capacity(m * dim);
    for _ in 0..m {
        let z = gaussian_row(&mut rng, &scales);
        let mut q = z.clone();
        for j in 0..dim / 2 {
            let k = dim - 1 - j;
            q[j] = c * z[j] - s * z[k];
            q[k] = s * z[j] + c * z[k];
        }
        nonzero_f32(q, &mut qs);
    }
    Ok((
        VectorSet::new(dim, xs, Similarity::InnerProduct)?,
        VectorSet::new(dim, qs, Similarity::InnerProduct)?,
    ))
}

/// Gaussian mixture with `components` clusters whose centers and spreads both
/// follow the decaying spectrum; queries are drawn from the same mixture.
pub fn synth_mixture(
    n: usize,
    m: usize,
    dim: usize,
    components: usize,
    seed: u64,
) -> Result<(VectorSet, VectorSet)> {
    check_counts(n, m, dim)?;
    if components == 0 {
        return Err(Error::param("mixture needs at least one component"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = decaying_spectrum(dim).iter().map(|l| l.sqrt()).collect();
    let centers: Vec<Vec<f64>> = (0..components)
        .map(|_| {
            gaussian_row(&mut rng, &scales)
                .into_iter()
                .map(|v| 2.0 * v)
                .collect()
        })
        .collect();
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let c = &centers[rng.random_range(0..components)];
            let z = gaussian_row(rng, &scales);
            nonzero_f32(c.iter().zip(z).map(|(a, b)| a + b), &mut out);
        }
        out
    };
    let xs = draw(n, &mut rng);
    let qs = draw(m, &mut rng);
    Ok((
        VectorSet::new(dim, xs, Similarity::InnerProduct)?,
        VectorSet::new(dim, qs, Similarity::InnerProduct)?,
    ))
}

/// Well-separated anisotropic blobs.
///
/// Blob `b` sits at `radius · μ_b` for a random unit direction `μ_b` and varies
/// inside its own random `intrinsic_dim`-dimensional subspace (decaying
/// spectrum), plus isotropic noise of standard deviation `0.05`. Queries are
/// isotropic standard Gaussians. Rows are emitted blob-interleaved at random.
pub fn synth_blobs(
    n: usize,
    m: usize,
    dim: usize,
    blobs: usize,
    intrinsic_dim: usize,
    seed: u64,
) -> Result<(VectorSet, VectorSet)> {
    check_counts(n, m, dim)?;
    if blobs == 0 || intrinsic_dim == 0 || intrinsic_dim > dim {
        return Err(Error::param("need blobs ≥ 1 and 1 ≤ intrinsic_dim ≤ dim"));
    }
    const RADIUS: f64 = 4.0;
    const NOISE: f64 = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = vec![1.0; dim];
    let spread: Vec<f64> = decaying_spectrum(intrinsic_dim)
        .iter()
        .map(|l| l.sqrt())
        .collect();

    let mut models = Vec::with_capacity(blobs);
    for _ in 0..blobs {
        let mut mu = gaussian_row(&mut rng, &unit);
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        mu.iter_mut().for_each(|v| *v *= RADIUS / norm);
        let g = DMatrix::from_fn(dim, intrinsic_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let basis = g.qr().q();
        models.push((mu, basis));
    }

    let mut xs = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let (mu, basis) = &models[rng.random_range(0..blobs)];
        let coeffs = gaussian_row(&mut rng, &spread);
        let noise = gaussian_row(&mut rng, &unit);
        let row = (0..dim).map(|i| {
            let local: f64 = (0..intrinsic_dim).map(|k| basis[(i, k)] * coeffs[k]).sum();
            mu[i] + local + NOISE * noise[i]
        });
        nonzero_f32(row, &mut xs);
    }
    let mut qs = Vec::with_capacity(m * dim);
    for _ in 0..m {
        nonzero_f32(gaussian_row(&mut rng, &unit), &mut qs);
    }
    Ok((
        VectorSet::new(dim, xs, Similarity::InnerProduct)?,
        VectorSet::new(dim, qs, Similarity::InnerProduct)?,
    ))
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// Lifts Euclidean data into the inner-product setting: `x ↦ [x; -½‖x‖²]`,
/// `q ↦ [q; 1]`. Maximizing the lifted inner product minimizes `‖q − x‖₂`.
pub fn adapt_euclidean_to_ip(x: &VectorSet, q: &VectorSet) -> Result<(VectorSet, VectorSet)> {
    if x.similarity() != Similarity::Euclidean {
        return Err(Error::param(format!(
            "adaptation expects Euclidean data, got {:?}",
            x.similarity()
        )));
    }
    if x.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: x.dim(),
            found: q.dim(),
        });
    }
    let dim = x.dim() + 1;
    let mut xs = Vec::with_capacity(x.len() * dim);
    for row in x.rows() {
        xs.extend(adapt_database_vector(row));
    }
    let mut qs = Vec::with_capacity(q.len() * dim);
    for row in q.rows() {
        qs.extend(adapt_query_vector(row));
    }
    // Lifted rows are nonzero whenever the inputs were, so skip revalidation.
    Ok((
        VectorSet {
            dim,
            data: xs,
            similarity: Similarity::InnerProduct,
            normalized: false,
        },
        VectorSet {
            dim,
            data: qs,
            similarity: Similarity::InnerProduct,
            normalized: false,
        },
    ))
}

pub fn adapt_database_vector(x: &[f32]) -> Vec<f32> {
    let sq: f64 = x.iter().map(|v| f64::from(*v) * f64::from(*v)).sum();
    let mut out = x.to_vec();
    out.push((-0.5 * sq) as f32);
    out
}

pub fn adapt_query_vector(q: &[f32]) -> Vec<f32> {
    let mut out = q.to_vec();
    out.push(1.0);
    out
}

/// Scales every row to unit Euclidean norm. Cosine datasets become
/// inner-product datasets. Already-normalized sets are returned unchanged.
pub fn normalize_rows(x: &VectorSet) -> Result<VectorSet> {
    if x.normalized {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(x.data.len());
    for (row, r) in x.rows().enumerate() {
        let norm = r.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow { row });
        }
        data.extend(r.iter().map(|v| (f64::from(*v) / norm) as f32));
    }
    let similarity = match x.similarity {
        Similarity::Cosine => Similarity::InnerProduct,
        s => s,
    };
    Ok(VectorSet {
        dim: x.dim,
        data,
        similarity,
        normalized: true,
    })
}

/// Disjoint, seeded learn/test subsets of a query set.
pub fn split_learn_test(
    q: &VectorSet,
    n_learn: usize,
    n_test: usize,
    seed: u64,
) -> Result<(VectorSet, VectorSet)> {
    let total = n_learn + n_test;
    if total > q.len() {
        return Err(Error::param(format!(
            "requested {n_learn} learn + {n_test} test queries but only {} exist",
            q.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, q.len(), total).into_vec();
    Ok((q.select(&picked[..n_learn]), q.select(&picked[n_learn..])))
}

/// Uniform seeded subsample of at most `limit` rows, kept in original order.
pub fn sample_rows(x: &VectorSet, limit: usize, seed: u64) -> VectorSet {
    if x.len() <= limit {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, x.len(), limit).into_vec();
    picked.sort_unstable();
    x.select(&picked)
}

/// Rescales queries so their sample second-moment matrix is the identity
/// (ZCA whitening with the queries' own statistics).
pub fn whiten(q: &VectorSet) -> Result<VectorSet> {
    if q.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cols = q.to_columns();
    let moment = (&cols * cols.transpose()) / q.len() as f64;
    let (u, lambda) = linalg::symmetric_eigen_desc(&moment);
    if lambda[lambda.len() - 1] <= lambda[0] * 1e-12 {
        return Err(Error::Numeric("query second moment is singular".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        lambda.len(),
        lambda.iter().map(|l| 1.0 / l.sqrt()),
    ));
    let map = &u * inv_sqrt * u.transpose();
    let white = map * cols;
    let mut data = Vec::with_capacity(q.data.len());
    for j in 0..white.ncols() {
        data.extend(white.column(j).iter().map(|v| *v as f32));
    }
    VectorSet::new(q.dim, data, q.similarity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(values: &[f32]) -> Vec<u8> {
        let mut out = (values.len() as i32).to_le_bytes().to_vec();
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn single_record_file() {
        let set = parse_fvecs(&record(&[1.0, 2.0]), Similarity::InnerProduct).unwrap();
        assert_eq!(set.dim(), 2);
        assert_eq!(set.len(), 1);
        assert_eq!(set.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            parse_fvecs(&[], Similarity::InnerProduct),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn mixed_dimensions_report_second_record() {
        let mut bytes = record(&[1.0; 4]);
        bytes.extend(record(&[1.0; 5]));
        match parse_fvecs(&bytes, Similarity::InnerProduct) {
            Err(Error::DimensionMismatch {
                record,
                expected,
                found,
            }) => assert_eq!((record, expected, found), (1, 4, 5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_row_names_its_index() {
        let mut bytes = record(&[1.0, 1.0]);
        bytes.extend(record(&[0.0, 0.0]));
        assert!(matches!(
            parse_fvecs(&bytes, Similarity::InnerProduct),
            Err(Error::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn truncated_record() {
        let mut bytes = record(&[1.0, 2.0]);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            parse_fvecs(&bytes, Similarity::InnerProduct),
            Err(Error::Malformed { record: 0, .. })
        ));
    }

    #[test]
    fn adaptation_formula() {
        assert_eq!(adapt_database_vector(&[3.0, 4.0]), vec![3.0, 4.0, -12.5]);
        assert_eq!(adapt_query_vector(&[1.0, 2.0]), vec![1.0, 2.0, 1.0]);
        assert_eq!(adapt_database_vector(&[0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn adaptation_requires_euclidean() {
        let x = VectorSet::from_rows(&[[1.0f32, 0.0]], Similarity::InnerProduct).unwrap();
        assert!(adapt_euclidean_to_ip(&x, &x).is_err());
        let x = x.with_similarity(Similarity::Euclidean);
        let (xh, qh) = adapt_euclidean_to_ip(&x, &x).unwrap();
        assert_eq!(xh.dim(), 3);
        assert_eq!(qh.similarity(), Similarity::InnerProduct);
    }

    #[test]
    fn normalize_examples() {
        let x = VectorSet::from_rows(&[[3.0f32, 4.0], [1.0, 0.0]], Similarity::Cosine).unwrap();
        let n = normalize_rows(&x).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7 && (n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert!(n.is_normalized());
        assert_eq!(n.similarity(), Similarity::InnerProduct);
        assert_eq!(normalize_rows(&n).unwrap(), n);
    }

    #[test]
    fn zero_rows_cannot_be_built() {
        assert!(matches!(
            VectorSet::from_rows(&[[0.0f32, 0.0]], Similarity::InnerProduct),
            Err(Error::ZeroRow { row: 0 })
        ));
    }

    #[test]
    fn split_examples() {
        let rows: Vec<[f32; 1]> = (1..=20).map(|i| [i as f32]).collect();
        let q = VectorSet::from_rows(&rows, Similarity::InnerProduct).unwrap();
        let (a, b) = split_learn_test(&q, 10, 10, 3).unwrap();
        assert_eq!((a.len(), b.len()), (10, 10));
        let mut all: Vec<f32> = a.as_slice().iter().chain(b.as_slice()).copied().collect();
        all.sort_by(f32::total_cmp);
        assert_eq!(all, (1..=20).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(split_learn_test(&q, 10, 10, 3).unwrap(), (a, b));
        assert!(split_learn_test(&q, 15, 10, 3).is_err());
    }

    #[test]
    fn synth_single_row() {
        let (x, q) = synth_ood(1, 1, 4, 0, 0.0).unwrap();
        assert_eq!((x.len(), q.len()), (1, 1));
        assert!(synth_ood(0, 1, 4, 0, 0.0).is_err());
    }

    #[test]
    fn sample_rows_keeps_order() {
        let rows: Vec<[f32; 1]> = (1..=50).map(|i| [i as f32]).collect();
        let x = VectorSet::from_rows(&rows, Similarity::InnerProduct).unwrap();
        let s = sample_rows(&x, 10, 1);
        assert_eq!(s.len(), 10);
        assert!(s.as_slice().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_rows(&x, 100, 1), x);
    }

    #[test]
    fn whitened_queries_have_identity_moment() {
        let (_, q) = synth_ood(10, 500, 6, 4, 0.3).unwrap();
        let w = whiten(&q).unwrap();
        let c = w.to_columns();
        let m = (&c * c.transpose()) / w.len() as f64;
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((m[(i, j)] - target).abs() < 1e-4, "{i},{j}: {}", m[(i, j)]);
            }
        }
    }
}

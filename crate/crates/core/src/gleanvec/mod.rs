//! GleanVec: piecewise-linear dimensionality reduction.
//!
//! The database is partitioned by spherical k-means and every cluster gets its
//! own sphering projection pair `(A_c, B_c)`, all sharing the query-derived
//! `W`. A vector is stored as its tag `c` next to `x_low = B_c x`, and scored
//! against a query as `⟨A_c q, x_low⟩`, either computing `A_c q` per pair
//! (lazy) or once per cluster up front (eager).

pub mod kmeans;

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{normalize_rows, VectorSet};
use crate::error::{Error, Result};
use crate::io::{self as bin, Fingerprint};
use crate::linalg;
use crate::sphering::{
    compute_sphering, leanvec_loss_from_moments, second_moment, FlexibleSpheringModel,
    ProjectionPair,
};

pub use kmeans::{spherical_kmeans, KMeansParams, KMeansResult};

const MODEL_MAGIC: &[u8; 4] = b"GLVC";
const MODEL_VERSION: u32 = 1;

/// Tags are stored as `u16`.
pub const MAX_CLUSTERS: usize = 1 << 16;

/// Clusters with fewer members than `max(d, MIN_CLUSTER_ROWS)` reuse the
/// global projection pair.
pub const MIN_CLUSTER_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GleanVecParams {
    pub clusters: usize,
    pub d: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub sample_limit: usize,
}

impl GleanVecParams {
    pub fn new(clusters: usize, d: usize, seed: u64) -> Self {
        GleanVecParams {
            clusters,
            d,
            max_iters: kmeans::DEFAULT_MAX_ITERS,
            seed,
            sample_limit: kmeans::DEFAULT_SAMPLE_LIMIT,
        }
    }
}

/// `C` unit-norm centers with one `d × D` projection pair per center.
#[derive(Debug, Clone)]
pub struct GleanVecModel {
    dim: usize,
    d: usize,
    seed: u64,
    centers: Vec<Vec<f64>>,
    a_list: Vec<DMatrix<f64>>,
    b_list: Vec<DMatrix<f64>>,
    /// Full-dimension model used for `x′` and exact reranking.
    global: FlexibleSpheringModel,
    /// `A_c` row-major, concatenated over clusters.
    a_f32: Vec<f32>,
    fingerprint: u64,
}

impl PartialEq for GleanVecModel {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.d == other.d
            && self.seed == other.seed
            && self.centers == other.centers
            && self.a_list == other.a_list
            && self.b_list == other.b_list
            && self.global == other.global
    }
}

fn round_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| f64::from(*x as f32)).collect()
}

impl GleanVecModel {
    /// Assembles a model from explicit parts. Centers must be unit-norm and
    /// every matrix `d × D`. Values are rounded to storage precision.
    pub fn from_parts(
        centers: Vec<Vec<f64>>,
        pairs: Vec<ProjectionPair>,
        global: FlexibleSpheringModel,
        seed: u64,
    ) -> Result<Self> {
        let dim = global.dim();
        let clusters = centers.len();
        if clusters == 0 || clusters > MAX_CLUSTERS {
            return Err(Error::param(format!(
                "cluster count {clusters} outside [1, {MAX_CLUSTERS}]"
            )));
        }
        if pairs.len() != clusters {
            return Err(Error::param(format!(
                "{clusters} centers but {} projection pairs",
                pairs.len()
            )));
        }
        let d = pairs[0].d();
        if d == 0 || d > dim {
            return Err(Error::param(format!(
                "target dimension {d} outside [1, {dim}]"
            )));
        }
        for (c, mu) in centers.iter().enumerate() {
            let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if mu.len() != dim || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::param(format!(
                    "center {c} is not a unit vector in R^{dim}"
                )));
            }
        }
        for pair in &pairs {
            if pair.a.shape() != (d, dim) || pair.b.shape() != (d, dim) {
                return Err(Error::param(format!(
                    "projection pairs must all be {d}x{dim}"
                )));
            }
        }
        let centers: Vec<Vec<f64>> = centers.iter().map(|c| round_vec(c)).collect();
        let round = |m: &DMatrix<f64>| m.map(|v| f64::from(v as f32));
        let a_list: Vec<DMatrix<f64>> = pairs.iter().map(|p| round(&p.a)).collect();
        let b_list: Vec<DMatrix<f64>> = pairs.iter().map(|p| round(&p.b)).collect();
        let a_f32 = a_list.iter().flat_map(linalg::to_row_major_f32).collect();

        let mut fp = Fingerprint::new();
        fp.bytes(MODEL_MAGIC);
        fp.bytes(&(dim as u64).to_le_bytes());
        fp.bytes(&(d as u64).to_le_bytes());
        for mu in &centers {
            for v in mu {
                fp.bytes(&v.to_le_bytes());
            }
        }
        for (a, b) in a_list.iter().zip(&b_list) {
            fp.matrix(a);
            fp.matrix(b);
        }
        fp.bytes(&global.fingerprint().to_le_bytes());

        Ok(GleanVecModel {
            dim,
            d,
            seed,
            centers,
            a_list,
            b_list,
            global,
            a_f32,
            fingerprint: fp.finish(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn a_list(&self) -> &[DMatrix<f64>] {
        &self.a_list
    }

    pub fn b_list(&self) -> &[DMatrix<f64>] {
        &self.b_list
    }

    pub fn pair(&self, c: usize) -> ProjectionPair {
        ProjectionPair {
            a: self.a_list[c].clone(),
            b: self.b_list[c].clone(),
        }
    }

    pub fn global(&self) -> &FlexibleSpheringModel {
        &self.global
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn assign_tag(&self, x: &[f32]) -> Result<usize> {
        assign_tag(x, &self.centers)
    }

    /// First `out.len()` entries of `A_c q`. Shared by the lazy and eager
    /// kernels so both see identical arithmetic.
    #[inline]
    pub(crate) fn cluster_query_into(&self, c: usize, q: &[f32], out: &mut [f32]) {
        let start = c * self.d * self.dim;
        let block = &self.a_f32[start..start + out.len() * self.dim];
        linalg::matvec_into(block, q, out);
    }

    /// `B_c x` accumulated in `f64`.
    pub fn encode_low(&self, c: usize, x: &[f32]) -> Vec<f32> {
        let b = &self.b_list[c];
        (0..self.d)
            .map(|r| {
                (0..self.dim)
                    .map(|k| b[(r, k)] * f64::from(x[k]))
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Header (magic, version, D, d, C, seed), centers, `A_list`, `B_list`,
    /// then the global full-dimension model body; little-endian `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        bin::write_u32(w, MODEL_VERSION)?;
        bin::write_u32(w, self.dim as u32)?;
        bin::write_u32(w, self.d as u32)?;
        bin::write_u32(w, self.clusters() as u32)?;
        bin::write_u64(w, self.seed)?;
        let centers: Vec<f32> = self.centers.iter().flatten().map(|v| *v as f32).collect();
        bin::write_f32s(w, &centers)?;
        for a in &self.a_list {
            bin::write_matrix(w, a)?;
        }
        for b in &self.b_list {
            bin::write_matrix(w, b)?;
        }
        self.global.write_body(w)
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
        let d = bin::read_u32(r)? as usize;
        let clusters = bin::read_u32(r)? as usize;
        let seed = bin::read_u64(r)?;
        if dim == 0 || d == 0 || d > dim || clusters == 0 || clusters > MAX_CLUSTERS {
            return Err(Error::Format(format!(
                "bad model header D={dim} d={d} C={clusters}"
            )));
        }
        let centers: Vec<Vec<f64>> = bin::read_f32s(r, clusters * dim)?
            .chunks_exact(dim)
            .map(|c| c.iter().map(|v| f64::from(*v)).collect())
            .collect();
        let a_list = (0..clusters)
            .map(|_| bin::read_matrix(r, d, dim))
            .collect::<Result<Vec<_>>>()?;
        let b_list = (0..clusters)
            .map(|_| bin::read_matrix(r, d, dim))
            .collect::<Result<Vec<_>>>()?;
        let global = FlexibleSpheringModel::read_body(r, dim)?;
        let pairs = a_list
            .into_iter()
            .zip(b_list)
            .map(|(a, b)| ProjectionPair { a, b })
            .collect();
        Self::from_parts(centers, pairs, global, seed)
            .map_err(|e| Error::Format(format!("inconsistent model file: {e}")))
    }
}

/// `argmax_c ⟨x, μ_c⟩`, lowest index on ties.
pub fn assign_tag(x: &[f32], centers: &[Vec<f64>]) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::param("no centers"));
    }
    if let Some(mu) = centers.iter().find(|mu| mu.len() != x.len()) {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: mu.len(),
            found: x.len(),
        });
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroRow { row: 0 });
    }
    Ok(kmeans::nearest(centers, x).0)
}

/// Trains the centers and one projection pair per cluster.
///
/// `W` comes from the full query set and is shared by every cluster; each
/// cluster only fits its own database basis. With a single cluster the result
/// is the global sphering model sliced to `d`.
pub fn train_gleanvec(
    x_learn: &VectorSet,
    q_learn: &VectorSet,
    params: &GleanVecParams,
) -> Result<GleanVecModel> {
    if x_learn.is_empty() || q_learn.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if x_learn.dim() != q_learn.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: x_learn.dim(),
            found: q_learn.dim(),
        });
    }
    let dim = x_learn.dim();
    if params.clusters == 0 || params.clusters > MAX_CLUSTERS {
        return Err(Error::param(format!(
            "cluster count {} outside [1, {MAX_CLUSTERS}]",
            params.clusters
        )));
    }
    if params.d == 0 || params.d > dim {
        return Err(Error::param(format!(
            "target dimension {} outside [1, {dim}]",
            params.d
        )));
    }

    let transform = compute_sphering(q_learn)?;
    let global = FlexibleSpheringModel::fit(transform.clone(), x_learn)?;

    let km = spherical_kmeans(
        &normalize_rows(x_learn)?,
        &KMeansParams {
            clusters: params.clusters,
            max_iters: params.max_iters,
            seed: params.seed,
            sample_limit: params.sample_limit,
        },
    )?;
    log::info!(
        "k-means: {} clusters, {} iterations, converged={}",
        params.clusters,
        km.iterations,
        km.converged
    );
    let centers: Vec<Vec<f64>> = km.centers.iter().map(|c| round_vec(c)).collect();

    let mut members = vec![Vec::new(); centers.len()];
    for (i, row) in x_learn.rows().enumerate() {
        members[kmeans::nearest(&centers, row).0].push(i);
    }
    let floor = params.d.max(MIN_CLUSTER_ROWS);
    let n = x_learn.len();
    let pairs = members
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            if idx.len() == n {
                global.slice(params.d)
            } else if idx.len() < floor {
                log::info!(
                    "cluster {c} has {} members (< {floor}); using the global projection",
                    idx.len()
                );
                global.slice(params.d)
            } else {
                FlexibleSpheringModel::fit(transform.clone(), &x_learn.select(idx))?.slice(params.d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    GleanVecModel::from_parts(centers, pairs, global, params.seed)
}

/// `Σ_q Σ_x (⟨A_{c(x)} q, B_{c(x)} x⟩ − ⟨q, x⟩)²` over the tagged rows of `x`.
pub fn gleanvec_loss(model: &GleanVecModel, x: &VectorSet, q: &VectorSet) -> Result<f64> {
    let mut members = vec![Vec::new(); model.clusters()];
    for (i, row) in x.rows().enumerate() {
        members[model.assign_tag(row)?].push(i);
    }
    let k_q = second_moment(q);
    Ok(members
        .iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(c, idx)| {
            let k_x = second_moment(&x.select(idx));
            leanvec_loss_from_moments(&model.pair(c), &k_x, &k_q)
        })
        .sum())
}

/// Tagged low-dimensional records plus full-dimension `x′` rows for reranking.
///
/// Each record is `1 + d` little-endian 32-bit words: the tag in the low half
/// of the first word, then `x_low` as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDatabase {
    len: usize,
    dim: usize,
    d: usize,
    clusters: usize,
    fingerprint: u64,
    records: Vec<u32>,
    x_prime: Vec<f32>,
}

impl EncodedDatabase {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn stride(&self) -> usize {
        1 + self.d
    }

    #[inline]
    pub fn tag(&self, i: usize) -> usize {
        (self.records[i * self.stride()] & 0xffff) as usize
    }

    #[inline]
    pub fn x_low(&self, i: usize) -> &[f32] {
        let s = self.stride();
        bytemuck::cast_slice(&self.records[i * s + 1..(i + 1) * s])
    }

    #[inline]
    pub fn x_prime(&self, i: usize) -> &[f32] {
        &self.x_prime[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn records(&self) -> &[u32] {
        &self.records
    }

    pub(crate) fn x_prime_block(&self) -> &[f32] {
        &self.x_prime
    }

    pub(crate) fn from_parts(
        dim: usize,
        d: usize,
        clusters: usize,
        fingerprint: u64,
        records: Vec<u32>,
        x_prime: Vec<f32>,
    ) -> Result<Self> {
        let len = records.len() / (1 + d);
        if records.len() != len * (1 + d) || x_prime.len() != len * dim {
            return Err(Error::Format(
                "encoded database blocks disagree in length".into(),
            ));
        }
        let db = EncodedDatabase {
            len,
            dim,
            d,
            clusters,
            fingerprint,
            records,
            x_prime,
        };
        if let Some(i) = (0..len).find(|&i| db.tag(i) >= clusters) {
            return Err(Error::Malformed {
                record: i,
                reason: format!("tag {} out of range for {clusters} clusters", db.tag(i)),
            });
        }
        Ok(db)
    }
}

pub fn encode_database(x: &VectorSet, model: &GleanVecModel) -> Result<EncodedDatabase> {
    if x.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: model.dim(),
            found: x.dim(),
        });
    }
    let stride = 1 + model.d();
    let encoded: Vec<(Vec<u32>, Vec<f32>)> = x
        .as_slice()
        .par_chunks_exact(x.dim())
        .map(|row| {
            let tag = kmeans::nearest(model.centers(), row).0;
            let mut record = Vec::with_capacity(stride);
            record.push(tag as u32);
            record.extend(model.encode_low(tag, row).iter().map(|v| v.to_bits()));
            (record, model.global().encode(row))
        })
        .collect();
    let mut records = Vec::with_capacity(x.len() * stride);
    let mut x_prime = Vec::with_capacity(x.len() * x.dim());
    for (r, p) in encoded {
        records.extend(r);
        x_prime.extend(p);
    }
    Ok(EncodedDatabase {
        len: x.len(),
        dim: model.dim(),
        d: model.d(),
        clusters: model.clusters(),
        fingerprint: model.fingerprint(),
        records,
        x_prime,
    })
}

fn check_pair(model: &GleanVecModel, encoded: &EncodedDatabase) -> Result<()> {
    if model.fingerprint() != encoded.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: model.fingerprint(),
            found: encoded.fingerprint(),
        });
    }
    Ok(())
}

fn check_query(model: &GleanVecModel, q: &[f32]) -> Result<()> {
    if q.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: model.dim(),
            found: q.len(),
        });
    }
    Ok(())
}

fn check_index(encoded: &EncodedDatabase, i: usize) -> Result<()> {
    if i >= encoded.len() {
        return Err(Error::param(format!(
            "record {i} out of range for {} records",
            encoded.len()
        )));
    }
    Ok(())
}

/// `⟨A_{c_i} q, x_low_i⟩`, projecting the query for record `i`'s cluster on
/// the spot.
pub fn lazy_ip(
    q: &[f32],
    i: usize,
    encoded: &EncodedDatabase,
    model: &GleanVecModel,
) -> Result<f32> {
    check_pair(model, encoded)?;
    check_query(model, q)?;
    check_index(encoded, i)?;
    let mut view = vec![0.0; model.d()];
    Ok(lazy_score(model, encoded, q, i, &mut view))
}

/// Lazy score on the first `view.len()` dimensions.
#[inline]
pub(crate) fn lazy_score(
    model: &GleanVecModel,
    encoded: &EncodedDatabase,
    q: &[f32],
    i: usize,
    view: &mut [f32],
) -> f32 {
    model.cluster_query_into(encoded.tag(i), q, view);
    linalg::dot(view, &encoded.x_low(i)[..view.len()])
}

/// All `C` query views `A_c q`, computed once per search.
#[derive(Debug, Clone)]
pub struct EagerQueryState {
    fingerprint: u64,
    d: usize,
    views: Vec<f32>,
}

impl EagerQueryState {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn clusters(&self) -> usize {
        self.views.len() / self.d
    }

    pub fn view(&self, c: usize) -> &[f32] {
        &self.views[c * self.d..(c + 1) * self.d]
    }

    /// Eager score on the first `d_search` dimensions.
    #[inline]
    pub(crate) fn score(&self, encoded: &EncodedDatabase, i: usize, d_search: usize) -> f32 {
        let view = &self.view(encoded.tag(i))[..d_search];
        linalg::dot(view, &encoded.x_low(i)[..d_search])
    }
}

pub fn eager_prepare(q: &[f32], model: &GleanVecModel) -> Result<EagerQueryState> {
    check_query(model, q)?;
    let d = model.d();
    let mut views = vec![0.0; model.clusters() * d];
    for (c, view) in views.chunks_exact_mut(d).enumerate() {
        model.cluster_query_into(c, q, view);
    }
    Ok(EagerQueryState {
        fingerprint: model.fingerprint(),
        d,
        views,
    })
}

pub fn eager_ip(state: &EagerQueryState, i: usize, encoded: &EncodedDatabase) -> Result<f32> {
    if state.fingerprint != encoded.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: encoded.fingerprint(),
            found: state.fingerprint,
        });
    }
    check_index(encoded, i)?;
    Ok(state.score(encoded, i, state.d))
}

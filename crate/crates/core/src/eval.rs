//! Ground truth, recall, throughput, and the CSV tables behind the
//! loss/recall sweeps, tag traces and variance profiles.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{GroundTruth, VectorSet};
use crate::error::{Error, Result};
use crate::gleanvec::{
    self, encode_database, gleanvec_loss, train_gleanvec, GleanVecModel, GleanVecParams,
};
use crate::graph::{multi_step_search, GraphIndex, Reduced, SearchParams, SearchScratch};
use crate::linalg;
use crate::sphering::{
    leanvec_loss_from_moments, second_moment, total_ip_energy, train_flexible, train_svd_flexible,
    FlexibleSpheringModel,
};

/// Exact top-`k` ids by inner product for every query, ties to the lowest id.
///
/// Deliberately self-contained: plain `f64` loops, no shared kernels.
pub fn brute_force_topk(x: &VectorSet, q: &VectorSet, k: usize) -> Result<GroundTruth> {
    if x.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: x.dim(),
            found: q.dim(),
        });
    }
    if k == 0 || k > x.len() {
        return Err(Error::param(format!("k={k} outside [1, {}]", x.len())));
    }
    let dim = x.dim();
    let rows: Vec<Vec<u32>> = q
        .as_slice()
        .par_chunks_exact(dim.max(1))
        .map(|query| {
            let mut scored: Vec<(f64, u32)> = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                let row = &x.as_slice()[i * dim..(i + 1) * dim];
                let mut s = 0.0f64;
                for j in 0..dim {
                    s += f64::from(query[j]) * f64::from(row[j]);
                }
                scored.push((s, i as u32));
            }
            top_by_score(scored, k)
        })
        .collect();
    GroundTruth::new(k, rows.concat())
}

fn top_by_score(mut scored: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    let order = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored.into_iter().map(|s| s.1).collect()
}

/// Labels carried along with a recall measurement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunEcho {
    pub method: String,
    pub d: Option<usize>,
    pub kappa: Option<usize>,
    pub window: Option<usize>,
    pub clusters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub per_query: Vec<f64>,
    pub mean: f64,
    /// Ground-truth neighbors considered (`K`).
    pub truth_k: usize,
    /// Retrieved results considered (`k`).
    pub k: usize,
    pub echo: RunEcho,
}

/// `K`-recall@`k`: `|S ∩ G| / K` with `S` the first `k` results and `G` the
/// first `K` true neighbors of each query.
pub fn recall_at_k(
    results: &[Vec<u32>],
    truth: &GroundTruth,
    truth_k: usize,
    k: usize,
) -> Result<RecallReport> {
    if results.len() != truth.num_queries() {
        return Err(Error::param(format!(
            "{} result lists for {} queries",
            results.len(),
            truth.num_queries()
        )));
    }
    if truth_k == 0 || truth_k > truth.k() {
        return Err(Error::param(format!(
            "K={truth_k} outside [1, {}]",
            truth.k()
        )));
    }
    let per_query: Vec<f64> = results
        .iter()
        .zip(truth.rows())
        .map(|(res, gt)| {
            let gt: HashSet<u32> = gt[..truth_k].iter().copied().collect();
            let hits = res
                .iter()
                .take(k)
                .collect::<HashSet<_>>()
                .into_iter()
                .filter(|i| gt.contains(i))
                .count();
            hits as f64 / truth_k as f64
        })
        .collect();
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Ok(RecallReport {
        per_query,
        mean,
        truth_k,
        k,
        echo: RunEcho::default(),
    })
}

/// Top-`k` under `⟨A′q, x′⟩` restricted to the first `d` dimensions.
pub fn reduced_topk_sphering(
    model: &FlexibleSpheringModel,
    x: &VectorSet,
    q: &VectorSet,
    d: usize,
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    let db = model.project_database(x)?;
    Ok(q.as_slice()
        .par_chunks_exact(q.dim())
        .map(|query| {
            let view = model.preprocess_query(query);
            let scored = (0..db.len())
                .map(|i| {
                    (
                        f64::from(linalg::dot(&view[..d], &db.row(i)[..d])),
                        i as u32,
                    )
                })
                .collect();
            top_by_score(scored, k)
        })
        .collect())
}

/// Top-`k` under the GleanVec score `⟨A_c q, x_low⟩`.
pub fn reduced_topk_gleanvec(
    model: &GleanVecModel,
    x: &VectorSet,
    q: &VectorSet,
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    let db = encode_database(x, model)?;
    q.as_slice()
        .par_chunks_exact(q.dim())
        .map(|query| {
            let state = gleanvec::eager_prepare(query, model)?;
            let scored = (0..db.len())
                .map(|i| Ok((f64::from(gleanvec::eager_ip(&state, i, &db)?), i as u32)))
                .collect::<Result<Vec<_>>>()?;
            Ok(top_by_score(scored, k))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMethod {
    Svd,
    Sphering,
    GleanVec { clusters: usize },
}

impl SweepMethod {
    pub fn name(&self) -> String {
        match self {
            SweepMethod::Svd => "svd".into(),
            SweepMethod::Sphering => "sphering".into(),
            SweepMethod::GleanVec { clusters } => format!("gleanvec-c{clusters}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub d: usize,
    /// Inner-product loss on the learning queries, relative to `Σ ⟨q, x⟩²`.
    pub loss: f64,
    pub bf_recall: f64,
    pub graph_recall: Option<f64>,
    pub qps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepTable {
    pub fn get(&self, method: &str, d: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.d == d)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,d,loss,bf_recall,graph_recall,qps\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.d,
                r.loss,
                r.bf_recall,
                opt(r.graph_recall),
                opt(r.qps)
            );
        }
        out
    }
}

/// Graph search settings for sweeps; `d_search` is overridden per row.
#[derive(Debug, Clone, Copy)]
pub struct GraphSweep<'a> {
    pub graph: &'a GraphIndex,
    pub params: &'a SearchParams,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOptions<'a> {
    pub k: usize,
    /// Seeds for GleanVec runs; results are averaged over them.
    pub seeds: Vec<u64>,
    pub graph: Option<GraphSweep<'a>>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        SweepOptions {
            k: 10,
            seeds: (0..5).collect(),
            graph: None,
        }
    }
}

/// For every method and target dimension: train on `(x, q_learn)`, report the
/// relative loss, and the recall of the reduced similarity on `q_test` both
/// exhaustively and (optionally) through the graph.
pub fn loss_recall_sweep(
    x: &VectorSet,
    q_learn: &VectorSet,
    q_test: &VectorSet,
    d_values: &[usize],
    methods: &[SweepMethod],
    options: &SweepOptions,
) -> Result<SweepTable> {
    let k = options.k;
    let truth = brute_force_topk(x, q_test, k)?;
    let k_x = second_moment(x);
    let k_q = second_moment(q_learn);
    let energy = total_ip_energy(&k_x, &k_q);
    let relative = |loss: f64| if energy > 0.0 { loss / energy } else { loss };
    let mut table = SweepTable::default();

    for method in methods {
        let flexible = match method {
            SweepMethod::Svd => Some(train_svd_flexible(x)?),
            SweepMethod::Sphering => Some(train_flexible(x, q_learn)?),
            SweepMethod::GleanVec { .. } => None,
        };
        for &d in d_values {
            if d == 0 || d > x.dim() {
                return Err(Error::param(format!(
                    "sweep dimension {d} outside [1, {}]",
                    x.dim()
                )));
            }
            let row = if let Some(model) = &flexible {
                let pair = model.slice(d)?;
                let loss = relative(leanvec_loss_from_moments(&pair, &k_x, &k_q));
                let found = reduced_topk_sphering(model, x, q_test, d, k)?;
                let bf_recall = recall_at_k(&found, &truth, k, k)?.mean;
                let (graph_recall, qps) = match &options.graph {
                    Some(g) => {
                        let db = model.project_database(x)?;
                        let reduced = Reduced::Sphering {
                            model,
                            database: &db,
                        };
                        let (r, q) = graph_point(&reduced, g, q_test, d, &truth)?;
                        (Some(r), Some(q))
                    }
                    None => (None, None),
                };
                SweepRow {
                    method: method.name(),
                    d,
                    loss,
                    bf_recall,
                    graph_recall,
                    qps,
                }
            } else {
                let SweepMethod::GleanVec { clusters } = *method else {
                    unreachable!("only GleanVec lacks a flexible model")
                };
                let mut acc = [0.0f64; 4];
                let runs = options.seeds.len().max(1) as f64;
                let seeds = if options.seeds.is_empty() {
                    vec![0]
                } else {
                    options.seeds.clone()
                };
                for &seed in &seeds {
                    let model =
                        train_gleanvec(x, q_learn, &GleanVecParams::new(clusters, d, seed))?;
                    acc[0] += relative(gleanvec_loss(&model, x, q_learn)?);
                    let found = reduced_topk_gleanvec(&model, x, q_test, k)?;
                    acc[1] += recall_at_k(&found, &truth, k, k)?.mean;
                    if let Some(g) = &options.graph {
                        let db = encode_database(x, &model)?;
                        let reduced = Reduced::GleanVec {
                            model: &model,
                            database: &db,
                            eager: true,
                        };
                        let (r, q) = graph_point(&reduced, g, q_test, d, &truth)?;
                        acc[2] += r;
                        acc[3] += q;
                    }
                }
                SweepRow {
                    method: method.name(),
                    d,
                    loss: acc[0] / runs,
                    bf_recall: acc[1] / runs,
                    graph_recall: options.graph.map(|_| acc[2] / runs),
                    qps: options.graph.map(|_| acc[3] / runs),
                }
            };
            log::info!(
                "{} d={}: loss={:.4e} bf_recall={:.4}",
                row.method,
                row.d,
                row.loss,
                row.bf_recall
            );
            table.rows.push(row);
        }
    }
    Ok(table)
}

fn graph_point(
    reduced: &Reduced,
    sweep: &GraphSweep,
    q_test: &VectorSet,
    d: usize,
    truth: &GroundTruth,
) -> Result<(f64, f64)> {
    let mut params = sweep.params.clone();
    params.d_search = d;
    let report = qps_benchmark(reduced, sweep.graph, q_test, &params, sweep.threads)?;
    let recall = recall_at_k(&report.results, truth, truth.k().min(params.k), params.k)?;
    Ok((recall.mean, report.qps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpsReport {
    pub queries: usize,
    pub threads: usize,
    pub seconds: f64,
    pub qps: f64,
    /// Time spent on query preprocessing alone, as a fraction of `seconds`.
    pub preprocess_share: f64,
    pub results: Vec<Vec<u32>>,
}

/// Runs every query through [`multi_step_search`] on a pool of `threads`
/// workers and reports wall-clock throughput.
pub fn qps_benchmark(
    reduced: &Reduced,
    graph: &GraphIndex,
    queries: &VectorSet,
    params: &SearchParams,
    threads: usize,
) -> Result<QpsReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    let n = graph.len();
    let dim = queries.dim();
    let (results, seconds) = pool.install(|| {
        let start = Instant::now();
        let results = queries
            .as_slice()
            .par_chunks_exact(dim)
            .map_init(
                || SearchScratch::new(n),
                |scratch, q| multi_step_search(q, reduced, graph, params, scratch).map(|r| r.ids),
            )
            .collect::<Result<Vec<_>>>();
        (results, start.elapsed().as_secs_f64())
    });
    let results = results?;
    let pre_seconds = pool.install(|| {
        let start = Instant::now();
        queries
            .as_slice()
            .par_chunks_exact(dim)
            .for_each(|q| match reduced {
                Reduced::Sphering { model, .. } => {
                    std::hint::black_box(model.preprocess_query(q));
                }
                Reduced::GleanVec { model, eager, .. } => {
                    std::hint::black_box(model.global().preprocess_query(q));
                    if *eager {
                        std::hint::black_box(gleanvec::eager_prepare(q, model).ok());
                    }
                }
            });
        start.elapsed().as_secs_f64()
    });
    let seconds = seconds.max(1e-9);
    Ok(QpsReport {
        queries: queries.len(),
        threads: threads.max(1),
        seconds,
        qps: queries.len() as f64 / seconds,
        preprocess_share: (pre_seconds / seconds).min(1.0),
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub cum_mean: f64,
    pub cum_std: f64,
    pub win_mean: f64,
    pub win_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceTable {
    pub rows: Vec<TraceRow>,
}

impl TraceTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,cum_mean,cum_std,win_mean,win_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.cum_mean, r.cum_std, r.win_mean, r.win_std
            );
        }
        out
    }
}

/// Distinct tags among the first `s` expansions and among the last `window`
/// of them, for every step `s`.
pub fn distinct_tag_curves(trace: &[u16], window: usize) -> (Vec<usize>, Vec<usize>) {
    let window = window.max(1);
    let mut seen = HashSet::new();
    let mut cumulative = Vec::with_capacity(trace.len());
    let mut windowed = Vec::with_capacity(trace.len());
    for s in 0..trace.len() {
        seen.insert(trace[s]);
        cumulative.push(seen.len());
        let lo = (s + 1).saturating_sub(window);
        windowed.push(trace[lo..=s].iter().collect::<HashSet<_>>().len());
    }
    (cumulative, windowed)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation over queries of the distinct-tag curves. A
/// query whose search ended early contributes its final value to later steps.
pub fn trace_cluster_access(traces: &[Vec<u16>], window: usize) -> TraceTable {
    let curves: Vec<(Vec<usize>, Vec<usize>)> = traces
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| distinct_tag_curves(t, window))
        .collect();
    let steps = curves.iter().map(|c| c.0.len()).max().unwrap_or(0);
    let at = |v: &Vec<usize>, s: usize| v[s.min(v.len() - 1)] as f64;
    let rows = (0..steps)
        .map(|s| {
            let cum: Vec<f64> = curves.iter().map(|c| at(&c.0, s)).collect();
            let win: Vec<f64> = curves.iter().map(|c| at(&c.1, s)).collect();
            let (cum_mean, cum_std) = mean_std(&cum);
            let (win_mean, win_std) = mean_std(&win);
            TraceRow {
                step: s + 1,
                cum_mean,
                cum_std,
                win_mean,
                win_std,
            }
        })
        .collect();
    TraceTable { rows }
}

/// Normalized cumulative eigenvalue curves, `cumvar[r-1]` for rank `r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceProfile {
    /// `("global", curve)` first, then one entry per non-empty cluster.
    pub curves: Vec<(String, Vec<f64>)>,
}

impl VarianceProfile {
    pub fn curve(&self, name: &str) -> Option<&[f64]> {
        self.curves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    /// Smallest rank whose cumulative share reaches `fraction`.
    pub fn rank_to_capture(curve: &[f64], fraction: f64) -> usize {
        curve
            .iter()
            .position(|&v| v >= fraction - 1e-12)
            .map_or(curve.len(), |p| p + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,rank,cumvar\n");
        for (name, curve) in &self.curves {
            for (r, v) in curve.iter().enumerate() {
                let _ = writeln!(out, "{name},{},{v}", r + 1);
            }
        }
        out
    }
}

fn cumulative_spectrum(moment: &DMatrix<f64>) -> Vec<f64> {
    let (_, lambda) = linalg::symmetric_eigen_desc(moment);
    let clamped: Vec<f64> = lambda.iter().map(|l| l.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let mut acc = 0.0;
    clamped
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Spectrum of `Σ x xᵀ` over the whole set and, given a model, over each of
/// its clusters.
pub fn captured_variance_profile(
    x: &VectorSet,
    model: Option<&GleanVecModel>,
) -> Result<VarianceProfile> {
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut curves = vec![("global".to_string(), cumulative_spectrum(&second_moment(x)))];
    if let Some(model) = model {
        let mut members = vec![Vec::new(); model.clusters()];
        for (i, row) in x.rows().enumerate() {
            members[model.assign_tag(row)?].push(i);
        }
        for (c, idx) in members.iter().enumerate() {
            if !idx.is_empty() {
                curves.push((
                    c.to_string(),
                    cumulative_spectrum(&second_moment(&x.select(idx))),
                ));
            }
        }
    }
    Ok(VarianceProfile { curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_blobs, Similarity};

    fn set(rows: &[Vec<f32>]) -> VectorSet {
        VectorSet::from_rows(rows, Similarity::InnerProduct).unwrap()
    }

    #[test]
    fn brute_force_examples() {
        let x = set(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]);
        let q = set(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let gt = brute_force_topk(&x, &q, 2).unwrap();
        assert_eq!(gt.row(0), &[2, 0]);
        assert_eq!(gt.row(0), gt.row(1));
        let all = brute_force_topk(&x, &q, 3).unwrap();
        assert_eq!(all.row(0), &[2, 0, 1]);
        assert!(brute_force_topk(&x, &q, 4).is_err());
    }

    #[test]
    fn recall_examples() {
        let gt = GroundTruth::new(10, (0..10).collect()).unwrap();
        let same = vec![(0..10).collect::<Vec<u32>>()];
        assert_eq!(recall_at_k(&same, &gt, 10, 10).unwrap().mean, 1.0);
        let disjoint = vec![(10..20).collect::<Vec<u32>>()];
        assert_eq!(recall_at_k(&disjoint, &gt, 10, 10).unwrap().mean, 0.0);
        let nine = vec![(1..11).collect::<Vec<u32>>()];
        assert!((recall_at_k(&nine, &gt, 10, 10).unwrap().mean - 0.9).abs() < 1e-12);
    }

    #[test]
    fn trace_examples() {
        let t = trace_cluster_access(&[vec![0, 0, 0], vec![0, 0]], 2);
        assert!(t
            .rows
            .iter()
            .all(|r| r.cum_mean == 1.0 && r.win_mean == 1.0));
        assert_eq!(t.rows.len(), 3);
        let traces = vec![vec![0u16, 1, 2, 1, 3], vec![4, 4, 5]];
        let t = trace_cluster_access(&traces, 5);
        assert!(t.rows.iter().all(|r| r.cum_mean == r.win_mean));
        let (c, w) = distinct_tag_curves(&traces[0], 2);
        assert_eq!(c, vec![1, 2, 3, 3, 4]);
        assert_eq!(w, vec![1, 2, 2, 2, 2]);
        assert!(t
            .to_csv()
            .starts_with("step,cum_mean,cum_std,win_mean,win_std\n1,1,0,1,0\n"));
    }

    #[test]
    fn variance_examples() {
        let rank1 = set(&(1..20)
            .map(|i| vec![i as f32, 2.0 * i as f32, 0.0])
            .collect::<Vec<_>>());
        let p = captured_variance_profile(&rank1, None).unwrap();
        assert!((p.curve("global").unwrap()[0] - 1.0).abs() < 1e-9);

        let iso = set(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let p = captured_variance_profile(&iso, None).unwrap();
        for (r, v) in p.curve("global").unwrap().iter().enumerate() {
            assert!((v - (r + 1) as f64 / 4.0).abs() < 1e-9);
        }
        assert!(p.to_csv().starts_with("cluster,rank,cumvar\nglobal,1,"));
    }

    #[test]
    fn blob_clusters_capture_variance_earlier() {
        let (x, q) = synth_blobs(2000, 100, 16, 2, 3, 4).unwrap();
        let model = train_gleanvec(&x, &q, &GleanVecParams::new(2, 4, 0)).unwrap();
        let p = captured_variance_profile(&x, Some(&model)).unwrap();
        let global = VarianceProfile::rank_to_capture(p.curve("global").unwrap(), 0.8);
        for c in ["0", "1"] {
            assert!(VarianceProfile::rank_to_capture(p.curve(c).unwrap(), 0.8) < global);
        }
    }

    #[test]
    fn sweep_full_dimension_is_exact_and_loss_decreases() {
        let (x, q) = synth_blobs(500, 200, 8, 2, 3, 2).unwrap();
        let q_learn = q.select(&(0..100).collect::<Vec<_>>());
        let q_test = q.select(&(100..200).collect::<Vec<_>>());
        let options = SweepOptions {
            seeds: vec![0],
            ..SweepOptions::default()
        };
        let table = loss_recall_sweep(
            &x,
            &q_learn,
            &q_test,
            &[2, 4, 8],
            &[
                SweepMethod::Svd,
                SweepMethod::Sphering,
                SweepMethod::GleanVec { clusters: 2 },
            ],
            &options,
        )
        .unwrap();
        let full = table.get("sphering", 8).unwrap();
        assert!(full.loss < 1e-6 && full.bf_recall > 0.999);
        let losses: Vec<f64> = [2, 4, 8]
            .iter()
            .map(|&d| table.get("sphering", d).unwrap().loss)
            .collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(table.rows.len(), 9);
        let csv = table.to_csv();
        assert!(csv.starts_with("method,d,loss,bf_recall,graph_recall,qps\nsvd,2,"));
    }
}

//! Best-first beam search and the three-step search pipeline.

use crate::error::{Error, Result};
use crate::gleanvec::{self, EagerQueryState, EncodedDatabase, GleanVecModel};
use crate::linalg;
use crate::sphering::{FlexibleSpheringModel, SpheredDatabase};

use super::GraphIndex;

/// Similarity oracle over node ids; higher is better.
pub trait Scorer {
    fn score(&mut self, id: u32) -> f32;

    /// Cluster tag of a node, for tracing.
    fn tag(&self, _id: u32) -> Option<u16> {
        None
    }
}

/// Exact `f32` inner product against rows of a row-major block.
pub struct ExactScorer<'a> {
    pub query: &'a [f32],
    pub rows: &'a [f32],
}

impl Scorer for ExactScorer<'_> {
    #[inline]
    fn score(&mut self, id: u32) -> f32 {
        let dim = self.query.len();
        let start = id as usize * dim;
        linalg::dot(self.query, &self.rows[start..start + dim])
    }
}

/// Visited marks reused across searches.
#[derive(Debug, Clone, Default)]
pub struct SearchScratch {
    stamps: Vec<u32>,
    generation: u32,
}

impl SearchScratch {
    pub fn new(n: usize) -> Self {
        SearchScratch {
            stamps: vec![0; n],
            generation: 0,
        }
    }

    fn begin(&mut self, n: usize) {
        if self.stamps.len() < n {
            self.stamps.resize(n, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamps.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }

    /// Marks `id`; true if it was not yet visited in this search.
    #[inline]
    fn visit(&mut self, id: u32) -> bool {
        let slot = &mut self.stamps[id as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}

#[inline]
fn better(a: (u32, f32), b: (u32, f32)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

pub(crate) struct Beam {
    /// Best-first window, best first.
    pub list: Vec<(u32, f32)>,
    /// Nodes in expansion order (when requested).
    pub expanded: Vec<u32>,
    pub expansions: usize,
    pub scored: usize,
}

/// Best-first search from `entry` keeping a window of `window` candidates.
pub(crate) fn beam_search<'g, S: Scorer + ?Sized>(
    neighbors: impl Fn(u32) -> &'g [u32],
    n: usize,
    entry: u32,
    scorer: &mut S,
    window: usize,
    scratch: &mut SearchScratch,
    record_expanded: bool,
) -> Beam {
    scratch.begin(n);
    scratch.visit(entry);
    let window = window.max(1);
    let mut list: Vec<(u32, f32, bool)> = Vec::with_capacity(window + 1);
    list.push((entry, scorer.score(entry), false));
    let mut expanded = Vec::new();
    let mut expansions = 0;
    let mut scored = 1;
    let mut cur = 0;
    while cur < list.len() {
        list[cur].2 = true;
        let node = list[cur].0;
        expansions += 1;
        if record_expanded {
            expanded.push(node);
        }
        let mut next = cur + 1;
        for &nb in neighbors(node) {
            if !scratch.visit(nb) {
                continue;
            }
            let cand = (nb, scorer.score(nb));
            scored += 1;
            if list.len() == window {
                let last = list[window - 1];
                if !better(cand, (last.0, last.1)) {
                    continue;
                }
            }
            let pos = list.partition_point(|e| better((e.0, e.1), cand));
            list.insert(pos, (cand.0, cand.1, false));
            list.truncate(window);
            next = next.min(pos);
        }
        cur = next;
        while cur < list.len() && list[cur].2 {
            cur += 1;
        }
    }
    Beam {
        list: list.into_iter().map(|e| (e.0, e.1)).collect(),
        expanded,
        expansions,
        scored,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Nodes expanded (or scored, for a complete scan).
    pub visited: usize,
    pub distance_computations: usize,
    /// Tag of each expanded node, in expansion order.
    pub tag_trace: Vec<u16>,
}

/// Top candidates by approximate score, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub ids: Vec<u32>,
    pub scores: Vec<f32>,
    pub stats: SearchStats,
}

/// Best-first beam search returning the top `kappa` nodes by `scorer`. When
/// the window covers the whole graph every node is scored instead.
pub fn greedy_search<S: Scorer + ?Sized>(
    graph: &GraphIndex,
    scorer: &mut S,
    window: usize,
    kappa: usize,
    trace: bool,
    scratch: &mut SearchScratch,
) -> Candidates {
    let n = graph.len();
    let mut stats = SearchStats::default();
    let mut list = if window >= n {
        let mut all: Vec<(u32, f32)> = (0..n as u32).map(|i| (i, scorer.score(i))).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        stats.visited = n;
        stats.distance_computations = n;
        if trace {
            stats.tag_trace = (0..n as u32).filter_map(|i| scorer.tag(i)).collect();
        }
        all
    } else {
        let beam = beam_search(
            |i| graph.neighbors(i),
            n,
            graph.entry_point(),
            scorer,
            window,
            scratch,
            trace,
        );
        stats.visited = beam.expansions;
        stats.distance_computations = beam.scored;
        if trace {
            stats.tag_trace = beam
                .expanded
                .iter()
                .filter_map(|&i| scorer.tag(i))
                .collect();
        }
        beam.list
    };
    list.truncate(kappa);
    Candidates {
        ids: list.iter().map(|c| c.0).collect(),
        scores: list.iter().map(|c| c.1).collect(),
        stats,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchParams {
    pub k: usize,
    /// Candidates passed to the rerank step.
    pub kappa: usize,
    /// Best-first window.
    pub window: usize,
    /// Dimensions used by the main search.
    pub d_search: usize,
    /// Record the tag of every expanded node.
    pub trace: bool,
}

impl SearchParams {
    pub fn new(k: usize, kappa: usize, window: usize, d_search: usize) -> Self {
        SearchParams {
            k,
            kappa,
            window,
            d_search,
            trace: false,
        }
    }
}

/// Final neighbors ordered by decreasing reranked inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub stats: SearchStats,
}

/// A reduced representation together with the model that produced it.
#[derive(Debug, Clone, Copy)]
pub enum Reduced<'a> {
    Sphering {
        model: &'a FlexibleSpheringModel,
        database: &'a SpheredDatabase,
    },
    GleanVec {
        model: &'a GleanVecModel,
        database: &'a EncodedDatabase,
        eager: bool,
    },
}

impl Reduced<'_> {
    pub fn len(&self) -> usize {
        match self {
            Reduced::Sphering { database, .. } => database.len(),
            Reduced::GleanVec { database, .. } => database.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Reduced::Sphering { model, .. } => model.dim(),
            Reduced::GleanVec { model, .. } => model.dim(),
        }
    }

    /// Largest usable `d_search`.
    pub fn max_d(&self) -> usize {
        match self {
            Reduced::Sphering { model, .. } => model.dim(),
            Reduced::GleanVec { model, .. } => model.d(),
        }
    }

    fn full_model(&self) -> &FlexibleSpheringModel {
        match self {
            Reduced::Sphering { model, .. } => model,
            Reduced::GleanVec { model, .. } => model.global(),
        }
    }

    fn x_prime(&self, i: u32) -> &[f32] {
        match self {
            Reduced::Sphering { database, .. } => database.row(i as usize),
            Reduced::GleanVec { database, .. } => database.x_prime(i as usize),
        }
    }

    /// Model and data must come from the same training run.
    pub fn check(&self) -> Result<()> {
        let (expected, found) = match self {
            Reduced::Sphering { model, database } => (model.fingerprint(), database.fingerprint()),
            Reduced::GleanVec {
                model, database, ..
            } => (model.fingerprint(), database.fingerprint()),
        };
        if expected != found {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        Ok(())
    }
}

struct SpheringScorer<'a> {
    view: &'a [f32],
    database: &'a SpheredDatabase,
}

impl Scorer for SpheringScorer<'_> {
    #[inline]
    fn score(&mut self, id: u32) -> f32 {
        linalg::dot(
            self.view,
            &self.database.row(id as usize)[..self.view.len()],
        )
    }
}

struct LazyScorer<'a> {
    model: &'a GleanVecModel,
    database: &'a EncodedDatabase,
    query: &'a [f32],
    view: Vec<f32>,
}

impl Scorer for LazyScorer<'_> {
    #[inline]
    fn score(&mut self, id: u32) -> f32 {
        gleanvec::lazy_score(
            self.model,
            self.database,
            self.query,
            id as usize,
            &mut self.view,
        )
    }

    fn tag(&self, id: u32) -> Option<u16> {
        Some(self.database.tag(id as usize) as u16)
    }
}

struct EagerScorer<'a> {
    state: EagerQueryState,
    database: &'a EncodedDatabase,
    d_search: usize,
}

impl Scorer for EagerScorer<'_> {
    #[inline]
    fn score(&mut self, id: u32) -> f32 {
        self.state.score(self.database, id as usize, self.d_search)
    }

    fn tag(&self, id: u32) -> Option<u16> {
        Some(self.database.tag(id as usize) as u16)
    }
}

fn check_params(
    params: &SearchParams,
    reduced: &Reduced,
    graph: &GraphIndex,
    q: &[f32],
) -> Result<()> {
    let n = reduced.len();
    if graph.len() != n {
        return Err(Error::param(format!(
            "graph has {} nodes but the database has {n} records",
            graph.len()
        )));
    }
    if q.len() != reduced.dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: reduced.dim(),
            found: q.len(),
        });
    }
    if params.k == 0 || params.k > params.kappa || params.kappa > params.window {
        return Err(Error::param(format!(
            "need 1 ≤ k ≤ kappa ≤ window, got k={} kappa={} window={}",
            params.k, params.kappa, params.window
        )));
    }
    if params.kappa > n {
        return Err(Error::param(format!(
            "kappa {} exceeds the {n} records",
            params.kappa
        )));
    }
    if params.d_search == 0 || params.d_search > reduced.max_d() {
        return Err(Error::param(format!(
            "search dimension {} outside [1, {}]",
            params.d_search,
            reduced.max_d()
        )));
    }
    reduced.check()
}

/// Preprocess, search the graph on reduced scores for `kappa` candidates, then
/// rerank them by `⟨A′q, x′⟩` accumulated in `f64` and keep the top `k`.
pub fn multi_step_search(
    q: &[f32],
    reduced: &Reduced,
    graph: &GraphIndex,
    params: &SearchParams,
    scratch: &mut SearchScratch,
) -> Result<SearchResult> {
    check_params(params, reduced, graph, q)?;
    let window = params.window.min(graph.len());
    let full_view = reduced.full_model().preprocess_query(q);

    let candidates = match *reduced {
        Reduced::Sphering { database, .. } => {
            let mut scorer = SpheringScorer {
                view: &full_view[..params.d_search],
                database,
            };
            greedy_search(
                graph,
                &mut scorer,
                window,
                params.kappa,
                params.trace,
                scratch,
            )
        }
        Reduced::GleanVec {
            model,
            database,
            eager: false,
        } => {
            let mut scorer = LazyScorer {
                model,
                database,
                query: q,
                view: vec![0.0; params.d_search],
            };
            greedy_search(
                graph,
                &mut scorer,
                window,
                params.kappa,
                params.trace,
                scratch,
            )
        }
        Reduced::GleanVec {
            model,
            database,
            eager: true,
        } => {
            let mut scorer = EagerScorer {
                state: gleanvec::eager_prepare(q, model)?,
                database,
                d_search: params.d_search,
            };
            greedy_search(
                graph,
                &mut scorer,
                window,
                params.kappa,
                params.trace,
                scratch,
            )
        }
    };

    let mut reranked: Vec<(u32, f64)> = candidates
        .ids
        .iter()
        .map(|&i| (i, linalg::dot_f64(&full_view, reduced.x_prime(i))))
        .collect();
    reranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    reranked.truncate(params.k);
    Ok(SearchResult {
        ids: reranked.iter().map(|r| r.0).collect(),
        scores: reranked.iter().map(|r| r.1).collect(),
        stats: candidates.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_blobs, synth_mixture};
    use crate::gleanvec::{encode_database, train_gleanvec, GleanVecParams};
    use crate::graph::{build_graph, BuildParams};
    use crate::sphering::train_flexible;

    struct Table(Vec<f32>);

    impl Scorer for Table {
        fn score(&mut self, id: u32) -> f32 {
            self.0[id as usize]
        }
    }

    fn path_graph() -> GraphIndex {
        // 0 - 1 - 2 - 3 - 4, entry 0
        let adj = vec![vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3]];
        GraphIndex::from_adjacency(&adj, 2, 0).unwrap()
    }

    #[test]
    fn path_graph_hand_trace() {
        let g = path_graph();
        let mut scratch = SearchScratch::new(5);
        // Scores rise to a local peak at node 2, dip at 3, and peak at 4.
        let mut scorer = Table(vec![0.0, 1.0, 3.0, 2.0, 5.0]);
        let c = greedy_search(&g, &mut scorer, 1, 1, false, &mut scratch);
        // window 1: 0 → 1 → 2, then 3 is worse than 2 and is dropped.
        assert_eq!(c.ids, vec![2]);
        let c = greedy_search(&g, &mut scorer, 2, 1, false, &mut scratch);
        // window 2 keeps 3 and reaches 4.
        assert_eq!(c.ids, vec![4]);
    }

    #[test]
    fn full_window_is_brute_force() {
        let g = path_graph();
        let mut scratch = SearchScratch::new(5);
        let mut scorer = Table(vec![0.5, 0.5, 0.1, 0.9, 0.2]);
        let c = greedy_search(&g, &mut scorer, 5, 3, false, &mut scratch);
        assert_eq!(c.ids, vec![3, 0, 1]);
    }

    fn exact_top(x: &crate::dataset::VectorSet, q: &[f32], k: usize) -> Vec<u32> {
        let mut s: Vec<(u32, f64)> = x
            .rows()
            .enumerate()
            .map(|(i, r)| (i as u32, linalg::dot_f64(q, r)))
            .collect();
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        s.into_iter().take(k).map(|e| e.0).collect()
    }

    #[test]
    fn exact_oracle_with_full_window_contains_truth() {
        let (x, q) = synth_mixture(300, 5, 8, 3, 2).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 8,
                window: 16,
                ..BuildParams::default()
            },
        )
        .unwrap();
        let mut scratch = SearchScratch::new(x.len());
        for qr in q.rows() {
            let mut scorer = ExactScorer {
                query: qr,
                rows: x.as_slice(),
            };
            let c = greedy_search(&g, &mut scorer, 300, 20, false, &mut scratch);
            let truth = exact_top(&x, qr, 20);
            assert!(truth.iter().all(|t| c.ids.contains(t)));
        }
    }

    #[test]
    fn kappa_n_is_exact() {
        let (x, q) = synth_mixture(400, 5, 12, 3, 4).unwrap();
        let model = train_flexible(&x, &q).unwrap();
        let db = model.project_database(&x).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 8,
                window: 16,
                ..BuildParams::default()
            },
        )
        .unwrap();
        let reduced = Reduced::Sphering {
            model: &model,
            database: &db,
        };
        let mut scratch = SearchScratch::new(x.len());
        for qr in q.rows() {
            let r = multi_step_search(
                qr,
                &reduced,
                &g,
                &SearchParams::new(10, 400, 400, 2),
                &mut scratch,
            )
            .unwrap();
            assert_eq!(r.ids, exact_top(&x, qr, 10));
        }
    }

    #[test]
    fn lazy_and_eager_agree() {
        let (x, q) = synth_blobs(600, 10, 16, 3, 4, 8).unwrap();
        let model = train_gleanvec(&x, &q, &GleanVecParams::new(3, 6, 1)).unwrap();
        let db = encode_database(&x, &model).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 12,
                window: 24,
                ..BuildParams::default()
            },
        )
        .unwrap();
        let mut scratch = SearchScratch::new(x.len());
        let mut params = SearchParams::new(5, 20, 40, 4);
        params.trace = true;
        for qr in q.rows() {
            let lazy = Reduced::GleanVec {
                model: &model,
                database: &db,
                eager: false,
            };
            let eager = Reduced::GleanVec {
                model: &model,
                database: &db,
                eager: true,
            };
            let a = multi_step_search(qr, &lazy, &g, &params, &mut scratch).unwrap();
            let b = multi_step_search(qr, &eager, &g, &params, &mut scratch).unwrap();
            assert_eq!(a, b);
            assert!(a.stats.tag_trace.iter().all(|&t| (t as usize) < 3));
            assert_eq!(a.stats.tag_trace.len(), a.stats.visited);
        }
    }

    #[test]
    fn parameter_and_fingerprint_errors() {
        let (x, q) = synth_mixture(100, 3, 6, 2, 5).unwrap();
        let model = train_flexible(&x, &q).unwrap();
        let db = model.project_database(&x).unwrap();
        let other = crate::sphering::train_svd_flexible(&x).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 4,
                window: 8,
                ..BuildParams::default()
            },
        )
        .unwrap();
        let mut scratch = SearchScratch::new(100);
        let ok = Reduced::Sphering {
            model: &model,
            database: &db,
        };
        let q0 = q.row(0);
        for p in [
            SearchParams::new(0, 5, 10, 2),
            SearchParams::new(6, 5, 10, 2),
            SearchParams::new(5, 11, 10, 2),
            SearchParams::new(5, 101, 200, 2),
            SearchParams::new(5, 10, 20, 7),
        ] {
            assert!(matches!(
                multi_step_search(q0, &ok, &g, &p, &mut scratch),
                Err(Error::InvalidParameter(_))
            ));
        }
        let bad = Reduced::Sphering {
            model: &other,
            database: &db,
        };
        assert!(matches!(
            multi_step_search(q0, &bad, &g, &SearchParams::new(5, 10, 20, 2), &mut scratch),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}

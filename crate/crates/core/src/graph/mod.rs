//! Bounded-degree proximity graph over database ids.
//!
//! Construction inserts points in batches: every point of a batch searches the
//! graph built so far, prunes its candidates with the α rule, and the batch's
//! edges (forward and reverse) are merged in id order. Neighborhoods are
//! Euclidean, either on the raw vectors or on vectors lifted by
//! `sqrt(M² − ‖x‖²)` (with `M` the largest norm) so that Euclidean order
//! matches inner-product order. Searches score nodes by inner product.

pub mod search;

use std::collections::{HashSet, VecDeque};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::VectorSet;
use crate::error::{Error, Result};
use crate::io as bin;
use crate::linalg;

pub use search::{
    greedy_search, multi_step_search, Candidates, ExactScorer, Reduced, Scorer, SearchParams,
    SearchResult, SearchScratch, SearchStats,
};

const GRAPH_MAGIC: &[u8; 4] = b"GLGR";
const GRAPH_VERSION: u32 = 1;

/// Largest batch is this fraction of `n`.
const BATCH_FRACTION: usize = 200;

/// Distance used to pick neighbors during construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BuildMetric {
    #[default]
    Euclidean,
    /// Euclidean after the norm-completing lift.
    LiftedInnerProduct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    /// Maximum out-degree `R`.
    pub degree: usize,
    /// Search window used while inserting.
    pub window: usize,
    /// Pruning slack, applied to squared distances.
    pub alpha: f64,
    /// Insertion passes; later passes re-link every node on the full graph.
    pub passes: usize,
    pub metric: BuildMetric,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            degree: 32,
            window: 64,
            alpha: 1.2,
            passes: 1,
            metric: BuildMetric::Euclidean,
            seed: 0,
        }
    }
}

/// CSR adjacency with a fixed entry point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphIndex {
    degree: usize,
    entry_point: u32,
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
}

impl GraphIndex {
    /// Builds from adjacency lists, checking the structural invariants.
    pub fn from_adjacency(adjacency: &[Vec<u32>], degree: usize, entry_point: u32) -> Result<Self> {
        let mut offsets = Vec::with_capacity(adjacency.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in adjacency {
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len() as u32);
        }
        let g = GraphIndex {
            degree,
            entry_point,
            offsets,
            neighbors,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.entry_point as usize >= n {
            return Err(Error::Format(format!(
                "entry point {} out of range",
                self.entry_point
            )));
        }
        for i in 0..n {
            if self.offsets[i] > self.offsets[i + 1] {
                return Err(Error::Format(format!("offsets decrease at node {i}")));
            }
            let list = self.neighbors(i as u32);
            if list.len() > self.degree {
                return Err(Error::Format(format!(
                    "node {i} has {} neighbors, more than {}",
                    list.len(),
                    self.degree
                )));
            }
            if let Some(bad) = list.iter().find(|&&j| j as usize >= n || j as usize == i) {
                return Err(Error::Format(format!(
                    "node {i} has invalid neighbor {bad}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }

    #[inline]
    pub fn neighbors(&self, i: u32) -> &[u32] {
        let i = i as usize;
        &self.neighbors[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Number of nodes reachable from the entry point.
    pub fn reachable_count(&self) -> usize {
        let adj = |i: u32| self.neighbors(i);
        let mut seen = vec![false; self.len()];
        mark_reachable(&adj, self.entry_point, &mut seen)
    }

    /// Header (magic, version, n, R, entry point), `n + 1` offsets, then the
    /// neighbor ids; little-endian `u32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        bin::write_u32(w, GRAPH_VERSION)?;
        bin::write_u32(w, self.len() as u32)?;
        bin::write_u32(w, self.degree as u32)?;
        bin::write_u32(w, self.entry_point)?;
        bin::write_u32s(w, &self.offsets)?;
        bin::write_u32s(w, &self.neighbors)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        bin::expect_magic(r, GRAPH_MAGIC)?;
        let version = bin::read_u32(r)?;
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!(
                "unsupported graph version {version}"
            )));
        }
        let n = bin::read_u32(r)? as usize;
        let degree = bin::read_u32(r)? as usize;
        let entry_point = bin::read_u32(r)?;
        let offsets = bin::read_u32s(r, n + 1)?;
        if offsets[0] != 0 {
            return Err(Error::Format("first offset must be 0".into()));
        }
        let neighbors = bin::read_u32s(r, offsets[n] as usize)?;
        let g = GraphIndex {
            degree,
            entry_point,
            offsets,
            neighbors,
        };
        g.validate()?;
        Ok(g)
    }
}

fn mark_reachable<'a>(adj: &impl Fn(u32) -> &'a [u32], from: u32, seen: &mut [bool]) -> usize {
    if seen[from as usize] {
        return 0;
    }
    let mut count = 1;
    seen[from as usize] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &u in adj(v) {
            if !seen[u as usize] {
                seen[u as usize] = true;
                count += 1;
                queue.push_back(u);
            }
        }
    }
    count
}

/// Construction-time vectors with their squared norms. The lifted metric
/// appends `sqrt(M² − ‖x‖²)` so every row has norm `M` and Euclidean order
/// matches inner-product order; the plain metric appends a zero.
struct BuildSpace {
    dim: usize,
    rows: Vec<f32>,
    sq: Vec<f32>,
}

impl BuildSpace {
    fn new(x: &VectorSet, metric: BuildMetric) -> Self {
        let norms: Vec<f64> = x.rows().map(|r| linalg::dot_f64(r, r)).collect();
        let max_sq = norms.iter().copied().fold(0.0, f64::max);
        let dim = x.dim() + 1;
        let plain = metric == BuildMetric::Euclidean;
        let mut rows = Vec::with_capacity(x.len() * dim);
        let mut sq = Vec::new();
        for (r, n2) in x.rows().zip(&norms) {
            rows.extend_from_slice(r);
            rows.push(if plain {
                0.0
            } else {
                (max_sq - n2).max(0.0).sqrt() as f32
            });
            sq.push(if plain { *n2 as f32 } else { max_sq as f32 });
        }
        BuildSpace { dim, rows, sq }
    }

    #[inline]
    fn row(&self, i: u32) -> &[f32] {
        let i = i as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn ip(&self, a: u32, b: u32) -> f32 {
        linalg::dot(self.row(a), self.row(b))
    }

    #[inline]
    fn dist(&self, a: u32, b: u32) -> f32 {
        (self.sq[a as usize] + self.sq[b as usize] - 2.0 * self.ip(a, b)).max(0.0)
    }
}

/// α-pruning: keep the closest candidate, drop every candidate it covers
/// (`α · d(kept, c) ≤ d(p, c)`), repeat until `degree` are kept.
fn robust_prune(space: &BuildSpace, p: u32, pool: &[u32], alpha: f32, degree: usize) -> Vec<u32> {
    let mut cands: Vec<(u32, f32)> = pool
        .iter()
        .filter(|&&c| c != p)
        .map(|&c| (c, space.dist(p, c)))
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cands.dedup_by_key(|c| c.0);
    let mut kept = Vec::with_capacity(degree);
    let mut alive = vec![true; cands.len()];
    for i in 0..cands.len() {
        if kept.len() == degree {
            break;
        }
        if !alive[i] {
            continue;
        }
        let star = cands[i].0;
        kept.push(star);
        for j in i + 1..cands.len() {
            if alive[j] && alpha * space.dist(star, cands[j].0) <= cands[j].1 {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Node maximizing the inner product with the dataset mean; lowest id on ties.
pub fn mean_direction_entry(x: &VectorSet) -> u32 {
    let mut mean = vec![0.0f64; x.dim()];
    for r in x.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += f64::from(*v);
        }
    }
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, r) in x.rows().enumerate() {
        let s: f64 = mean.iter().zip(r).map(|(m, v)| m * f64::from(*v)).sum();
        if s > best.1 {
            best = (i as u32, s);
        }
    }
    best.0
}

struct BuildScorer<'a> {
    space: &'a BuildSpace,
    target: u32,
}

impl Scorer for BuildScorer<'_> {
    #[inline]
    fn score(&mut self, id: u32) -> f32 {
        -self.space.dist(self.target, id)
    }
}

pub fn build_graph(x: &VectorSet, params: &BuildParams) -> Result<GraphIndex> {
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if params.degree < 2 {
        return Err(Error::param("graph degree must be at least 2"));
    }
    if params.window < 1 {
        return Err(Error::param("build window must be at least 1"));
    }
    if params.alpha.is_nan() || params.alpha < 1.0 {
        return Err(Error::param("alpha must be at least 1"));
    }
    let n = x.len();
    if n > u32::MAX as usize {
        return Err(Error::param("too many vectors for 32-bit ids"));
    }
    let entry = mean_direction_entry(x);
    let degree = params.degree;

    if n <= degree + 1 {
        let adjacency: Vec<Vec<u32>> = (0..n as u32)
            .map(|i| (0..n as u32).filter(|&j| j != i).collect())
            .collect();
        return GraphIndex::from_adjacency(&adjacency, degree, entry);
    }

    let space = BuildSpace::new(x, params.metric);
    let mut order: Vec<u32> = (0..n as u32).filter(|&i| i != entry).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));

    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    let max_batch = (n / BATCH_FRACTION).max(1);
    for pass in 0..params.passes.max(1) {
        let refine = pass > 0;
        let mut inserted = if refine { n } else { 1 };
        let mut cursor = 0usize;
        while cursor < order.len() {
            let size = inserted.min(max_batch).min(order.len() - cursor);
            let batch = &order[cursor..cursor + size];
            insert_batch(&mut adjacency, batch, &space, entry, params, refine);
            inserted += size;
            cursor += size;
        }
    }

    repair_connectivity(&mut adjacency, &space, entry, params, n);
    GraphIndex::from_adjacency(&adjacency, degree, entry)
}

/// Searches the frozen graph for every point of `batch`, prunes the expanded
/// nodes (plus the current neighbors when refining) into its out-edges, then
/// merges reverse edges in id order.
fn insert_batch(
    adjacency: &mut [Vec<u32>],
    batch: &[u32],
    space: &BuildSpace,
    entry: u32,
    params: &BuildParams,
    refine: bool,
) {
    let n = adjacency.len();
    let alpha = params.alpha as f32;
    let degree = params.degree;
    let frozen = &*adjacency;
    let forward: Vec<Vec<u32>> = batch
        .par_iter()
        .map_init(
            || SearchScratch::new(n),
            |scratch, &p| {
                let mut scorer = BuildScorer { space, target: p };
                let beam = search::beam_search(
                    |i| frozen[i as usize].as_slice(),
                    n,
                    entry,
                    &mut scorer,
                    params.window,
                    scratch,
                    true,
                );
                let mut pool = beam.expanded;
                if refine {
                    pool.extend_from_slice(&frozen[p as usize]);
                }
                robust_prune(space, p, &pool, alpha, degree)
            },
        )
        .collect();

    let mut reverse: Vec<(u32, u32)> = Vec::new();
    for (&p, list) in batch.iter().zip(&forward) {
        for &j in list {
            reverse.push((j, p));
        }
    }
    for (&p, list) in batch.iter().zip(forward) {
        adjacency[p as usize] = list;
    }
    reverse.sort_unstable();
    let groups: Vec<(u32, Vec<u32>)> = reverse
        .chunk_by(|a, b| a.0 == b.0)
        .map(|g| (g[0].0, g.iter().map(|e| e.1).collect()))
        .collect();
    let frozen = &*adjacency;
    let merged: Vec<Vec<u32>> = groups
        .par_iter()
        .map(|(j, incoming)| {
            let current = &frozen[*j as usize];
            let mut pool = current.clone();
            pool.extend(incoming.iter().filter(|p| !current.contains(p)));
            if pool.len() <= degree {
                pool
            } else {
                robust_prune(space, *j, &pool, alpha, degree)
            }
        })
        .collect();
    for ((j, _), list) in groups.iter().zip(merged) {
        adjacency[*j as usize] = list;
    }
}

/// Links every node the entry point cannot reach from the closest reachable
/// node with a free slot (or, failing that, in place of that node's farthest
/// neighbor), then continues the reachability sweep from it.
fn repair_connectivity(
    adjacency: &mut [Vec<u32>],
    space: &BuildSpace,
    entry: u32,
    params: &BuildParams,
    n: usize,
) {
    let mut seen = vec![false; n];
    {
        let adj = |i: u32| adjacency[i as usize].as_slice();
        mark_reachable(&adj, entry, &mut seen);
    }
    let missing: Vec<u32> = (0..n as u32).filter(|&i| !seen[i as usize]).collect();
    if missing.is_empty() {
        return;
    }
    log::debug!("repairing {} unreachable nodes", missing.len());
    let mut scratch = SearchScratch::new(n);
    for u in missing {
        if seen[u as usize] {
            continue;
        }
        // Reachable nodes nearest to `u` first: the beam, then everything else.
        let beam = {
            let mut scorer = BuildScorer { space, target: u };
            let adj = |i: u32| adjacency[i as usize].as_slice();
            search::beam_search(
                adj,
                n,
                entry,
                &mut scorer,
                params.window,
                &mut scratch,
                false,
            )
        };
        let mut order: Vec<u32> = beam.list.iter().map(|c| c.0).collect();
        let in_beam: HashSet<u32> = order.iter().copied().collect();
        let mut rest: Vec<u32> = (0..n as u32)
            .filter(|&v| seen[v as usize] && !in_beam.contains(&v))
            .collect();
        rest.sort_by(|&a, &b| {
            space
                .dist(u, a)
                .total_cmp(&space.dist(u, b))
                .then(a.cmp(&b))
        });
        order.extend(rest);

        if let Some(host) = order
            .iter()
            .copied()
            .find(|&v| adjacency[v as usize].len() < params.degree)
        {
            adjacency[host as usize].push(u);
        } else {
            // Every reachable node is full. Edges outside a BFS tree can go
            // without disconnecting anything, and one always exists because
            // the reachable nodes carry more edges than the tree.
            let parent = bfs_parents(adjacency, entry, n);
            let (host, slot) = order
                .iter()
                .find_map(|&v| {
                    let list = &adjacency[v as usize];
                    (0..list.len())
                        .filter(|&j| parent[list[j] as usize] != v)
                        .max_by(|&a, &b| {
                            space
                                .dist(v, list[a])
                                .total_cmp(&space.dist(v, list[b]))
                                .then(list[a].cmp(&list[b]))
                        })
                        .map(|j| (v, j))
                })
                .expect("a full reachable set has a non-tree edge");
            adjacency[host as usize][slot] = u;
        }
        let adj = |i: u32| adjacency[i as usize].as_slice();
        mark_reachable(&adj, u, &mut seen);
    }
}

fn bfs_parents(adjacency: &[Vec<u32>], entry: u32, n: usize) -> Vec<u32> {
    let mut parent = vec![u32::MAX; n];
    parent[entry as usize] = entry;
    let mut queue = VecDeque::from([entry]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v as usize] {
            if parent[w as usize] == u32::MAX {
                parent[w as usize] = v;
                queue.push_back(w);
            }
        }
    }
    parent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_mixture, Similarity};

    fn bfs_oracle(g: &GraphIndex) -> usize {
        let mut seen = std::collections::HashSet::from([g.entry_point()]);
        let mut stack = vec![g.entry_point()];
        while let Some(v) = stack.pop() {
            for &u in g.neighbors(v) {
                if seen.insert(u) {
                    stack.push(u);
                }
            }
        }
        seen.len()
    }

    #[test]
    fn single_node_graph() {
        let x = VectorSet::from_rows(&[vec![1.0f32, 2.0]], Similarity::InnerProduct).unwrap();
        let g = build_graph(&x, &BuildParams::default()).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.neighbors(0).is_empty());
        assert_eq!(g.entry_point(), 0);
    }

    #[test]
    fn small_sets_are_complete() {
        let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32 + 1.0, 1.0]).collect();
        let x = VectorSet::from_rows(&rows, Similarity::InnerProduct).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 4,
                ..BuildParams::default()
            },
        )
        .unwrap();
        for i in 0..5u32 {
            let mut nb = g.neighbors(i).to_vec();
            nb.sort();
            let expect: Vec<u32> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(nb, expect);
        }
    }

    #[test]
    fn gaussian_graph_is_connected_and_valid() {
        let (x, _) = synth_mixture(1000, 1, 16, 1, 3).unwrap();
        let params = BuildParams {
            degree: 32,
            window: 64,
            alpha: 1.2,
            passes: 2,
            metric: BuildMetric::Euclidean,
            seed: 7,
        };
        let g = build_graph(&x, &params).unwrap();
        g.validate().unwrap();
        assert_eq!(bfs_oracle(&g), 1000);
        assert_eq!(g.reachable_count(), 1000);
        assert_eq!(g, build_graph(&x, &params).unwrap());
    }

    #[test]
    fn graph_file_round_trip() {
        let (x, _) = synth_mixture(200, 1, 8, 2, 1).unwrap();
        let g = build_graph(
            &x,
            &BuildParams {
                degree: 8,
                window: 16,
                ..BuildParams::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 4 * (201 + g.edge_count()));
        assert_eq!(GraphIndex::read_from(&mut buf.as_slice()).unwrap(), g);
        assert!(GraphIndex::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn invalid_adjacency_is_rejected() {
        assert!(GraphIndex::from_adjacency(&[vec![0]], 2, 0).is_err());
        assert!(GraphIndex::from_adjacency(&[vec![1], vec![2]], 2, 0).is_err());
        assert!(
            GraphIndex::from_adjacency(&[vec![1, 2, 3], vec![], vec![], vec![]], 2, 0).is_err()
        );
    }
}

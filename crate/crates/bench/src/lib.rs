//! Shared fixtures for the benchmarks.

use glean_core::dataset::{split_learn_test, synth_mixture, VectorSet};
use glean_core::gleanvec::{
    encode_database, train_gleanvec, EncodedDatabase, GleanVecModel, GleanVecParams,
};
use glean_core::graph::{build_graph, BuildParams, GraphIndex};
use glean_core::sphering::{train_flexible, FlexibleSpheringModel, SpheredDatabase};

pub struct Fixture {
    pub x: VectorSet,
    pub queries: VectorSet,
    pub sphering: FlexibleSpheringModel,
    pub sphered: SpheredDatabase,
    pub gleanvec: GleanVecModel,
    pub encoded: EncodedDatabase,
    pub graph: GraphIndex,
}

impl Fixture {
    /// Mixture data of `n` rows in `dim` dimensions with models reducing to `d`.
    pub fn new(n: usize, dim: usize, d: usize, clusters: usize) -> Self {
        let (x, q) = synth_mixture(n, 400, dim, 16, 1).expect("synthetic data");
        let (q_learn, queries) = split_learn_test(&q, 200, 200, 2).expect("query split");
        let sphering = train_flexible(&x, &q_learn).expect("sphering model");
        let sphered = sphering.project_database(&x).expect("projection");
        let gleanvec = train_gleanvec(&x, &q_learn, &GleanVecParams::new(clusters, d, 3))
            .expect("gleanvec model");
        let encoded = encode_database(&x, &gleanvec).expect("encoding");
        let graph = build_graph(
            &x,
            &BuildParams {
                degree: 32,
                ..BuildParams::default()
            },
        )
        .expect("graph");
        Fixture {
            x,
            queries,
            sphering,
            sphered,
            gleanvec,
            encoded,
            graph,
        }
    }
}

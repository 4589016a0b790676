use std::path::Path;

use log::info;
use rayon::prelude::*;

use glean_core::dataset::{
    adapt_euclidean_to_ip, load_fvecs, load_ivecs, normalize_rows, save_fvecs, save_ivecs,
    split_learn_test, synth_blobs, synth_mixture, synth_ood, Similarity, VectorSet,
};
use glean_core::eval::{
    brute_force_topk, captured_variance_profile, loss_recall_sweep, qps_benchmark, recall_at_k,
    trace_cluster_access, GraphSweep, SweepMethod, SweepOptions,
};
use glean_core::formats::{load_graph, reduced, save_graph, Database, Model};
use glean_core::gleanvec::{encode_database, train_gleanvec, GleanVecParams};
use glean_core::graph::{
    build_graph, multi_step_search, BuildMetric, BuildParams, GraphIndex, Reduced, SearchParams,
    SearchResult, SearchScratch,
};
use glean_core::sphering::{train_flexible, train_svd_flexible};
use glean_core::streaming::{parse_log, replay, StreamingIndex, SummaryStats};
use glean_core::GroundTruth;

use crate::{
    BenchArgs, BuildArgs, Cli, Command, ConvertArgs, Failure, Method, MetricArg, Mode, SearchArgs,
    SearchOpts, SimilarityArg, StreamReplayArgs, SweepArgs, SynthArgs, SynthKind, TraceArgs,
    TrainArgs,
};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    if cli.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Build(a) => build(a),
        Command::Search(a) => search(a, cli.threads),
        Command::Sweep(a) => sweep(a, cli.threads),
        Command::Bench(a) => bench(a, cli.threads),
        Command::Trace(a) => trace(a),
        Command::StreamReplay(a) => stream_replay(a),
    }
}

/// Tags a core error with the file it came from.
fn at<T>(path: &Path, r: glean_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: {}", path.display(), f.message),
        }
    })
}

fn load(path: &Path) -> Result<VectorSet, Failure> {
    let set = at(path, load_fvecs(path))?;
    info!(
        "loaded {} vectors of dimension {} from {}",
        set.len(),
        set.dim(),
        path.display()
    );
    Ok(set)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

fn convert(a: ConvertArgs) -> Outcome {
    let x = load(&a.data)?;
    let q = load(&a.queries)?;
    let (x, q) = match a.similarity {
        SimilarityArg::Ip => (x, q),
        SimilarityArg::Cosine => (normalize_rows(&x)?, normalize_rows(&q)?),
        SimilarityArg::Euclidean => adapt_euclidean_to_ip(
            &x.with_similarity(Similarity::Euclidean),
            &q.with_similarity(Similarity::Euclidean),
        )?,
    };
    at(&a.out_x, save_fvecs(&a.out_x, &x))?;
    at(&a.out_q, save_fvecs(&a.out_q, &q))?;
    if let Some(path) = &a.out_gt {
        let gt = brute_force_topk(&x, &q, a.k.min(x.len()))?;
        at(path, save_ivecs(path, &gt))?;
        info!(
            "wrote top-{} ground truth for {} queries",
            gt.k(),
            gt.num_queries()
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let (x, q) = match a.kind {
        SynthKind::Ood => synth_ood(a.n, a.queries, a.dim, a.seed, a.angle)?,
        SynthKind::Mixture => synth_mixture(a.n, a.queries, a.dim, a.components, a.seed)?,
        SynthKind::Blobs => synth_blobs(a.n, a.queries, a.dim, a.blobs, a.intrinsic_dim, a.seed)?,
    };
    at(&a.out_x, save_fvecs(&a.out_x, &x))?;
    at(&a.out_q, save_fvecs(&a.out_q, &q))?;
    info!("wrote {} database and {} query vectors", x.len(), q.len());
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let x = load(&a.data)?;
    let queries = || -> Result<VectorSet, Failure> {
        let path = a
            .queries
            .as_ref()
            .ok_or_else(|| Failure::usage("--queries is required for this method"))?;
        load(path)
    };
    let model = match a.method {
        Method::Svd => Model::Sphering(train_svd_flexible(&x)?),
        Method::Sphering => Model::Sphering(train_flexible(&x, &queries()?)?),
        Method::Gleanvec => {
            let d = a
                .dim
                .ok_or_else(|| Failure::usage("--dim is required for gleanvec"))?;
            let params = GleanVecParams {
                max_iters: a.max_iters,
                sample_limit: a.sample_limit,
                ..GleanVecParams::new(a.clusters, d, a.seed)
            };
            Model::GleanVec(train_gleanvec(&x, &queries()?, &params)?)
        }
    };
    info!("trained model {:#018x}", model.fingerprint());
    at(&a.out, model.save(&a.out))?;
    Ok(())
}

fn build(a: BuildArgs) -> Outcome {
    let x = load(&a.data)?;
    let model = at(&a.model, Model::load(&a.model))?;
    if model.dim() != x.dim() {
        return Err(Failure {
            code: 3,
            message: format!(
                "model dimension {} does not match data dimension {}",
                model.dim(),
                x.dim()
            ),
        });
    }
    let db = match &model {
        Model::Sphering(m) => Database::Sphered(m.project_database(&x)?),
        Model::GleanVec(m) => Database::GleanVec(encode_database(&x, m)?),
    };
    at(&a.out_db, db.save(&a.out_db))?;
    info!("encoded {} records", db.len());
    let params = BuildParams {
        degree: a.degree,
        window: a.window,
        alpha: a.alpha,
        passes: a.passes,
        metric: match a.metric {
            MetricArg::Euclidean => BuildMetric::Euclidean,
            MetricArg::Lifted => BuildMetric::LiftedInnerProduct,
        },
        seed: a.seed,
    };
    let graph = build_graph(&x, &params)?;
    info!("built graph with {} edges", graph.edge_count());
    at(&a.out_graph, save_graph(&a.out_graph, &graph))?;
    Ok(())
}

struct Loaded {
    model: Model,
    db: Database,
    graph: GraphIndex,
    queries: VectorSet,
}

impl Loaded {
    fn open(o: &SearchOpts) -> Result<Self, Failure> {
        let model = at(&o.model, Model::load(&o.model))?;
        let db = at(&o.db, Database::load(&o.db))?;
        let graph = at(&o.graph, load_graph(&o.graph))?;
        let queries = load(&o.queries)?;
        if graph.len() != db.len() {
            return Err(Failure {
                code: 3,
                message: format!("graph has {} nodes, database {}", graph.len(), db.len()),
            });
        }
        Ok(Loaded {
            model,
            db,
            graph,
            queries,
        })
    }

    fn reduced(&self, o: &SearchOpts) -> Result<Reduced<'_>, Failure> {
        Ok(reduced(&self.model, &self.db, o.mode == Mode::Eager)?)
    }
}

fn search_params(o: &SearchOpts, r: &Reduced) -> SearchParams {
    SearchParams::new(
        o.k,
        o.kappa,
        o.window,
        o.d_search.unwrap_or_else(|| r.max_d()),
    )
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure {
            code: 1,
            message: format!("thread pool: {e}"),
        })
}

fn search_all(
    r: &Reduced,
    graph: &GraphIndex,
    queries: &VectorSet,
    params: &SearchParams,
    threads: usize,
) -> Result<Vec<SearchResult>, Failure> {
    let results: glean_core::Result<Vec<SearchResult>> = pool(threads)?.install(|| {
        (0..queries.len())
            .into_par_iter()
            .map_init(
                || SearchScratch::new(graph.len()),
                |scratch, i| multi_step_search(queries.row(i), r, graph, params, scratch),
            )
            .collect()
    });
    Ok(results?)
}

fn search(a: SearchArgs, threads: usize) -> Outcome {
    let l = Loaded::open(&a.search)?;
    let r = l.reduced(&a.search)?;
    let params = search_params(&a.search, &r);
    let results = search_all(&r, &l.graph, &l.queries, &params, threads)?;
    let ids: Vec<u32> = results.iter().flat_map(|s| s.ids.iter().copied()).collect();
    at(
        &a.out,
        save_ivecs(&a.out, &GroundTruth::new(params.k, ids)?),
    )?;
    if let Some(path) = &a.gt {
        let gt = at(path, load_ivecs(path))?;
        let lists: Vec<Vec<u32>> = results.into_iter().map(|s| s.ids).collect();
        let report = recall_at_k(&lists, &gt, params.k.min(gt.k()), params.k)?;
        println!("queries={} recall={:.6}", lists.len(), report.mean);
    }
    Ok(())
}

fn sweep(a: SweepArgs, threads: usize) -> Outcome {
    let x = load(&a.data)?;
    let q = load(&a.queries)?;
    let learn = a.learn.unwrap_or(q.len() / 2);
    let test = a.test.unwrap_or(q.len().saturating_sub(learn));
    let (q_learn, q_test) = split_learn_test(&q, learn, test, a.split_seed)?;
    let mut methods = Vec::new();
    for m in &a.methods {
        match m {
            Method::Svd => methods.push(SweepMethod::Svd),
            Method::Sphering => methods.push(SweepMethod::Sphering),
            Method::Gleanvec => methods.extend(
                a.clusters
                    .iter()
                    .map(|&clusters| SweepMethod::GleanVec { clusters }),
            ),
        }
    }
    let graph = a.graph.as_ref().map(|p| at(p, load_graph(p))).transpose()?;
    let params = SearchParams::new(a.k, a.kappa, a.window, 1);
    let options = SweepOptions {
        k: a.k,
        seeds: (0..a.seeds).collect(),
        graph: graph.as_ref().map(|graph| GraphSweep {
            graph,
            params: &params,
            threads,
        }),
    };
    let table = loss_recall_sweep(&x, &q_learn, &q_test, &a.dims, &methods, &options)?;
    info!("swept {} rows", table.rows.len());
    write_text(&a.out, &table.to_csv())
}

fn bench(a: BenchArgs, threads: usize) -> Outcome {
    if a.repeat == 0 {
        return Err(Failure::usage("--repeat must be at least 1"));
    }
    let l = Loaded::open(&a.search)?;
    let r = l.reduced(&a.search)?;
    let params = search_params(&a.search, &r);
    println!("run,queries,threads,seconds,qps,preprocess_share");
    for run in 0..a.repeat {
        let rep = qps_benchmark(&r, &l.graph, &l.queries, &params, threads)?;
        println!(
            "{run},{},{},{:.6},{:.2},{:.4}",
            rep.queries, rep.threads, rep.seconds, rep.qps, rep.preprocess_share
        );
    }
    Ok(())
}

fn trace(a: TraceArgs) -> Outcome {
    let l = Loaded::open(&a.search)?;
    let Model::GleanVec(model) = &l.model else {
        return Err(Failure::usage("trace needs a gleanvec model"));
    };
    let r = l.reduced(&a.search)?;
    let mut params = search_params(&a.search, &r);
    params.trace = true;
    let mut scratch = SearchScratch::new(l.graph.len());
    let mut traces = Vec::with_capacity(l.queries.len());
    for q in l.queries.rows() {
        traces.push(
            multi_step_search(q, &r, &l.graph, &params, &mut scratch)?
                .stats
                .tag_trace,
        );
    }
    write_text(
        &a.out,
        &trace_cluster_access(&traces, a.trace_window).to_csv(),
    )?;
    if let (Some(data), Some(out)) = (&a.data, &a.variance_out) {
        let x = load(data)?;
        write_text(out, &captured_variance_profile(&x, Some(model))?.to_csv())?;
    }
    Ok(())
}

fn stream_replay(a: StreamReplayArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.log).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", a.log.display()),
    })?;
    let ops = parse_log(&text)?;
    let x = load(&a.data)?;
    let q = load(&a.queries)?;
    if x.dim() != q.dim() {
        return Err(Failure {
            code: 3,
            message: "data and query dimensions differ".into(),
        });
    }
    let stats = SummaryStats::new(x.dim())
        .with_period(a.period)
        .with_decay(a.decay)?;
    let mut index = StreamingIndex::new(stats);
    let summary = replay(&mut index, &ops, &x, &q)?;
    if a.reproject {
        let moved = index.reproject_all()?;
        info!("reprojected {moved} records");
    }
    println!(
        "inserts={} removes={} queries={} refreshes={} epoch={} live={}",
        summary.inserts,
        summary.removes,
        summary.queries,
        summary.refreshes,
        index.epoch(),
        index.len()
    );
    if let Some(path) = &a.model_out {
        at(
            path,
            Model::Sphering(index.model().as_ref().clone()).save(path),
        )?;
    }
    Ok(())
}

//! End-to-end behavior across modules: files, statistical orderings, sweeps.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_4;

use glean_core::dataset::{
    load_fvecs, load_ivecs, save_fvecs, save_ivecs, split_learn_test, synth_blobs, synth_mixture,
    synth_ood, whiten,
};
use glean_core::eval::{
    brute_force_topk, captured_variance_profile, loss_recall_sweep, SweepMethod, SweepOptions,
};
use glean_core::formats::{load_graph, reduced, save_graph, Database, Model};
use glean_core::gleanvec::{encode_database, gleanvec_loss, train_gleanvec, GleanVecParams};
use glean_core::graph::{
    build_graph, multi_step_search, BuildParams, Reduced, SearchParams, SearchScratch,
};
use glean_core::linalg::principal_angles;
use glean_core::sphering::{leanvec_loss, train_flexible, train_svd_baseline};

#[test]
fn saved_artifacts_reproduce_search_results() {
    let dir = tempfile::tempdir().unwrap();
    let (x, q) = synth_blobs(800, 40, 12, 3, 4, 2).unwrap();
    save_fvecs(dir.path().join("x.fvecs"), &x).unwrap();
    let x2 = load_fvecs(dir.path().join("x.fvecs")).unwrap();
    assert_eq!(x2.as_slice(), x.as_slice());
    let gt = brute_force_topk(&x, &q, 5).unwrap();
    save_ivecs(dir.path().join("gt.ivecs"), &gt).unwrap();
    assert_eq!(load_ivecs(dir.path().join("gt.ivecs")).unwrap(), gt);

    let model = Model::GleanVec(train_gleanvec(&x, &q, &GleanVecParams::new(3, 4, 1)).unwrap());
    let Model::GleanVec(inner) = &model else {
        unreachable!()
    };
    let db = Database::GleanVec(encode_database(&x, inner).unwrap());
    let graph = build_graph(
        &x,
        &BuildParams {
            degree: 12,
            window: 24,
            ..BuildParams::default()
        },
    )
    .unwrap();
    model.save(dir.path().join("m.bin")).unwrap();
    db.save(dir.path().join("db.bin")).unwrap();
    save_graph(dir.path().join("g.bin"), &graph).unwrap();

    let model2 = Model::load(dir.path().join("m.bin")).unwrap();
    let db2 = Database::load(dir.path().join("db.bin")).unwrap();
    let graph2 = load_graph(dir.path().join("g.bin")).unwrap();
    let params = SearchParams::new(5, 20, 40, 4);
    let mut scratch = SearchScratch::new(x.len());
    for eager in [false, true] {
        let before = reduced(&model, &db, eager).unwrap();
        let after = reduced(&model2, &db2, eager).unwrap();
        for qr in q.rows() {
            let a = multi_step_search(qr, &before, &graph, &params, &mut scratch).unwrap();
            let b = multi_step_search(qr, &after, &graph2, &params, &mut scratch).unwrap();
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.scores, b.scores);
        }
    }
}

#[test]
fn whitened_queries_recover_the_svd_subspace() {
    let (x, q) = synth_ood(4_000, 500, 16, 8, 0.0).unwrap();
    let q = whiten(&q).unwrap();
    let model = train_flexible(&x, &q).unwrap();
    for d in [2, 4, 8] {
        let svd = train_svd_baseline(&x, d).unwrap();
        let angles = principal_angles(&model.slice(d).unwrap().b, &svd.b);
        assert!(angles.iter().all(|&a| a <= 0.05), "d={d}: {angles:?}");
    }
}

#[test]
fn sphering_loss_beats_svd_out_of_distribution() {
    for angle in [FRAC_PI_4, 1.2, 1.5] {
        let (x, q) = synth_ood(3_000, 400, 16, 12, angle).unwrap();
        let model = train_flexible(&x, &q).unwrap();
        for d in [2, 4, 8, 12] {
            let ours = leanvec_loss(&model.slice(d).unwrap(), &x, &q);
            let base = leanvec_loss(&train_svd_baseline(&x, d).unwrap(), &x, &q);
            assert!(ours <= base, "angle {angle} d={d}: {ours} > {base}");
        }
    }
}

#[test]
fn more_clusters_do_not_raise_mean_error_on_two_blobs() {
    let (x, q) = synth_blobs(4_000, 400, 24, 2, 6, 14).unwrap();
    let mean_loss = |c: usize| {
        (0..5u64)
            .map(|seed| {
                gleanvec_loss(
                    &train_gleanvec(&x, &q, &GleanVecParams::new(c, 4, seed)).unwrap(),
                    &x,
                    &q,
                )
                .unwrap()
            })
            .sum::<f64>()
            / 5.0
    };
    let losses: Vec<f64> = [1, 2, 4].into_iter().map(mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn variance_profiles_are_cumulative() {
    let (x, q) = synth_blobs(3_000, 200, 16, 3, 4, 15).unwrap();
    let model = train_gleanvec(&x, &q, &GleanVecParams::new(3, 4, 0)).unwrap();
    let profile = captured_variance_profile(&x, Some(&model)).unwrap();
    assert_eq!(profile.curves[0].0, "global");
    assert_eq!(profile.curves.len(), 4);
    for (name, curve) in &profile.curves {
        assert_eq!(curve.len(), 16, "{name}");
        assert!(
            curve.windows(2).all(|w| w[1] >= w[0] - 1e-12),
            "{name}: {curve:?}"
        );
        assert!((curve[15] - 1.0).abs() < 1e-9, "{name}");
    }
    let csv = profile.to_csv();
    assert_eq!(csv.lines().next(), Some("cluster,rank,cumvar"));
    assert_eq!(csv.lines().count(), 1 + 4 * 16);
}

#[test]
fn recall_improves_with_search_dimension_on_average() {
    let (x, q) = synth_mixture(6_000, 400, 32, 8, 16).unwrap();
    let (q_learn, q_test) = split_learn_test(&q, 200, 200, 3).unwrap();
    let model = train_flexible(&x, &q_learn).unwrap();
    let db = model.project_database(&x).unwrap();
    let graph = build_graph(
        &x,
        &BuildParams {
            degree: 24,
            window: 48,
            ..BuildParams::default()
        },
    )
    .unwrap();
    let reduced = Reduced::Sphering {
        model: &model,
        database: &db,
    };
    let gt = brute_force_topk(&x, &q_test, 10).unwrap();
    let mut scratch = SearchScratch::new(x.len());
    let mut recalls = Vec::new();
    for d in [2, 4, 8, 16, 32] {
        let params = SearchParams::new(10, 20, 60, d);
        let mut hits = 0;
        for (i, qr) in q_test.rows().enumerate() {
            let truth: HashSet<u32> = gt.row(i).iter().copied().collect();
            let r = multi_step_search(qr, &reduced, &graph, &params, &mut scratch).unwrap();
            hits += r.ids.iter().filter(|id| truth.contains(id)).count();
        }
        recalls.push(hits as f64 / (10 * q_test.len()) as f64);
    }
    assert!(recalls.windows(2).all(|w| w[1] >= w[0]), "{recalls:?}");
}

#[test]
fn sweep_rows_are_unique_and_losses_fall_with_d() {
    let (x, q) = synth_ood(3_000, 400, 16, 17, 1.0).unwrap();
    let (q_learn, q_test) = split_learn_test(&q, 200, 200, 4).unwrap();
    let ds = [2, 4, 8, 12, 16];
    let methods = [
        SweepMethod::Svd,
        SweepMethod::Sphering,
        SweepMethod::GleanVec { clusters: 2 },
    ];
    let options = SweepOptions {
        seeds: vec![0, 1],
        ..SweepOptions::default()
    };
    let table = loss_recall_sweep(&x, &q_learn, &q_test, &ds, &methods, &options).unwrap();
    let keys: HashSet<(String, usize)> =
        table.rows.iter().map(|r| (r.method.clone(), r.d)).collect();
    assert_eq!(keys.len(), table.rows.len());
    assert_eq!(table.rows.len(), ds.len() * methods.len());
    let losses: Vec<f64> = ds
        .iter()
        .map(|&d| table.get("sphering", d).unwrap().loss)
        .collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(table
        .rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.bf_recall)));
    assert_eq!(
        table.to_csv().lines().next(),
        Some("method,d,loss,bf_recall,graph_recall,qps")
    );
}

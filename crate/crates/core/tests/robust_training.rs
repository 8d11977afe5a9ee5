use std::sync::OnceLock;

use grasp::dataset::Split;
use grasp::pipeline::{training_groups, PipelineConfig, Run, Summary};
use grasp::robusttrain::{evaluate, train_gdro, GroupSource, GroupWeights};

fn clean_run() -> &'static Summary {
    static CELL: OnceLock<Summary> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = PipelineConfig::synthetic(0, false);
        cfg.gdro.oracle = false;
        let dir = tempfile::tempdir().unwrap();
        Run::new(cfg, dir.path()).unwrap().pipeline().unwrap()
    })
}

#[test]
fn gdro_worst_group_at_least_erm_on_clean_synthetic() {
    let ev = &clean_run().evaluation;
    let gdro = ev.method("grasp_gdro").unwrap().report.worst;
    let erm = ev.method("erm").unwrap().report.worst;
    assert!(gdro >= erm, "gDRO {gdro}, ERM {erm}");
}

#[test]
fn gdro_worst_group_on_clean_synthetic() {
    let worst = clean_run().evaluation.method("grasp_gdro").unwrap().report.worst;
    assert!(worst >= 0.73, "worst-group accuracy {worst}");
}

#[test]
fn erm_on_clean_synthetic_matches_reference_accuracy() {
    let r = &clean_run().evaluation.method("erm").unwrap().report;
    assert!((r.worst - 0.6667).abs() <= 0.07, "worst {}", r.worst);
    assert!((r.average - 0.8823).abs() <= 0.07, "average {}", r.average);
}

#[test]
fn reports_respect_their_invariants() {
    for m in &clean_run().evaluation.methods {
        let r = &m.report;
        assert!(r.worst <= r.average + 1e-12);
        for g in &r.per_group {
            if let Some(a) = g.accuracy {
                assert!((0.0..=1.0).contains(&a));
            }
        }
        assert!((r.train_group_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn outlier_removal_leaves_the_test_set_alone() {
    let cfg = PipelineConfig::synthetic(2, true);
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(cfg, dir.path()).unwrap();
    let ds = run.generate().unwrap();
    let erm = run.erm(&ds).unwrap();
    let inf = run.infer(&ds, &erm).unwrap();
    assert!(inf.grasp.n_outliers() > 0);
    let groups = training_groups(&ds, &inf.grasp);
    for i in ds.indices(Split::Test) {
        assert!(groups.train[i].is_none() && groups.val[i].is_none());
    }
    let n_removed = ds
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| groups.train[i].is_none())
        .count();
    assert!(n_removed > 0);

    let mut tcfg = run.config().gdro.train.clone();
    tcfg.epochs = 2;
    let arch = run.config().gdro.arch.resolve(2, 2).unwrap();
    let fit = train_gdro(&ds, &groups.train, groups.n_groups, &arch, &tcfg, 0.01).unwrap();
    let fracs = vec![0.25; 4];
    let report = evaluate(&fit.params, &ds, Split::Test, GroupSource::True, &fracs).unwrap();
    let counted: usize = report.per_group.iter().map(|g| g.count).sum();
    assert_eq!(counted, ds.indices(Split::Test).len());
    for q in &fit.q_trace {
        assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(GroupWeights::uniform(groups.n_groups).len(), groups.n_groups);
}

use std::path::Path;

use segtta_core::backend::BackendDescriptor;
use segtta_core::fusion::VotingMode;
use segtta_core::nifti;
use segtta_core::phantom::{phantom, write_phantom_dataset, PhantomSpec};
use segtta_core::pipeline::{
    render_report, run_ablation, run_ablation_with, run_segtta, run_segtta_with, run_threshold_sweep,
    run_threshold_sweep_with, DatasetManifest, PipelineError, PredictionCache, ReportFormat,
    RunConfig, RunContext, RunResult,
};
use segtta_core::runlog::RunLog;
use segtta_core::{Augmentation, AugmentationSpec};

fn dataset(dir: &Path, count: usize, n: usize, classes: usize) -> DatasetManifest {
    let path = write_phantom_dataset(dir, count, &PhantomSpec::cube(n, classes), 11).unwrap();
    DatasetManifest::load(path).unwrap()
}

fn oracle(confidence: f64) -> BackendDescriptor {
    BackendDescriptor::Oracle {
        ground_truth: None,
        confidence,
    }
}

fn noisy() -> BackendDescriptor {
    BackendDescriptor::NoisyOracle {
        jitter: 1,
        flip: 0.1,
        confidence: 0.9,
    }
}

/// Everything except wall-clock timings.
fn strip(mut r: RunResult) -> RunResult {
    r.timings = Default::default();
    r
}

#[test]
fn perfect_predictor_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 16, 2);
    let mut config = RunConfig::new(vec![oracle(1.0)]);
    config.augmentations = vec![AugmentationSpec::identity()];
    let r = run_segtta(&config, &m).unwrap();
    let fused = r.variant("fused").unwrap();
    assert_eq!(fused.cases.len(), 2);
    for c in &fused.cases {
        let mr = c.metrics.as_ref().unwrap();
        assert_eq!(mr.overlap.miou, 1.0);
        assert_eq!(mr.overlap.mdice, 1.0);
        assert_eq!(mr.hd95_mm, Some(0.0));
    }
}

#[test]
fn duplicate_backends_change_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 14, 3);
    let one = RunConfig::new(vec![oracle(0.8)]);
    let mut two = one.clone();
    two.backends.push(oracle(0.8));
    let a = run_segtta(&one, &m).unwrap();
    let b = run_segtta(&two, &m).unwrap();
    for (va, vb) in a.variants.iter().zip(&b.variants) {
        assert_eq!(va.cases, vb.cases);
    }
}

#[test]
fn config_order_does_not_change_fused_result() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 14, 3);
    let mut a = RunConfig::new(vec![
        noisy(),
        BackendDescriptor::NoisyOracle {
            jitter: 0,
            flip: 0.2,
            confidence: 0.8,
        },
    ]);
    a.augmentations = AugmentationSpec::default_set();
    let mut b = a.clone();
    b.backends.reverse();
    b.augmentations.reverse();
    let fused = |c: &RunConfig| run_segtta(c, &m).unwrap().variant("fused").unwrap().cases.clone();
    assert_eq!(fused(&a), fused(&b));
}

#[test]
fn ensemble_beats_single_member() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 3, 20, 2);
    let mut single = RunConfig::new(vec![noisy()]);
    single.augmentations = vec![];
    let mut ensemble = RunConfig::new(vec![noisy(); 5]);
    ensemble.augmentations = vec![];
    let s = run_segtta(&single, &m).unwrap();
    let e = run_segtta(&ensemble, &m).unwrap();
    let si = s.variant("fused").unwrap().aggregate.miou.unwrap();
    let ei = e.variant("fused").unwrap().aggregate.miou.unwrap();
    assert!(ei > si, "ensemble {ei} vs single {si}");
}

#[test]
fn ablation_rows_and_precondition() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 12, 2);
    let config = RunConfig::new(vec![noisy()]);
    let r = run_ablation(&config, &m).unwrap();
    let names: Vec<&str> = r.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "full",
            "-gamma_correction",
            "-contrast_enhancement",
            "-gaussian_blur",
            "-gaussian_noise"
        ]
    );
    let mut identity_only = config.clone();
    identity_only.augmentations = vec![AugmentationSpec::identity()];
    assert!(matches!(
        run_ablation(&identity_only, &m),
        Err(PipelineError::InsufficientAugmentations { count: 1 })
    ));
}

#[test]
fn ablation_rows_match_reduced_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 12, 3);
    let config = RunConfig::new(vec![noisy(), oracle(0.7)]);
    let ctx = RunContext::new();
    let ab = run_ablation_with(&config, &m, &ctx).unwrap();
    assert!(ctx.cache.hits() > 0);
    for (i, row) in ab.variants.iter().enumerate() {
        let sub = if i == 0 {
            config.clone()
        } else {
            config.without_augmentation(i - 1)
        };
        let fresh = run_segtta(&sub, &m).unwrap();
        let fused = fresh.variant("fused").unwrap();
        assert_eq!(row.cases, fused.cases, "{}", row.name);
        assert_eq!(row.aggregate, fused.aggregate, "{}", row.name);
    }
}

#[test]
fn cache_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 12, 2);
    let config = RunConfig::new(vec![noisy(), noisy()]);
    let cached = run_ablation_with(&config, &m, &RunContext::new()).unwrap();
    let uncached = run_ablation_with(
        &config,
        &m,
        &RunContext::new().with_cache(PredictionCache::disabled()),
    )
    .unwrap();
    assert_eq!(strip(cached), strip(uncached));
}

#[test]
fn sweep_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 3, 14, 2);
    let config = RunConfig::new(vec![noisy(); 3]);
    let ctx = RunContext::new();
    let sweep = run_threshold_sweep_with(&config, &m, &[0.3, 0.6, 0.9], &ctx).unwrap();
    assert_eq!(sweep.variants.len(), 3);
    assert_eq!(sweep.variants[0].reference.as_deref(), Some("tau=0.60"));
    for case in 0..3 {
        let vols: Vec<f64> = sweep
            .variants
            .iter()
            .map(|v| v.cases[case].foreground_mm3)
            .collect();
        assert!(vols[0] >= vols[1] && vols[1] >= vols[2], "{vols:?}");
    }
    let single = run_threshold_sweep(&config, &m, &[0.45]).unwrap();
    let mut at = config.clone();
    at.tau = 0.45;
    let run = run_segtta(&at, &m).unwrap();
    assert_eq!(single.variants[0].cases, run.variant("fused").unwrap().cases);

    assert!(matches!(
        run_threshold_sweep(&config, &m, &[0.3, 0.0]),
        Err(PipelineError::InvalidTau(_))
    ));
}

#[test]
fn failing_case_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = dataset(dir.path(), 3, 10, 2);
    std::fs::write(&m.entries[1].image, b"not a nifti file").unwrap();
    m.entries[2].label = None;
    let log = RunLog::memory();
    let ctx = RunContext::new().with_log(log);
    let r = run_segtta_with(&RunConfig::new(vec![oracle(1.0)]), &m, &ctx).unwrap();
    // The oracle needs labels, so the unlabeled case fails at prediction time.
    let failed: Vec<&str> = r.failures.iter().map(|f| f.case_id.as_str()).collect();
    assert_eq!(failed, [m.entries[1].id.as_str(), m.entries[2].id.as_str()]);
    assert!(r.failures[0].error.starts_with("image:"));
    assert!(r.failures[1].error.contains("ground-truth"));
    let fused = r.variant("fused").unwrap();
    assert_eq!(fused.cases.len(), 1);
    assert_eq!(fused.cases[0].case_id, m.entries[0].id);
    assert!(ctx.log.events().iter().any(|e| e["event"] == "case_failed"));
}

#[test]
fn cases_without_labels_are_predicted_not_scored() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = dataset(dir.path(), 2, 10, 2);
    m.entries[0].label = None;
    let config = RunConfig::new(vec![BackendDescriptor::Constant {
        class: 1,
        confidence: 0.9,
    }]);
    let r = run_segtta(&config, &m).unwrap();
    let fused = r.variant("fused").unwrap();
    assert!(fused.cases[0].metrics.is_none());
    assert!(fused.cases[1].metrics.is_some());
    assert_eq!(fused.aggregate.scored, 1);
    assert_eq!(fused.cases[0].foreground_mm3, 1000.0);
}

#[test]
fn aggregates_are_means_of_defined_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 4, 12, 3);
    let r = run_segtta(&RunConfig::new(vec![noisy(), noisy()]), &m).unwrap();
    for v in &r.variants {
        let rows: Vec<_> = v.cases.iter().filter_map(|c| c.metrics.as_ref()).collect();
        let miou = rows.iter().map(|m| m.overlap.miou).sum::<f64>() / rows.len() as f64;
        assert!((v.aggregate.miou.unwrap() - miou).abs() < 1e-9);
        let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd95_mm).collect();
        let mean = hd.iter().sum::<f64>() / hd.len() as f64;
        assert!((v.aggregate.hd95_mm.unwrap() - mean).abs() < 1e-9);
        assert_eq!(v.aggregate.hd95_undefined, rows.len() - hd.len());
    }
}

#[test]
fn variants_and_subset_filter() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 1, 10, 2);
    let mut config = RunConfig::new(vec![noisy()]);
    let r = run_segtta(&config, &m).unwrap();
    let names: Vec<&str> = r.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "baseline",
            "+gamma_correction",
            "+contrast_enhancement",
            "+gaussian_blur",
            "+gaussian_noise",
            "fused"
        ]
    );
    assert_eq!(r.variant("fused").unwrap().maps, 5);
    assert_eq!(r.variant("+gaussian_blur").unwrap().maps, 2);

    config.subset = Some(vec![segtta_core::pipeline::PairSelector {
        backend: 0,
        augmentation: Some(2),
    }]);
    let r = run_segtta(&config, &m).unwrap();
    let names: Vec<&str> = r.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["+gaussian_blur", "fused"]);
    assert_eq!(r.variant("fused").unwrap().maps, 1);
}

#[test]
fn fused_masks_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 10, 2);
    let out = dir.path().join("out");
    let mut config = RunConfig::new(vec![oracle(1.0)]);
    config.output_dir = Some(out.clone());
    run_segtta(&config, &m).unwrap();
    for (i, e) in m.entries.iter().enumerate() {
        let path = out.join("masks").join(format!("{}_fused.nii.gz", e.id));
        let mask = nifti::read_label_mask(&path, 2).unwrap();
        assert_eq!(mask, phantom(11, i, &PhantomSpec::cube(10, 2)).1);
    }
}

#[test]
fn external_process_backend() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 1, 8, 2);
    let (_, gt) = phantom(11, 0, &PhantomSpec::cube(8, 2));
    let fixture = dir.path().join("fixture.nii");
    let p = segtta_core::ProbabilityMap::softened(&gt, 0.9, "fixture");
    nifti::write_probability_map(&p, &fixture).unwrap();

    let mut config = RunConfig::new(vec![BackendDescriptor::ExternalProcess {
        command: format!("test {{classes}} = 2 && cp {} {{output}}", fixture.display()),
        timeout_secs: 30.0,
    }]);
    config.augmentations = vec![AugmentationSpec::new(Augmentation::GammaCorrection { gamma: 0.8 }).unwrap()];
    config.external_jobs = 2;
    let ctx = RunContext {
        exchange_dir: Some(dir.path().join("exchange")),
        ..RunContext::new().with_log(RunLog::memory())
    };
    let r = run_segtta_with(&config, &m, &ctx).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let c = &r.variant("fused").unwrap().cases[0];
    assert_eq!(c.metrics.as_ref().unwrap().overlap.miou, 1.0);
    assert!(ctx.log.events().iter().any(|e| e["event"] == "backend_process"));

    config.backends = vec![BackendDescriptor::ExternalProcess {
        command: "echo oops >&2; exit 3".into(),
        timeout_secs: 30.0,
    }];
    let r = run_segtta_with(&config, &m, &ctx).unwrap();
    assert_eq!(r.failures.len(), 1);
    assert!(r.failures[0].error.contains("exit"), "{}", r.failures[0].error);
}

#[test]
fn report_formats_share_values() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 10, 3);
    let r = run_segtta(&RunConfig::new(vec![noisy()]), &m).unwrap();
    let csv = render_report(&r, ReportFormat::Csv);
    let md = render_report(&r, ReportFormat::Markdown);
    let csv_cells: Vec<Vec<String>> = csv
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let md_cells: Vec<Vec<String>> = md
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 1)
        .map(|(_, l)| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect();
    assert_eq!(csv_cells, md_cells);
    assert!(csv.starts_with("variant,case,mIoU,aIoU,mDice,aDice,HD95,"));
}

#[test]
fn majority_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 1, 10, 2);
    let mut config = RunConfig::new(vec![oracle(1.0)]);
    config.voting = VotingMode::Majority;
    let r = run_segtta(&config, &m).unwrap();
    assert_eq!(r.variant("fused").unwrap().aggregate.miou, Some(1.0));
}

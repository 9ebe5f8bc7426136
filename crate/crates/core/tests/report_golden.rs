use std::collections::BTreeMap;
use std::path::PathBuf;

use segtta_core::backend::BackendDescriptor;
use segtta_core::metrics::{MetricReport, OverlapMetrics};
use segtta_core::pipeline::{
    render_report, Aggregate, CaseResult, Experiment, ReportFormat, RunConfig, RunResult, VariantResult,
};

fn report(iou: f64, hd95: Option<f64>) -> MetricReport {
    let dice = 2.0 * iou / (1.0 + iou);
    MetricReport {
        overlap: OverlapMetrics {
            per_class_iou: BTreeMap::from([(1, iou)]),
            per_class_dice: BTreeMap::from([(1, dice)]),
            miou: iou,
            mdice: dice,
            aiou: iou,
            adice: dice,
        },
        hd95_mm: hd95,
        undefined_reason: hd95.is_none().then(|| "prediction is empty".to_string()),
    }
}

fn variant(name: &str, reference: Option<&str>, cases: Vec<CaseResult>) -> VariantResult {
    VariantResult {
        name: name.into(),
        reference: reference.map(str::to_string),
        tau: 0.6,
        maps: 1,
        aggregate: Aggregate::from_cases(&cases),
        cases,
    }
}

fn case(id: &str, iou: f64, hd95: Option<f64>, fg: f64) -> CaseResult {
    CaseResult {
        case_id: id.into(),
        metrics: Some(report(iou, hd95)),
        foreground_mm3: fg,
    }
}

fn fixture() -> RunResult {
    RunResult {
        experiment: Experiment::Run,
        dataset: "fixture".into(),
        num_classes: 2,
        variants: vec![
            variant(
                "baseline",
                None,
                vec![case("a", 0.5, Some(2.0), 100.0), case("b", 0.75, None, 0.0)],
            ),
            variant(
                "fused",
                Some("baseline"),
                vec![case("a", 0.6, Some(1.5), 90.0), case("b", 0.8, Some(3.25), 12.5)],
            ),
        ],
        failures: vec![],
        config: RunConfig::new(vec![BackendDescriptor::Constant {
            class: 0,
            confidence: 1.0,
        }]),
        timings: Default::default(),
    }
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn matches_golden_files() {
    let r = fixture();
    for (format, file) in [(ReportFormat::Csv, "report.csv"), (ReportFormat::Markdown, "report.md")] {
        let text = render_report(&r, format);
        if std::env::var_os("SEGTTA_BLESS").is_some() {
            std::fs::write(golden(file), &text).unwrap();
        }
        let expected = std::fs::read_to_string(golden(file)).unwrap();
        assert_eq!(text, expected, "{file}");
    }
}

#[test]
fn empty_result_is_header_only() {
    let mut r = fixture();
    for v in &mut r.variants {
        v.cases.clear();
        v.aggregate = Aggregate::from_cases(&[]);
    }
    let csv = render_report(&r, ReportFormat::Csv);
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(csv, "variant,case,IoU,Dice,HD95,FG volume (mm3),ΔIoU,ΔDice,ΔHD95\n");
}

#[test]
fn json_round_trip() {
    let r = fixture();
    let text = serde_json::to_string(&r).unwrap();
    let back: RunResult = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

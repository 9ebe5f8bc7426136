use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cache::{volume_hash, CacheKey, KeyBuilder, PredictionCache};
use super::config::RunConfig;
use super::manifest::{DatasetManifest, ManifestEntry};
use super::PipelineError;
use crate::augment;
use crate::backend::{self, PredictRequest};
use crate::fusion::{self, validate_tau, FusionInput};
use crate::metrics::{self, MetricReport};
use crate::nifti;
use crate::rng::{stable_hash, SeededRng, StreamKey};
use crate::runlog::RunLog;
use crate::types::{normalize_intensity, AugmentationSpec, LabelMask, ProbabilityMap, Volume};

/// Shared state for one or more experiments: the prediction cache, the run
/// log and the external-backend exchange directory.
#[derive(Debug, Default)]
pub struct RunContext {
    pub cache: PredictionCache,
    pub log: RunLog,
    pub exchange_dir: Option<PathBuf>,
}

impl RunContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log(mut self, log: RunLog) -> Self {
        self.log = log;
        self
    }

    pub fn with_cache(mut self, cache: PredictionCache) -> Self {
        self.cache = cache;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Run,
    Ablation,
    Sweep,
}

/// Scores of one case under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    /// `None` when the case has no reference labels.
    pub metrics: Option<MetricReport>,
    pub foreground_mm3: f64,
}

/// Means over the cases of one variant. Overlap means cover scored cases;
/// the HD95 mean covers cases where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub scored: usize,
    pub miou: Option<f64>,
    pub mdice: Option<f64>,
    pub aiou: Option<f64>,
    pub adice: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub hd95_undefined: usize,
    pub foreground_mm3: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        sum += v;
    }
    (n > 0).then(|| sum / n as f64)
}

impl Aggregate {
    pub fn from_cases(cases: &[CaseResult]) -> Self {
        let scored: Vec<&MetricReport> = cases.iter().filter_map(|c| c.metrics.as_ref()).collect();
        Self {
            cases: cases.len(),
            scored: scored.len(),
            miou: mean(scored.iter().map(|m| m.overlap.miou)),
            mdice: mean(scored.iter().map(|m| m.overlap.mdice)),
            aiou: mean(scored.iter().map(|m| m.overlap.aiou)),
            adice: mean(scored.iter().map(|m| m.overlap.adice)),
            hd95_mm: mean(scored.iter().filter_map(|m| m.hd95_mm)),
            hd95_undefined: scored.iter().filter(|m| m.hd95_mm.is_none()).count(),
            foreground_mm3: mean(cases.iter().map(|c| c.foreground_mm3)),
        }
    }
}

/// One row group of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Variant that deltas are reported against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub tau: f64,
    /// Number of maps fused per case.
    pub maps: usize,
    pub cases: Vec<CaseResult>,
    pub aggregate: Aggregate,
}

impl VariantResult {
    fn new(name: String, tau: f64, maps: usize, cases: Vec<CaseResult>) -> Self {
        let aggregate = Aggregate::from_cases(&cases);
        Self {
            name,
            reference: None,
            tau,
            maps,
            cases,
            aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load: f64,
    pub augment: f64,
    pub predict: f64,
    pub fuse_and_score: f64,
    pub write: f64,
    pub total: f64,
}

impl Timings {
    fn add(&mut self, other: &Timings) {
        self.load += other.load;
        self.augment += other.augment;
        self.predict += other.predict;
        self.fuse_and_score += other.fuse_and_score;
        self.write += other.write;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment: Experiment,
    pub dataset: String,
    pub num_classes: usize,
    pub variants: Vec<VariantResult>,
    pub failures: Vec<CaseFailure>,
    pub config: RunConfig,
    pub timings: Timings,
}

impl RunResult {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Runs the full ensemble over a manifest: baseline and augmented-view
/// predictions from every backend, fused per case.
///
/// Variants reported: `baseline` (original-view maps only), `+<aug>` for
/// each augmentation (baseline maps plus that view's maps, or only that
/// view's maps when the baseline is excluded) and `fused` (everything).
pub fn run_segtta(config: &RunConfig, manifest: &DatasetManifest) -> Result<RunResult, PipelineError> {
    run_segtta_with(config, manifest, &RunContext::new())
}

pub fn run_segtta_with(
    config: &RunConfig,
    manifest: &DatasetManifest,
    ctx: &RunContext,
) -> Result<RunResult, PipelineError> {
    with_pool(config, || {
        let engine = Engine::prepare(config, manifest, ctx)?;
        let started = Instant::now();
        let mut timings = engine.load_time.clone();
        let preds = engine.predict_all(config, &mut timings);

        let t = Instant::now();
        let groups = variant_groups(config);
        let has_baseline = groups[0].name == "baseline";
        let mut variants: Vec<VariantResult> = groups
            .iter()
            .map(|g| engine.evaluate_group(g, &preds, config.tau, config))
            .collect();
        if has_baseline {
            for v in variants.iter_mut().skip(1) {
                v.reference = Some("baseline".into());
            }
        }
        timings.fuse_and_score += t.elapsed().as_secs_f64();

        let t = Instant::now();
        if let Some(dir) = &config.output_dir {
            engine.write_fused(dir, &groups, &preds, config)?;
        }
        timings.write = t.elapsed().as_secs_f64();
        timings.total = timings.load + started.elapsed().as_secs_f64();
        Ok(engine.result(Experiment::Run, variants, &preds, config, timings))
    })
}

/// Leave-one-augmentation-out study: the full configuration plus one run
/// without each augmentation. Rows are the fused variants, named `full` and
/// `-<aug>`.
pub fn run_ablation(config: &RunConfig, manifest: &DatasetManifest) -> Result<RunResult, PipelineError> {
    run_ablation_with(config, manifest, &RunContext::new())
}

pub fn run_ablation_with(
    config: &RunConfig,
    manifest: &DatasetManifest,
    ctx: &RunContext,
) -> Result<RunResult, PipelineError> {
    if config.augmentations.len() < 2 {
        return Err(PipelineError::InsufficientAugmentations {
            count: config.augmentations.len(),
        });
    }
    config.validate()?;
    let names = display_names(&config.augmentations);
    let mut configs = vec![("full".to_string(), config.clone())];
    for (i, name) in names.iter().enumerate() {
        configs.push((format!("-{name}"), config.without_augmentation(i)));
    }
    with_pool(config, || {
        let engine = Engine::prepare(config, manifest, ctx)?;
        let started = Instant::now();
        let mut timings = engine.load_time.clone();
        let mut variants = Vec::new();
        let mut failures = Vec::new();
        for (name, sub) in &configs {
            let mut sub_timings = Timings::default();
            let preds = engine.predict_all(sub, &mut sub_timings);
            let t = Instant::now();
            let group = fused_group(sub);
            let mut v = engine.evaluate_group(&group, &preds, sub.tau, sub);
            sub_timings.fuse_and_score += t.elapsed().as_secs_f64();
            v.name = name.clone();
            if !variants.is_empty() {
                v.reference = Some("full".into());
            }
            variants.push(v);
            merge_failures(&mut failures, engine.failures(&preds));
            timings.add(&sub_timings);
        }
        timings.total = timings.load + started.elapsed().as_secs_f64();
        let mut result = engine.result(Experiment::Ablation, variants, &[], config, timings);
        result.failures = failures;
        Ok(result)
    })
}

/// Fuses one prediction set at each threshold. Rows are named `tau=0.30`
/// etc.; deltas are taken against the configured τ when it is in the list,
/// otherwise against the first entry.
pub fn run_threshold_sweep(
    config: &RunConfig,
    manifest: &DatasetManifest,
    taus: &[f64],
) -> Result<RunResult, PipelineError> {
    run_threshold_sweep_with(config, manifest, taus, &RunContext::new())
}

pub fn run_threshold_sweep_with(
    config: &RunConfig,
    manifest: &DatasetManifest,
    taus: &[f64],
    ctx: &RunContext,
) -> Result<RunResult, PipelineError> {
    if taus.is_empty() {
        return Err(PipelineError::Config("threshold list is empty".into()));
    }
    for &tau in taus {
        validate_tau(tau)?;
    }
    with_pool(config, || {
        let engine = Engine::prepare(config, manifest, ctx)?;
        let started = Instant::now();
        let mut timings = engine.load_time.clone();
        let preds = engine.predict_all(config, &mut timings);
        let t = Instant::now();
        let group = fused_group(config);
        let names: Vec<String> = taus.iter().map(|t| format!("tau={t:.2}")).collect();
        let reference = taus
            .iter()
            .position(|&t| t == config.tau)
            .unwrap_or(0);
        let variants = taus
            .iter()
            .zip(&names)
            .enumerate()
            .map(|(i, (&tau, name))| {
                let mut v = engine.evaluate_group(&group, &preds, tau, config);
                v.name = name.clone();
                if i != reference {
                    v.reference = Some(names[reference].clone());
                }
                v
            })
            .collect();
        timings.fuse_and_score += t.elapsed().as_secs_f64();
        timings.total = timings.load + started.elapsed().as_secs_f64();
        Ok(engine.result(Experiment::Sweep, variants, &preds, config, timings))
    })
}

fn with_pool<T: Send>(
    config: &RunConfig,
    f: impl FnOnce() -> Result<T, PipelineError> + Send,
) -> Result<T, PipelineError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    pool.install(f)
}

fn merge_failures(into: &mut Vec<CaseFailure>, new: Vec<CaseFailure>) {
    for f in new {
        if !into.iter().any(|g| g.case_id == f.case_id) {
            into.push(f);
        }
    }
}

/// Readable augmentation names, disambiguated when a kind repeats.
pub fn display_names(specs: &[AugmentationSpec]) -> Vec<String> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let repeated = specs.iter().filter(|o| o.name() == s.name()).count() > 1;
            if repeated {
                format!("{}[{i}]", s.name())
            } else {
                s.name().to_string()
            }
        })
        .collect()
}

/// Stable identifiers derived from content and the ordinal among identical
/// entries, so that removing one entry leaves the others' ids unchanged.
fn content_ids<T: Serialize>(items: &[T], domain: &str) -> Vec<u64> {
    let encoded: Vec<String> = items
        .iter()
        .map(|x| serde_json::to_string(x).expect("config types serialize"))
        .collect();
    encoded
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let ordinal = encoded[..i].iter().filter(|p| *p == e).count() as u64;
            stable_hash(&[domain.as_bytes(), e.as_bytes(), &ordinal.to_le_bytes()])
        })
        .collect()
}

/// View `None` is the original volume.
#[derive(Debug, Clone)]
struct ViewPlan {
    index: Option<usize>,
    id: u64,
    name: String,
    spec: Option<AugmentationSpec>,
}

fn view_plans(config: &RunConfig) -> Vec<ViewPlan> {
    let ids = content_ids(&config.augmentations, "view");
    let mut plans = vec![ViewPlan {
        index: None,
        id: 0,
        name: "baseline".into(),
        spec: None,
    }];
    for (i, spec) in config.augmentations.iter().enumerate() {
        plans.push(ViewPlan {
            index: Some(i),
            id: ids[i],
            name: spec.name().to_string(),
            spec: Some(*spec),
        });
    }
    plans
}

/// Which maps a variant fuses: `(backend, view)` selectors.
#[derive(Debug, Clone)]
struct Group {
    name: String,
    include_baseline: bool,
    views: Vec<usize>,
}

fn fused_group(config: &RunConfig) -> Group {
    Group {
        name: "fused".into(),
        include_baseline: config.include_baseline,
        views: (0..config.augmentations.len()).collect(),
    }
}

fn variant_groups(config: &RunConfig) -> Vec<Group> {
    let mut groups = vec![Group {
        name: "baseline".into(),
        include_baseline: true,
        views: vec![],
    }];
    for (i, name) in display_names(&config.augmentations).into_iter().enumerate() {
        groups.push(Group {
            name: format!("+{name}"),
            include_baseline: config.include_baseline,
            views: vec![i],
        });
    }
    groups.push(fused_group(config));
    groups.retain(|g| g.name == "fused" || g.has_selected_pair(config));
    groups
}

impl Group {
    fn has_selected_pair(&self, config: &RunConfig) -> bool {
        let views = self
            .include_baseline
            .then_some(None)
            .into_iter()
            .chain(self.views.iter().map(|&v| Some(v)));
        views
            .flat_map(|v| (0..config.backends.len()).map(move |b| (b, v)))
            .any(|(b, v)| config.selected(b, v))
    }
}

struct LoadedCase {
    entry: ManifestEntry,
    volume: Volume,
    volume_hash: CacheKey,
    gt: Option<LabelMask>,
    gt_hash: CacheKey,
}

/// Per case: maps indexed `[view][backend]`, `None` where the pair is not
/// selected; or the first error.
type CasePredictions = Result<Vec<Vec<Option<Arc<ProbabilityMap>>>>, CaseFailure>;

struct Engine<'a> {
    ctx: &'a RunContext,
    manifest: &'a DatasetManifest,
    num_classes: usize,
    cases: Vec<Result<LoadedCase, CaseFailure>>,
    load_time: Timings,
    external: Semaphore,
}

impl<'a> Engine<'a> {
    fn prepare(
        config: &RunConfig,
        manifest: &'a DatasetManifest,
        ctx: &'a RunContext,
    ) -> Result<Self, PipelineError> {
        manifest.validate()?;
        let num_classes = manifest.num_classes().unwrap_or(2);
        config.validate_for(num_classes)?;
        let t = Instant::now();
        ctx.log.event(
            "start",
            json!({"dataset": manifest.name, "cases": manifest.entries.len(), "seed": config.seed}),
        );
        let cases: Vec<_> = manifest
            .entries
            .par_iter()
            .map(|e| load_case(e, num_classes))
            .collect();
        for c in &cases {
            if let Err(f) = c {
                ctx.log.event("case_failed", json!({"case": f.case_id, "error": f.error}));
            }
        }
        Ok(Self {
            ctx,
            manifest,
            num_classes,
            cases,
            load_time: Timings {
                load: t.elapsed().as_secs_f64(),
                ..Timings::default()
            },
            external: Semaphore::new(config.external_jobs),
        })
    }

    /// Augments every view and runs every selected backend on it.
    fn predict_all(
        &self,
        config: &RunConfig,
        timings: &mut Timings,
    ) -> Vec<CasePredictions> {
        let plans = view_plans(config);
        let member_ids = content_ids(&config.backends, "member");

        let t = Instant::now();
        let view_tasks: Vec<(usize, usize)> = (0..self.cases.len())
            .flat_map(|c| (0..plans.len()).map(move |v| (c, v)))
            .collect();
        let view_results: Vec<Option<Result<Arc<Volume>, String>>> = view_tasks
            .par_iter()
            .map(|&(c, v)| {
                let case = self.cases[c].as_ref().ok()?;
                Some(self.view(case, &plans[v], config))
            })
            .collect();
        timings.augment += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let m = config.backends.len();
        let pred_tasks: Vec<(usize, usize, usize)> = (0..self.cases.len())
            .flat_map(|c| (0..plans.len()).flat_map(move |v| (0..m).map(move |b| (c, v, b))))
            .collect();
        let pred_results: Vec<Option<Result<Arc<ProbabilityMap>, String>>> = pred_tasks
            .par_iter()
            .map(|&(c, v, b)| {
                let case = self.cases[c].as_ref().ok()?;
                if !config.selected(b, plans[v].index) {
                    return None;
                }
                let view = match view_results[c * plans.len() + v].as_ref()? {
                    Ok(view) => view,
                    Err(_) => return None,
                };
                Some(self.prediction(case, view, &plans[v], b, member_ids[b], config))
            })
            .collect();
        timings.predict += t.elapsed().as_secs_f64();

        let mut preds = Vec::with_capacity(self.cases.len());
        for (c, case) in self.cases.iter().enumerate() {
            let case = match case {
                Ok(case) => case,
                Err(f) => {
                    preds.push(Err(f.clone()));
                    continue;
                }
            };
            let fail = |error: String| CaseFailure {
                case_id: case.entry.id.clone(),
                error,
            };
            let mut case_preds = Vec::with_capacity(plans.len());
            let mut error = None;
            for v in 0..plans.len() {
                if let Some(Err(e)) = &view_results[c * plans.len() + v] {
                    error.get_or_insert_with(|| e.clone());
                }
                let mut row = Vec::with_capacity(m);
                for b in 0..m {
                    let slot = &pred_results[(c * plans.len() + v) * m + b];
                    row.push(match slot {
                        Some(Ok(p)) => Some(Arc::clone(p)),
                        Some(Err(e)) => {
                            error.get_or_insert_with(|| e.clone());
                            None
                        }
                        None => None,
                    });
                }
                case_preds.push(row);
            }
            match error {
                Some(e) => {
                    self.ctx
                        .log
                        .event("case_failed", json!({"case": case.entry.id, "error": e}));
                    preds.push(Err(fail(e)));
                }
                None => preds.push(Ok(case_preds)),
            }
        }
        preds
    }

    fn view(&self, case: &LoadedCase, plan: &ViewPlan, config: &RunConfig) -> Result<Arc<Volume>, String> {
        let spec = match &plan.spec {
            None => return Ok(Arc::new(case.volume.clone())),
            Some(s) if s.is_noop() => return Ok(Arc::new(case.volume.clone())),
            Some(s) => s,
        };
        let spec_json = serde_json::to_string(spec).expect("specs serialize");
        let key = KeyBuilder::new("view")
            .part(spec_json.as_bytes())
            .u64(plan.id)
            .part(case.entry.id.as_bytes())
            .part(&case.volume_hash)
            .u64(config.seed)
            .finish();
        self.ctx.cache.view_or_insert(key, || {
            let mut rng = SeededRng::new(config.seed, StreamKey::augmentation(&case.entry.id, plan.id));
            augmented_view(&case.volume, spec, &mut rng)
                .map_err(|e| format!("augmentation {}: {e}", plan.name))
        })
    }

    fn prediction(
        &self,
        case: &LoadedCase,
        view: &Volume,
        plan: &ViewPlan,
        backend: usize,
        member_id: u64,
        config: &RunConfig,
    ) -> Result<Arc<ProbabilityMap>, String> {
        let descriptor = &config.backends[backend];
        let descriptor_json = serde_json::to_string(descriptor).expect("descriptors serialize");
        let spec_json = plan
            .spec
            .as_ref()
            .map(|s| serde_json::to_string(s).expect("specs serialize"))
            .unwrap_or_else(|| "baseline".into());
        let key = KeyBuilder::new("prediction")
            .part(descriptor_json.as_bytes())
            .u64(member_id)
            .part(spec_json.as_bytes())
            .u64(plan.id)
            .part(case.entry.id.as_bytes())
            .part(&case.volume_hash)
            .part(&case.gt_hash)
            .u64(config.seed)
            .u64(self.num_classes as u64)
            .finish();
        let tag = format!(
            "{}#{:08x}@{}#{:08x}",
            descriptor.kind_name(),
            member_id as u32,
            plan.name,
            plan.id as u32
        );
        self.ctx.cache.map_or_insert(key, || {
            let _permit = descriptor.is_external().then(|| self.external.acquire());
            let mut rng = SeededRng::new(
                config.seed,
                StreamKey::augmentation(&case.entry.id, plan.id).with_member(member_id),
            );
            let mut req = PredictRequest::new(self.num_classes, tag.clone()).with_log(&self.ctx.log);
            req.ground_truth = case.gt.as_ref();
            req.exchange_dir = self.ctx.exchange_dir.as_deref();
            backend::predict(descriptor, view, &req, &mut rng)
                .map_err(|e| format!("backend {backend} on {}: {e}", plan.name))
        })
    }

    fn group_maps<'p>(
        &self,
        group: &Group,
        preds: &'p [Vec<Option<Arc<ProbabilityMap>>>],
    ) -> Vec<&'p ProbabilityMap> {
        let mut out = Vec::new();
        if group.include_baseline {
            out.extend(preds[0].iter().flatten().map(|p| &**p));
        }
        for &v in &group.views {
            out.extend(preds[v + 1].iter().flatten().map(|p| &**p));
        }
        out
    }

    fn fuse_case(
        &self,
        group: &Group,
        preds: &[Vec<Option<Arc<ProbabilityMap>>>],
        tau: f64,
        config: &RunConfig,
    ) -> Result<(LabelMask, usize), String> {
        let maps = self.group_maps(group, preds);
        let n = maps.len();
        let input = FusionInput::new(maps, config.voting, tau).map_err(|e| e.to_string())?;
        Ok((fusion::fuse(&input), n))
    }

    fn evaluate_group(
        &self,
        group: &Group,
        preds: &[CasePredictions],
        tau: f64,
        config: &RunConfig,
    ) -> VariantResult {
        let rows: Vec<Option<(CaseResult, usize)>> = self
            .cases
            .par_iter()
            .zip(preds.par_iter())
            .map(|(case, p)| {
                let (case, p) = match (case, p) {
                    (Ok(c), Ok(p)) => (c, p),
                    _ => return None,
                };
                let (mask, n) = match self.fuse_case(group, p, tau, config) {
                    Ok(x) => x,
                    Err(e) => {
                        self.ctx.log.event(
                            "fusion_skipped",
                            json!({"case": case.entry.id, "variant": group.name, "error": e}),
                        );
                        return None;
                    }
                };
                let spacing = case.volume.spacing();
                let metrics = case.gt.as_ref().map(|gt| {
                    metrics::evaluate(&mask, gt, spacing).expect("mask and labels share dims and classes")
                });
                Some((
                    CaseResult {
                        case_id: case.entry.id.clone(),
                        metrics,
                        foreground_mm3: fusion::foreground_volume(&mask, spacing),
                    },
                    n,
                ))
            })
            .collect();
        let maps = rows.iter().flatten().map(|(_, n)| *n).next().unwrap_or(0);
        let cases = rows.into_iter().flatten().map(|(c, _)| c).collect();
        VariantResult::new(group.name.clone(), tau, maps, cases)
    }

    fn write_fused(
        &self,
        dir: &std::path::Path,
        groups: &[Group],
        preds: &[CasePredictions],
        config: &RunConfig,
    ) -> Result<(), PipelineError> {
        let group = groups.last().expect("fused group is always present");
        let masks_dir = dir.join("masks");
        std::fs::create_dir_all(&masks_dir).map_err(|e| PipelineError::io(&masks_dir, e))?;
        for (case, p) in self.cases.iter().zip(preds) {
            let (Ok(case), Ok(p)) = (case, p) else {
                continue;
            };
            let Ok((mask, _)) = self.fuse_case(group, p, config.tau, config) else {
                continue;
            };
            let path = masks_dir.join(format!("{}_fused.nii.gz", case.entry.id));
            nifti::write_label_mask(&mask, case.volume.spacing(), &path)?;
            self.ctx
                .log
                .event("mask_written", json!({"case": case.entry.id, "path": path}));
        }
        Ok(())
    }

    fn failures(&self, preds: &[CasePredictions]) -> Vec<CaseFailure> {
        preds.iter().filter_map(|p| p.as_ref().err().cloned()).collect()
    }

    fn result(
        &self,
        experiment: Experiment,
        variants: Vec<VariantResult>,
        preds: &[CasePredictions],
        config: &RunConfig,
        timings: Timings,
    ) -> RunResult {
        let mut failures: Vec<CaseFailure> = self
            .cases
            .iter()
            .filter_map(|c| c.as_ref().err().cloned())
            .collect();
        merge_failures(&mut failures, self.failures(preds));
        self.ctx.log.event(
            "finish",
            json!({
                "experiment": experiment,
                "variants": variants.len(),
                "failures": failures.len(),
                "cache_hits": self.ctx.cache.hits(),
                "cache_misses": self.ctx.cache.misses(),
            }),
        );
        self.ctx.log.flush();
        RunResult {
            experiment,
            dataset: self.manifest.name.clone(),
            num_classes: self.num_classes,
            variants,
            failures,
            config: config.clone(),
            timings,
        }
    }
}

fn load_case(entry: &ManifestEntry, num_classes: usize) -> Result<LoadedCase, CaseFailure> {
    let fail = |error: String| CaseFailure {
        case_id: entry.id.clone(),
        error,
    };
    let volume = nifti::read_volume(&entry.image)
        .map_err(|e| fail(format!("image: {e}")))?
        .with_id(entry.id.clone());
    let gt = match &entry.label {
        Some(path) => {
            let gt = nifti::read_label_mask(path, num_classes).map_err(|e| fail(format!("label: {e}")))?;
            if gt.dims() != volume.dims() {
                return Err(fail(format!(
                    "label dims {:?} differ from image dims {:?}",
                    gt.dims().0,
                    volume.dims().0
                )));
            }
            Some(gt)
        }
        None => None,
    };
    let gt_hash = match &gt {
        Some(g) => KeyBuilder::new("labels").part(g.labels()).finish(),
        None => KeyBuilder::new("no-labels").finish(),
    };
    Ok(LoadedCase {
        entry: entry.clone(),
        volume_hash: volume_hash(&volume),
        volume,
        gt,
        gt_hash,
    })
}

/// Normalizes to `[0, 1]`, applies the transform and maps back to the
/// original intensity range. No-op specs return the input unchanged.
pub fn augmented_view(
    v: &Volume,
    spec: &AugmentationSpec,
    rng: &mut SeededRng,
) -> Result<Volume, augment::AugmentError> {
    if spec.is_noop() {
        spec.validate()?;
        return Ok(v.clone());
    }
    let (normalized, range) = normalize_intensity(v);
    let out = augment::apply(spec, &normalized, rng)?;
    Ok(range.invert(&out))
}

struct Semaphore {
    free: Mutex<usize>,
    ready: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            ready: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.ready.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.ready.notify_one();
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use segtta_core::fusion::{self, FusionInput, VotingMode};
use segtta_core::metrics;
use segtta_core::nifti::{self, DataType};
use segtta_core::phantom::{write_phantom_dataset, PhantomSpec};
use segtta_core::pipeline::{
    self, emit_report, render_report, summary, DatasetManifest, ReportFormat, RunConfig, RunContext,
    RunResult,
};
use segtta_core::rng::{stable_hash, SeededRng, StreamKey};
use segtta_core::runlog::RunLog;
use segtta_core::{AugmentationSpec, Dims, Spacing};

#[derive(Parser)]
#[command(name = "segtta", version, about = "Test-time augmentation ensembles for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ensemble over a dataset manifest.
    Run(ExperimentArgs),
    /// Leave-one-augmentation-out ablation.
    Ablate(ExperimentArgs),
    /// Fuse one prediction set at several thresholds.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,0.9")]
        taus: Vec<f64>,
    },
    /// Apply one augmentation to a volume.
    Augment {
        /// JSON file holding one augmentation spec.
        #[arg(long, conflicts_with = "spec")]
        config: Option<PathBuf>,
        /// Inline augmentation spec as JSON.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_SEED)]
        seed: u64,
    },
    /// Fuse pre-computed 4D probability maps into a label mask.
    Fuse {
        /// Run config supplying voting mode and tau.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<VotingMode>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        maps: Vec<PathBuf>,
    },
    /// Score a predicted mask against a reference mask.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved result.json as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic phantom dataset with a manifest.
    Phantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_SEED)]
        seed: u64,
        /// Voxel spacing as dx,dy,dz in mm.
        #[arg(long, value_delimiter = ',', default_value = "1,1,1")]
        spacing: Vec<f64>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

fn parse_mode(s: &str) -> Result<VotingMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| {
        format!("unknown voting mode {s:?} (expected majority, confidence_weighted or threshold_weighted)")
    })
}

impl ExperimentArgs {
    fn load(&self) -> Result<(RunConfig, DatasetManifest, PathBuf)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(tau) = self.tau {
            config.tau = tau;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            config.jobs = Some(jobs);
        }
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        let out = config
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("segtta-out"));
        config.output_dir = Some(out.clone());
        config.validate()?;
        let manifest = DatasetManifest::load(&self.manifest)?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok((config, manifest, out))
    }
}

fn context(out: &Path) -> Result<RunContext> {
    let log = RunLog::to_file(out.join("events.jsonl"))
        .with_context(|| format!("creating run log in {}", out.display()))?;
    Ok(RunContext::new().with_log(log))
}

fn finish(result: &RunResult, out: &Path, format: ReportFormat) -> Result<()> {
    let report = out.join(format!("report.{}", format.extension()));
    emit_report(result, format, &report)?;
    let json = serde_json::to_string_pretty(result)?;
    fs::write(out.join("result.json"), json)?;
    print!("{}", summary(result));
    println!("report: {}", report.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (config, manifest, out) = args.load()?;
            let ctx = context(&out)?;
            let result = pipeline::run_segtta_with(&config, &manifest, &ctx)?;
            finish(&result, &out, args.format)
        }
        Command::Ablate(args) => {
            let (mut config, manifest, out) = args.load()?;
            // Ablation rows are not written as masks.
            config.output_dir = None;
            let ctx = context(&out)?;
            let result = pipeline::run_ablation_with(&config, &manifest, &ctx)?;
            finish(&result, &out, args.format)
        }
        Command::Sweep { exp, taus } => {
            let (mut config, manifest, out) = exp.load()?;
            config.output_dir = None;
            let ctx = context(&out)?;
            let result = pipeline::run_threshold_sweep_with(&config, &manifest, &taus, &ctx)?;
            finish(&result, &out, exp.format)
        }
        Command::Augment {
            config,
            spec,
            input,
            out,
            seed,
        } => {
            let text = match (config, spec) {
                (Some(path), None) => {
                    fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?
                }
                (None, Some(s)) => s,
                _ => bail!("pass the augmentation as --config <file> or --spec <json>"),
            };
            let spec: AugmentationSpec = serde_json::from_str(&text).context("parsing augmentation spec")?;
            spec.validate()?;
            let volume = nifti::read_volume(&input)?;
            let canonical = serde_json::to_string(&spec)?;
            let view_id = stable_hash(&[b"view", canonical.as_bytes()]);
            let mut rng = SeededRng::new(seed, StreamKey::augmentation(volume.id(), view_id));
            let result = pipeline::augmented_view(&volume, &spec, &mut rng)?;
            nifti::write_volume(&result, DataType::Float32, &out)?;
            Ok(())
        }
        Command::Fuse {
            config,
            mode,
            tau,
            out,
            maps,
        } => {
            let base = match config {
                Some(p) => Some(RunConfig::load(p)?),
                None => None,
            };
            let mode = mode
                .or(base.as_ref().map(|c| c.voting))
                .unwrap_or(VotingMode::ThresholdWeighted);
            let tau = tau
                .or(base.as_ref().map(|c| c.tau))
                .unwrap_or(fusion::DEFAULT_TAU);
            let mut spacing = None;
            let mut loaded = Vec::with_capacity(maps.len());
            for path in &maps {
                let image = nifti::read_image(path)?;
                spacing.get_or_insert(image.spacing()?);
                let map = nifti::probability_map_from_image(image)
                    .with_context(|| format!("reading {}", path.display()))?;
                // Tag by file name so the fusion order follows the argument names.
                loaded.push(map.with_source_tag(path.display().to_string()));
            }
            let input = FusionInput::new(loaded.iter(), mode, tau)?;
            let mask = fusion::fuse(&input);
            nifti::write_label_mask(&mask, spacing.unwrap_or_else(Spacing::isotropic), &out)?;
            Ok(())
        }
        Command::Metrics {
            pred,
            gt,
            classes,
            out,
        } => {
            let pred_mask = nifti::read_label_mask(&pred, classes)?;
            let gt_image = nifti::read_image(&gt)?;
            let spacing = gt_image.spacing()?;
            let gt_mask = nifti::read_label_mask(&gt, classes)?;
            let report = metrics::evaluate(&pred_mask, &gt_mask, spacing)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Report { input, format, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let result: RunResult = serde_json::from_str(&text).context("parsing result")?;
            match out {
                Some(p) => emit_report(&result, format, p)?,
                None => print!("{}", render_report(&result, format)),
            }
            Ok(())
        }
        Command::Phantoms {
            out,
            count,
            size,
            classes,
            seed,
            spacing,
        } => {
            let [dx, dy, dz] = spacing[..] else {
                bail!("--spacing needs three values");
            };
            if !(2..=256).contains(&classes) {
                bail!("--classes must lie in 2..=256");
            }
            let spec = PhantomSpec {
                dims: Dims::new(size, size, size)?,
                spacing: Spacing::new(dx, dy, dz)?,
                num_classes: classes,
                noise: 5.0,
            };
            let manifest = write_phantom_dataset(&out, count, &spec, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

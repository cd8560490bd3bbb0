//! The `fatseg` command line: phantom cohorts, training, inference and evaluation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fatseg_core::metrics::{compare_sessions, dice_label};
use fatseg_core::netgraph::{build_segnet_with, build_view_agg_net, count_parameters, FusionMode, Model, SegNetConfig};
use fatseg_core::phantom::{generate_cohort, perturb_retest, read_manifest, write_cohort, ManifestEntry, PhantomConfig};
use fatseg_core::pipeline::{
    aggregation_sample, run_pipeline, train_aggregation, train_target, Aggregation, BundleConfig, Case, ModelBundle,
    PipelineOptions, Target, ViewProbabilities, VolumesReport, AXIAL_FOCUS, BALANCED,
};
use fatseg_core::train::{kfold_split, TrainConfig};
use fatseg_core::volume::{read_image, read_labels, tissue, write_volume, LabelMap, LabelScheme, Volume3D};
use fatseg_core::{Error, SlicePlane};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_LOCALIZATION: i32 = 4;

/// Caps internal parallelism.
pub const THREADS_VAR: &str = "FATSEG_THREADS";
const LOG_FILE: &str = "train_log.csv";
const PROBABILITY_DIR: &str = "probability-maps";
const LABELS_FILE: &str = "labels.fsv";
const REPORT_FILE: &str = "volumes.json";
const CLASS_NAMES: [&str; 5] = ["background", "sat", "vat", "bone", "other"];

#[derive(Parser, Debug)]
#[command(name = "fatseg", version, about = "Abdominal adipose tissue segmentation")]
pub struct Cli {
    /// JSON file overriding the phantom, train and bundle settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort with ground truth.
    Phantom {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a repositioned and re-rendered second session under `<out>/retest`.
        #[arg(long)]
        retest: bool,
    },
    /// Train one network of the bundle.
    Train {
        #[arg(long)]
        target: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Bundle directory; the network goes to `<models>/<target>`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_enum)]
        fusion: Option<Fusion>,
        /// Case-level cross-validation; fold models go to `<models>/<target>/fold-<i>`.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Run the full pipeline on one image or on every case of a manifest.
    Infer {
        #[arg(long)]
        models: PathBuf,
        /// A fat image (`.fsv`) or a cohort manifest (`.csv`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "learned")]
        aggregation: AggregationMode,
        /// Also write the argmax labels of each view.
        #[arg(long)]
        save_views: bool,
    },
    /// Dice against ground truth, or reliability between two sessions.
    Eval {
        /// Ground-truth manifest; predictions are read from `<pred>/<case_id>/`.
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Inference output directories of the two sessions, matched by case id.
        #[arg(long, num_args = 2, value_names = ["SESSION1", "SESSION2"], conflicts_with = "truth")]
        sessions: Option<Vec<PathBuf>>,
        /// Writes the table (Dice CSV, or reliability CSV plus JSON) to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trainable parameter counts.
    ParamCount,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fusion {
    Maxout,
    Concat,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Maxout => FusionMode::Maxout,
            Fusion::Concat => FusionMode::Concat,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationMode {
    Learned,
    AxialFocus,
    Balanced,
}

impl From<AggregationMode> for Aggregation {
    fn from(a: AggregationMode) -> Self {
        match a {
            AggregationMode::Learned => Aggregation::Learned,
            AggregationMode::AxialFocus => Aggregation::Hardcoded(AXIAL_FOCUS),
            AggregationMode::Balanced => Aggregation::Hardcoded(BALANCED),
        }
    }
}

/// Settings read from `--config`; missing sections keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    /// Per-target overrides of `train`, keyed by target name.
    pub train_overrides: BTreeMap<String, TrainConfig>,
    pub bundle: BundleConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for name in cfg.train_overrides.keys() {
            name.parse::<Target>()?;
        }
        Ok(cfg)
    }

    fn train_for(&self, target: Target, seed: Option<u64>) -> TrainConfig {
        let mut c = self.train_overrides.get(target.as_str()).cloned().unwrap_or_else(|| self.train.clone());
        if let Some(s) = seed {
            c.seed = s;
        }
        c
    }
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(_)) => EXIT_MISSING,
        Some(Error::Localization(_)) => EXIT_LOCALIZATION,
        _ => EXIT_BAD_INPUT,
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(3).min(3)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Phantom { n, out, retest } => cmd_phantom(&cfg, cli.seed.unwrap_or(cfg.phantom.seed), *n, out, *retest),
        Command::Train { target, manifest, models, fusion, folds } => {
            let target: Target = target.parse()?;
            let mut bundle = cfg.bundle.clone();
            if let Some(f) = fusion {
                bundle.fusion = (*f).into();
            }
            cmd_train(&cfg, &bundle, cli.seed, target, manifest, models, *folds)
        }
        Command::Infer { models, input, out, aggregation, save_views } => {
            cmd_infer(models, input, out, (*aggregation).into(), *save_views)
        }
        Command::Eval { truth, pred, sessions, out } => match (truth, pred, sessions) {
            (Some(t), Some(p), None) => cmd_eval_dice(t, p, out.as_deref()),
            (None, None, Some(s)) => cmd_eval_sessions(&s[0], &s[1], out.as_deref()),
            _ => Err(Error::Argument("eval needs either --truth and --pred, or --sessions".into()).into()),
        },
        Command::ParamCount => cmd_param_count(&cfg.bundle),
    }
}

fn ensure_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!(Error::Argument(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn cmd_phantom(cfg: &RunConfig, seed: u64, n: usize, out: &Path, retest: bool) -> anyhow::Result<()> {
    if n == 0 {
        bail!(Error::Argument("--n must be at least 1".into()));
    }
    cfg.phantom.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cases = generate_cohort(&cfg.phantom, n, seed)?;
    let entries = write_cohort(out, &cases)?;
    println!("case_id,sat_ml,vat_ml,aat_ml");
    for e in &entries {
        println!("{},{:.3},{:.3},{:.3}", e.case_id, e.sat_ml, e.vat_ml, e.sat_ml + e.vat_ml);
    }
    if retest {
        let retests = cases
            .iter()
            .enumerate()
            .map(|(i, c)| perturb_retest(c, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect::<fatseg_core::Result<Vec<_>>>()?;
        let dir = out.join("retest");
        fs::create_dir_all(&dir)?;
        write_cohort(&dir, &retests)?;
        println!("retest session written to {}", dir.display());
    }
    Ok(())
}

fn load_cases(manifest: &Path) -> anyhow::Result<Vec<Case>> {
    ensure_exists(manifest, "manifest")?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        bail!(Error::Argument(format!("{} lists no cases", manifest.display())));
    }
    entries.iter().map(|e| load_case(base, e)).collect()
}

fn load_case(base: &Path, e: &ManifestEntry) -> anyhow::Result<Case> {
    let fat = read_image(&base.join(&e.fat_path)).with_context(|| format!("case {}", e.case_id))?;
    let tissue = read_labels(&base.join(&e.tissue_path)).with_context(|| format!("case {}", e.case_id))?;
    let region = read_labels(&base.join(&e.region_path)).with_context(|| format!("case {}", e.case_id))?;
    for (name, l, scheme) in [("tissue", &tissue, LabelScheme::Tissue), ("region", &region, LabelScheme::Region)] {
        if l.shape() != fat.shape() || l.scheme() != scheme {
            bail!(Error::Dimension(format!("case {}: {name} labels do not match the image", e.case_id)));
        }
    }
    Ok(Case { id: e.case_id.clone(), fat, tissue, region })
}

fn print_param_counts(bundle: &BundleConfig) -> anyhow::Result<()> {
    let count = |mode| -> anyhow::Result<usize> {
        Ok(count_parameters(&build_segnet_with(tissue::NUM_CLASSES, mode, 1, &bundle.net)?))
    };
    let (m, c) = (count(FusionMode::Maxout)?, count(FusionMode::Concat)?);
    println!("segnet parameters: maxout {m}, concat {c} (ratio {:.3})", m as f64 / c as f64);
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    bundle: &BundleConfig,
    seed: Option<u64>,
    target: Target,
    manifest: &Path,
    models: &Path,
    folds: Option<usize>,
) -> anyhow::Result<()> {
    let tc = cfg.train_for(target, seed);
    tc.validate()?;
    let cases = load_cases(manifest)?;
    fs::create_dir_all(models)?;
    if target != Target::ViewAgg {
        print_param_counts(bundle)?;
    }
    let dir = models.join(target.as_str());
    match folds.filter(|&k| k > 1) {
        None => {
            let (model, log) = train_one(target, &cases, models, bundle, &tc)?;
            println!("{target}: {} parameters, best epoch {}", count_parameters(&model.spec), log.best_epoch);
            model.save(&dir)?;
            log.write_csv(&dir.join(LOG_FILE))?;
        }
        Some(k) => {
            for (i, (train_idx, _)) in kfold_split(cases.len(), k, tc.seed)?.into_iter().enumerate() {
                let subset: Vec<Case> = train_idx.iter().map(|&j| cases[j].clone()).collect();
                let (model, log) = train_one(target, &subset, models, bundle, &tc)?;
                let fold_dir = dir.join(format!("fold-{i}"));
                model.save(&fold_dir)?;
                log.write_csv(&fold_dir.join(LOG_FILE))?;
                println!("{target} fold {i}: {} training cases, best epoch {}", subset.len(), log.best_epoch);
            }
        }
    }
    Ok(())
}

fn train_one(
    target: Target,
    cases: &[Case],
    models: &Path,
    bundle: &BundleConfig,
    tc: &TrainConfig,
) -> anyhow::Result<(Model, fatseg_core::train::TrainLog)> {
    if target != Target::ViewAgg {
        return Ok(train_target(target, cases, bundle, tc)?);
    }
    let seg = load_segmentation_models(models)?;
    let samples = cases
        .iter()
        .map(|c| {
            let views = cached_views(models, c, &seg)?;
            Ok(aggregation_sample(&views, &c.tissue)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(train_aggregation(&samples, tc)?)
}

fn load_segmentation_models(models: &Path) -> anyhow::Result<[Model; 3]> {
    let load = |p: SlicePlane| -> anyhow::Result<Model> {
        let t = Target::segmentation(p);
        let dir = models.join(t.as_str());
        if !dir.is_dir() {
            bail!(Error::MissingArtifact(format!("view-agg training needs {} (train --target {t} first)", dir.display())));
        }
        Ok(Model::load(&dir)?)
    };
    Ok([load(SlicePlane::Axial)?, load(SlicePlane::Coronal)?, load(SlicePlane::Sagittal)?])
}

/// Per-view probability maps of a training case, computed once and kept under `<models>/probability-maps`.
fn cached_views(models: &Path, case: &Case, seg: &[Model; 3]) -> anyhow::Result<ViewProbabilities> {
    let dir = models.join(PROBABILITY_DIR);
    let path = |p: SlicePlane| dir.join(format!("{}.{}.fsv", case.id, p.name()));
    let zr = case.abdominal_region()?;
    let [d, h, w] = case.fat.shape();
    let k = tissue::NUM_CLASSES;
    if SlicePlane::ALL.iter().all(|&p| path(p).exists()) {
        let mut planes = BTreeMap::new();
        for p in SlicePlane::ALL {
            let v = read_image(&path(p))?;
            if v.shape() != [k * d, h, w] {
                bail!(Error::Dimension(format!("{} does not match case {}", path(p).display(), case.id)));
            }
            planes.insert(p, v.into_data());
        }
        return Ok(ViewProbabilities { shape: case.fat.shape(), num_classes: k, region: zr, planes });
    }
    let views = fatseg_core::pipeline::training_views(case, [&seg[0], &seg[1], &seg[2]], threads_from_env())?;
    fs::create_dir_all(&dir)?;
    for p in SlicePlane::ALL {
        let v = Volume3D::new([k * d, h, w], case.fat.spacing_mm(), views.get(p)?.to_vec())?;
        write_volume(&v, &path(p))?;
    }
    Ok(views)
}

fn cmd_infer(models: &Path, input: &Path, out: &Path, aggregation: Aggregation, save_views: bool) -> anyhow::Result<()> {
    ensure_exists(input, "input")?;
    if !models.is_dir() {
        bail!(Error::MissingArtifact(format!("model bundle {} not found", models.display())));
    }
    let bundle = ModelBundle::load(models)?;
    let opts = PipelineOptions { aggregation, threads: threads_from_env() };
    let is_manifest = input.extension().is_some_and(|e| e == "csv");
    if is_manifest {
        let base = input.parent().unwrap_or(Path::new("."));
        for e in read_manifest(input)? {
            let fat = read_image(&base.join(&e.fat_path)).with_context(|| format!("case {}", e.case_id))?;
            let report = infer_one(&fat, &bundle, &opts, &out.join(&e.case_id), save_views)
                .with_context(|| format!("case {}", e.case_id))?;
            println!("{}: SAT {:.2} mL, VAT {:.2} mL, AAT {:.2} mL", e.case_id, report.sat_ml, report.vat_ml, report.aat_ml);
        }
    } else {
        let report = infer_one(&read_image(input)?, &bundle, &opts, out, save_views)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn infer_one(fat: &Volume3D, bundle: &ModelBundle, opts: &PipelineOptions, out: &Path, save_views: bool) -> anyhow::Result<VolumesReport> {
    let result = run_pipeline(fat, bundle, opts)?;
    fs::create_dir_all(out)?;
    write_volume(&result.labels, &out.join(LABELS_FILE))?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&result.report)?)?;
    if save_views {
        for p in SlicePlane::ALL {
            let l = LabelMap::new(fat.shape(), fat.spacing_mm(), LabelScheme::Tissue, result.views.argmax(p)?)?;
            write_volume(&l, &out.join(format!("{}.fsv", p.name())))?;
        }
    }
    Ok(result.report)
}

fn cmd_eval_dice(truth: &Path, pred: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    ensure_exists(truth, "manifest")?;
    ensure_exists(pred, "prediction directory")?;
    let base = truth.parent().unwrap_or(Path::new("."));
    let mut table = String::from("case_id,mode");
    for n in CLASS_NAMES {
        table += &format!(",{n}");
    }
    table.push('\n');
    let modes: Vec<(String, String)> = std::iter::once(("aggregated".to_string(), LABELS_FILE.to_string()))
        .chain(SlicePlane::ALL.iter().map(|p| (p.name().to_string(), format!("{}.fsv", p.name()))))
        .collect();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for e in read_manifest(truth)? {
        let t = read_labels(&base.join(&e.tissue_path))?;
        for (mode, file) in &modes {
            let path = pred.join(&e.case_id).join(file);
            if !path.exists() {
                if file == LABELS_FILE {
                    bail!(Error::Argument(format!("no prediction for case {} at {}", e.case_id, path.display())));
                }
                continue;
            }
            let p = read_labels(&path)?;
            if p.shape() != t.shape() {
                bail!(Error::Dimension(format!("case {}: prediction {:?} vs truth {:?}", e.case_id, p.shape(), t.shape())));
            }
            let d: Vec<f64> =
                (0..tissue::NUM_CLASSES as u8).map(|c| dice_label(t.data(), p.data(), c)).collect::<fatseg_core::Result<_>>()?;
            table += &format!("{},{mode}", e.case_id);
            for v in &d {
                table += &format!(",{v:.4}");
            }
            table.push('\n');
            let s = sums.entry(mode.as_str()).or_insert((vec![0.0; d.len()], 0));
            s.0.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            s.1 += 1;
        }
    }
    for (mode, _) in &modes {
        if let Some((s, n)) = sums.get(mode.as_str()) {
            table += &format!("mean,{mode}");
            for v in s {
                table += &format!(",{:.4}", v / *n as f64);
            }
            table.push('\n');
        }
    }
    print!("{table}");
    if let Some(o) = out {
        fs::write(o, &table)?;
    }
    Ok(())
}

fn read_reports(dir: &Path) -> anyhow::Result<BTreeMap<String, VolumesReport>> {
    ensure_exists(dir, "session directory")?;
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path().join(REPORT_FILE);
        if path.exists() {
            let r: VolumesReport = serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), r);
        }
    }
    Ok(out)
}

fn cmd_eval_sessions(s1: &Path, s2: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (a, b) = (read_reports(s1)?, read_reports(s2)?);
    let pairs: Vec<(VolumesReport, VolumesReport)> =
        a.iter().filter_map(|(id, r)| b.get(id).map(|r2| (r.clone(), r2.clone()))).collect();
    let report = compare_sessions(&pairs)?;
    let csv = report.to_csv()?;
    print!("{csv}");
    if let Some(o) = out {
        fs::write(o, &csv)?;
        fs::write(o.with_extension("json"), report.to_json()?)?;
    }
    Ok(())
}

fn cmd_param_count(bundle: &BundleConfig) -> anyhow::Result<()> {
    let full = SegNetConfig::default();
    for (name, mode) in [("maxout", FusionMode::Maxout), ("concat", FusionMode::Concat)] {
        println!("{name} segnet: {}", count_parameters(&build_segnet_with(tissue::NUM_CLASSES, mode, 1, &full)?));
    }
    println!("view-agg net: {}", count_parameters(&build_view_agg_net(tissue::NUM_CLASSES)?));
    if bundle.net != full {
        let m = count_parameters(&build_segnet_with(tissue::NUM_CLASSES, bundle.fusion, 1, &bundle.net)?);
        println!("configured segnet (width {}): {m}", bundle.net.width);
    }
    Ok(())
}

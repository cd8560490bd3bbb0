//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fatseg_core::metrics::{apd, compare_sessions, dice, dice_label, icc_a1, ReliabilityReport};
use fatseg_core::netgraph::{build_segnet_with, build_view_agg_net, count_parameters, FusionMode, SegNetConfig};
use fatseg_core::phantom::{generate_cohort, perturb_retest, PhantomCase, PhantomConfig};
use fatseg_core::pipeline::{
    localize_from_labels, run_pipeline, train_bundle, BundleConfig, Case, ModelBundle, PipelineOptions, Target, VolumesReport,
};
use fatseg_core::train::{composite_loss, composite_loss_grad, ClassWeights, TrainConfig};
use fatseg_core::volume::{region, tissue, LabelMap, LabelScheme};
use fatseg_core::{Error, SlicePlane};

const COHORT_SEED: u64 = 2024;
const RETEST_COHORT_SEED: u64 = 7000;
const TRAIN_SEED: u64 = 11;
const N_TRAIN: usize = 10;
const N_TEST: usize = 4;
const N_RETEST: usize = 17;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let secs = start.elapsed().as_secs_f64();
    if let Some(limit) = limit_s {
        if secs > limit {
            o.pass = false;
            o.detail += &format!("; runtime {secs:.1}s exceeds {limit:.0}s");
        }
    }
    println!("criterion {id} [{}] {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn parameter_economy() -> Outcome {
    let cfg = SegNetConfig::default();
    let m = count_parameters(&build_segnet_with(5, FusionMode::Maxout, 1, &cfg).unwrap()) as f64;
    let c = count_parameters(&build_segnet_with(5, FusionMode::Concat, 1, &cfg).unwrap()) as f64;
    let ratio = m / c;
    let pass = ratio <= 0.80 && (m - 2.5e6).abs() <= 0.25 * 2.5e6;
    outcome(pass, format!("maxout {m}, concat {c}, ratio {ratio:.3}"))
}

fn aggregation_shape() -> Outcome {
    let spec = build_view_agg_net(5).unwrap();
    let conv1 = spec.layer_by_name("agg.conv1").unwrap();
    let conv2 = spec.layer_by_name("agg.conv2").unwrap();
    let shape_ok = (conv1.in_channels, conv1.out_channels, conv2.in_channels, conv2.out_channels) == (15, 30, 30, 5);
    // 3x3x3 kernel over 15 channels to 30, batch-norm scale and shift, 1x1x1 to 5
    let expected = (27 * 15 + 1) * 30 + 2 * 30 + (30 + 1) * 5;
    let got = count_parameters(&spec);
    outcome(shape_ok && got == expected, format!("15->30->5 {shape_ok}, trainable {got}, analytic {expected}"))
}

fn loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, p) = (5, 64);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let logits: Vec<f64> = (0..k * p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target: Vec<u8> = (0..p).map(|_| rng.random_range(0..k as u8)).collect();
        let cw = ClassWeights { weights: (0..k).map(|_| rng.random_range(0.5..2.0)).collect(), absent: vec![false; k] };
        let bw: Vec<f32> = (0..p).map(|_| rng.random_range(1.0..3.0f32)).collect();
        let (_, grad) = composite_loss_grad(&logits, &target, &cw, &bw).unwrap();
        let h = 1e-3;
        let fd: Vec<f64> = (0..k * p)
            .map(|i| {
                let mut a = logits.clone();
                let mut b = logits.clone();
                a[i] += h;
                b[i] -= h;
                let la = composite_loss_grad(&a, &target, &cw, &bw).unwrap().0.total();
                let lb = composite_loss_grad(&b, &target, &cw, &bw).unwrap().0.total();
                (la - lb) / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad.iter().zip(&fd).map(|(g, f)| (g - f).powi(2)).sum::<f64>().sqrt();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(fd.iter().map(|g| g * g).sum::<f64>().sqrt());
        worst = worst.max(diff / norm);
    }
    let target: Vec<u8> = (0..p).map(|i| (i % k) as u8).collect();
    let wce = composite_loss(&vec![0.2; k * p], &target, &ClassWeights::uniform(k), &vec![1.0; p]).unwrap().wce;
    let uniform_err = (wce + 0.2f64.ln()).abs();
    outcome(worst < 1e-4 && uniform_err <= 1e-6, format!("worst relative error {worst:.2e}, uniform |wce + ln 0.2| {uniform_err:.1e}"))
}

fn brute_dice(m: &[bool], p: &[bool]) -> f64 {
    let both = (0..m.len()).filter(|&i| m[i] && p[i]).count() as f64;
    let total = (0..m.len()).filter(|&i| m[i]).count() as f64 + (0..p.len()).filter(|&i| p[i]).count() as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * both / total
    }
}

/// ICC(A,1) from explicit residuals of the two-way table.
fn brute_icc(s1: &[f64], s2: &[f64]) -> f64 {
    let n = s1.len();
    let x: Vec<[f64; 2]> = (0..n).map(|i| [s1[i], s2[i]]).collect();
    let grand = x.iter().flatten().sum::<f64>() / (2 * n) as f64;
    let row: Vec<f64> = x.iter().map(|r| (r[0] + r[1]) / 2.0).collect();
    let col = [0, 1].map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64);
    let mut ssr = 0.0;
    let mut ssc = 0.0;
    let mut sse = 0.0;
    for i in 0..n {
        ssr += 2.0 * (row[i] - grand).powi(2);
        for j in 0..2 {
            sse += (x[i][j] - row[i] - col[j] + grand).powi(2);
        }
    }
    for c in col {
        ssc += n as f64 * (c - grand).powi(2);
    }
    let msr = ssr / (n - 1) as f64;
    let msc = ssc;
    let mse = sse / (n - 1) as f64;
    (msr - mse) / (msr + mse + 2.0 / n as f64 * (msc - mse))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let len = rng.random_range(1..200);
        let density = rng.random_range(0.0..1.0);
        let m: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
        let p: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
        worst[0] = worst[0].max((dice(&m, &p).unwrap() - brute_dice(&m, &p)).abs());
        let (a, b): (f64, f64) = (rng.random_range(0.0..500.0), rng.random_range(0.01..500.0));
        worst[1] = worst[1].max((apd(a, b).unwrap() - 200.0 * (a - b).abs() / (a + b)).abs());
        let n = rng.random_range(3..25);
        let s1: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..100.0)).collect();
        let s2: Vec<f64> = s1.iter().map(|v| v + rng.random_range(-8.0..8.0)).collect();
        worst[2] = worst[2].max((icc_a1(&s1, &s2).unwrap().estimate - brute_icc(&s1, &s2)).abs());
    }
    let mut invariance: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(3..25);
        let s1: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..100.0)).collect();
        let s2: Vec<f64> = s1.iter().map(|v| v + rng.random_range(-8.0..8.0)).collect();
        let base = icc_a1(&s1, &s2).unwrap().estimate;
        let (shift, scale) = (rng.random_range(-50.0..50.0), rng.random_range(0.1..10.0));
        let shifted = icc_a1(&s1.iter().map(|v| v + shift).collect::<Vec<_>>(), &s2.iter().map(|v| v + shift).collect::<Vec<_>>());
        let scaled = icc_a1(&s1.iter().map(|v| v * scale).collect::<Vec<_>>(), &s2.iter().map(|v| v * scale).collect::<Vec<_>>());
        invariance = invariance.max((shifted.unwrap().estimate - base).abs()).max((scaled.unwrap().estimate - base).abs());
    }
    let pass = worst.iter().all(|&w| w <= 1e-9) && invariance <= 1e-9;
    outcome(
        pass,
        format!("max error dice {:.1e}, apd {:.1e}, icc {:.1e}; invariance {invariance:.1e}", worst[0], worst[1], worst[2]),
    )
}

/// A region label volume whose axial slices mix labels with controlled abdominal share.
fn random_region_volume(rng: &mut ChaCha8Rng, [d, h, w]: [usize; 3]) -> LabelMap {
    let band = (rng.random_range(0..d), rng.random_range(0..d));
    let (lo, hi) = (band.0.min(band.1), band.0.max(band.1));
    let empty_view = rng.random_bool(0.1);
    let mut data = vec![region::BACKGROUND; d * h * w];
    for z in 0..d {
        if empty_view || rng.random_bool(0.1) {
            continue;
        }
        let share = if (lo..=hi).contains(&z) { rng.random_range(0.75..1.0) } else { rng.random_range(0.0..0.9) };
        for i in 0..h * w {
            let v = &mut data[z * h * w + i];
            *v = if rng.random_bool(0.2) {
                region::BACKGROUND
            } else if rng.random_bool(share) {
                region::ABDOMINAL
            } else if z < d / 2 {
                region::THORACIC
            } else {
                region::PELVIC
            };
        }
    }
    LabelMap::new([d, h, w], [5.0, 2.0, 2.0], LabelScheme::Region, data).unwrap()
}

fn brute_bounds(l: &LabelMap) -> Option<(usize, usize)> {
    let [d, h, w] = l.shape();
    let mut passing = Vec::new();
    for z in 0..d {
        let (mut fg, mut ab) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                let v = l.get(z, y, x);
                fg += (v != region::BACKGROUND) as usize;
                ab += (v == region::ABDOMINAL) as usize;
            }
        }
        if fg > 0 && ab as f64 >= 0.85 * fg as f64 {
            passing.push(z);
        }
    }
    Some((*passing.first()?, *passing.last()?))
}

fn brute_localize(s: &LabelMap, c: &LabelMap) -> Option<(usize, usize)> {
    match (brute_bounds(s), brute_bounds(c)) {
        (Some(a), Some(b)) => {
            let lo = (a.0 + b.0) as f64 / 2.0;
            let hi = (a.1 + b.1) as f64 / 2.0;
            Some((lo.floor() as usize, hi.ceil() as usize))
        }
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

#[derive(Serialize)]
struct LocalizationRow {
    expected: Option<(usize, usize)>,
    got: Option<(usize, usize)>,
}

fn localization_report(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut ok = true;
    for _ in 0..50 {
        let shape = [rng.random_range(8..40), rng.random_range(3..9), rng.random_range(3..9)];
        let s = random_region_volume(&mut rng, shape);
        let c = random_region_volume(&mut rng, shape);
        let expected = brute_localize(&s, &c);
        let got = match localize_from_labels(&s, &c) {
            Ok(r) => Some((r.z_low, r.z_high)),
            Err(Error::Localization(_)) => None,
            Err(e) => panic!("unexpected error {e}"),
        };
        ok &= expected == got;
        rows.push(LocalizationRow { expected, got });
    }
    (ok, serde_json::to_string(&rows).unwrap())
}

fn localization_rule() -> (Outcome, String) {
    let (ok, json) = localization_report(5);
    let failed = json.matches("null").count() / 2;
    (outcome(ok, format!("50 volumes, {failed} without a passing slice, exact match {ok}")), json)
}

/// Training recipe of the phantom experiment; `short` is the reduced budget used for the determinism re-run.
fn train_configs(short: bool) -> impl Fn(Target) -> TrainConfig {
    move |t| {
        let mut c = TrainConfig { seed: TRAIN_SEED, lr_step_epochs: 20, ..TrainConfig::default() };
        let (epochs, steps) = match t {
            Target::SegAxial => (20, 10),
            Target::SegCoronal | Target::SegSagittal => (24, 12),
            Target::LocCoronal | Target::LocSagittal => {
                c.initial_lr = 0.05;
                c.aug_translate_px = 2;
                c.aug_rotate_deg = 0.0;
                c.aug_scale_range = (1.0, 1.0);
                (30, 12)
            }
            Target::ViewAgg => {
                c.initial_lr = 0.05;
                c.batch_size = 2;
                (40, 4)
            }
        };
        c.max_epochs = if short { 2 } else { epochs };
        c.max_steps_per_epoch = Some(if short { 2 } else { steps });
        c
    }
}

fn phantom_cases(n: usize, seed: u64) -> Vec<PhantomCase> {
    generate_cohort(&PhantomConfig::default(), n, seed).unwrap()
}

#[derive(Serialize)]
struct CaseDice {
    case: String,
    region: (usize, usize),
    truth_region: (usize, usize),
    aggregated: [f64; 2],
    views: BTreeMap<String, [f64; 2]>,
}

#[derive(Serialize)]
struct PhantomReport {
    cases: Vec<CaseDice>,
    mean_sat: f64,
    mean_vat: f64,
    mean_view_vat: BTreeMap<String, f64>,
}

/// Dice of SAT and VAT within the ground-truth abdominal slab.
fn slab_dice(case: &Case, pred: &[u8]) -> [f64; 2] {
    let zr = case.abdominal_region().unwrap();
    let [_, h, w] = case.fat.shape();
    let range = zr.z_low * h * w..(zr.z_high + 1) * h * w;
    let t = &case.tissue.data()[range.clone()];
    let p = &pred[range];
    [dice_label(t, p, tissue::SAT).unwrap(), dice_label(t, p, tissue::VAT).unwrap()]
}

fn evaluate(bundle: &ModelBundle, cases: &[Case]) -> PhantomReport {
    let mut rows = Vec::new();
    for c in cases {
        let out = run_pipeline(&c.fat, bundle, &PipelineOptions::default()).unwrap();
        let zr = c.abdominal_region().unwrap();
        let views = SlicePlane::ALL
            .iter()
            .map(|&p| (p.name().to_string(), slab_dice(c, &out.views.argmax(p).unwrap())))
            .collect();
        rows.push(CaseDice {
            case: c.id.clone(),
            region: (out.report.z_low, out.report.z_high),
            truth_region: (zr.z_low, zr.z_high),
            aggregated: slab_dice(c, out.labels.data()),
            views,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&CaseDice) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_view_vat =
        SlicePlane::ALL.iter().map(|p| (p.name().to_string(), mean(&|r: &CaseDice| r.views[p.name()][1]))).collect();
    PhantomReport { mean_sat: mean(&|r| r.aggregated[0]), mean_vat: mean(&|r| r.aggregated[1]), mean_view_vat, cases: rows }
}

fn to_cases(cohort: &[PhantomCase], offset: usize) -> Vec<Case> {
    cohort.iter().enumerate().map(|(i, p)| Case::from_phantom(format!("case_{:03}", i + offset), p)).collect()
}

struct Experiment {
    bundle: ModelBundle,
    test: Vec<Case>,
    report_json: String,
}

fn phantom_learning(cfg: &BundleConfig) -> (Outcome, Experiment) {
    let cohort = to_cases(&phantom_cases(N_TRAIN + N_TEST, COHORT_SEED), 0);
    let (train, test) = cohort.split_at(N_TRAIN);
    let (bundle, _) = train_bundle(train, cfg, train_configs(false), 1).unwrap();
    let rep = evaluate(&bundle, test);
    let best_view = rep.mean_view_vat.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pass = rep.mean_sat >= 0.90 && rep.mean_vat >= 0.70 && rep.mean_vat >= best_view - 0.01;
    let detail = format!(
        "aggregated SAT {:.3}, VAT {:.3}; single-view VAT {}",
        rep.mean_sat,
        rep.mean_vat,
        rep.mean_view_vat.iter().map(|(k, v)| format!("{k} {v:.3}")).collect::<Vec<_>>().join(", ")
    );
    let report_json = serde_json::to_string_pretty(&rep).unwrap();
    (outcome(pass, detail), Experiment { bundle, test: test.to_vec(), report_json })
}

fn retest_reliability(bundle: &ModelBundle) -> (ReliabilityReport, Vec<String>) {
    let cohort = phantom_cases(N_RETEST, RETEST_COHORT_SEED);
    let mut pairs = Vec::new();
    let mut reports = Vec::new();
    for (i, case) in cohort.iter().enumerate() {
        let retest = perturb_retest(case, 100 + i as u64).unwrap();
        let run = |fat| -> VolumesReport { run_pipeline(fat, bundle, &PipelineOptions::default()).unwrap().report };
        let (a, b) = (run(&case.fat_image), run(&retest.fat_image));
        reports.push(a.to_json_without_runtime().unwrap());
        reports.push(b.to_json_without_runtime().unwrap());
        pairs.push((a, b));
    }
    (compare_sessions(&pairs).unwrap(), reports)
}

fn test_retest(bundle: &ModelBundle) -> (Outcome, String) {
    let (rel, _) = retest_reliability(bundle);
    let json = rel.to_json().unwrap();
    let sat = rel.label("SAT-V").unwrap();
    let vat = rel.label("VAT-V").unwrap();
    let pass = sat.icc.estimate >= 0.99 && vat.icc.estimate >= 0.99 && sat.apd_mean <= 5.0 && vat.apd_mean <= 5.0;
    let detail = format!(
        "ICC SAT {:.4} VAT {:.4}; mean APD SAT {:.2}% VAT {:.2}%",
        sat.icc.estimate, vat.icc.estimate, sat.apd_mean, vat.apd_mean
    );
    (outcome(pass, detail), json)
}

fn bundle_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let mut files: Vec<_> = walk(dir.path());
    files.sort();
    files.into_iter().flat_map(|p| std::fs::read(p).unwrap()).collect()
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism(cfg: &BundleConfig, loc_json: &str, exp: &Experiment, retest_json: &str) -> Outcome {
    let loc_again = localization_report(5).1 == loc_json;
    let infer_again = serde_json::to_string_pretty(&evaluate(&exp.bundle, &exp.test)).unwrap() == exp.report_json;
    let retest_again = retest_reliability(&exp.bundle).0.to_json().unwrap() == retest_json;
    let cohort = to_cases(&phantom_cases(N_TRAIN + N_TEST, COHORT_SEED), 0);
    let (train, test) = cohort.split_at(N_TRAIN);
    let short = || {
        let (b, _) = train_bundle(&train[..3], cfg, train_configs(true), 1).unwrap();
        // a short budget may not localize; compare whatever the pipeline returns
        let rep = match run_pipeline(&test[0].fat, &b, &PipelineOptions::default()) {
            Ok(out) => out.report.to_json_without_runtime().unwrap(),
            Err(e) => e.to_string(),
        };
        (bundle_bytes(&b), rep)
    };
    let retrain_again = short() == short();
    outcome(
        loc_again && infer_again && retest_again && retrain_again,
        format!(
            "localization {loc_again}, phantom evaluation {infer_again}, retest report {retest_again}, seeded retraining {retrain_again}"
        ),
    )
}

fn main() {
    let mut all = true;
    all &= report(1, "parameter economy", Some(1.0), parameter_economy);
    all &= report(2, "aggregation-net shape", Some(1.0), aggregation_shape);
    all &= report(3, "loss correctness", Some(30.0), loss_correctness);
    all &= report(4, "metric oracles", Some(30.0), metric_oracles);
    let mut loc_json = String::new();
    all &= report(5, "localization rule", Some(60.0), || {
        let (o, j) = localization_rule();
        loc_json = j;
        o
    });
    let cfg = BundleConfig::default();
    let mut exp = None;
    all &= report(6, "end-to-end phantom learning", Some(1800.0), || {
        let (o, e) = phantom_learning(&cfg);
        exp = Some(e);
        o
    });
    let exp = exp.unwrap();
    let mut retest_json = String::new();
    all &= report(7, "test-retest reliability", Some(600.0), || {
        let (o, j) = test_retest(&exp.bundle);
        retest_json = j;
        o
    });
    all &= report(8, "determinism", None, || determinism(&cfg, &loc_json, &exp, &retest_json));
    if !all {
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 to 10 train on the synthetic benchmark described by the shipped
//! dataset manifest and compare against the golden run records under
//! `tests/golden`. Known failures are pinned in `EXPECTED_FAILURES`; the test
//! fails if any criterion changes state in either direction.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use common::{brute_force_coco, random_matrix, rng};
use xview_core::curriculum::{p_pair, PairedDataset, Sampler, Schedule};
use xview_core::detector::{
    init_model, load_checkpoint, save_checkpoint, train, training_loss_var, DetectorParams, DetectorShape,
    InferConfig, Mode, Model, RunRecord,
};
use xview_core::eval::{coco_map, iou, nms, AreaBounds, Detection, ImageTruth, SeedReport, SeedRun};
use xview_core::geometry::BBox;
use xview_core::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore};
use xview_core::pathways::{cpa_forward, CpaCoefficients, CpaConfig, CpaParams, GateInit, TextSummary, TokenGrid};
use xview_core::stats::pearson;
use xview_core::synth::{
    attach_features, generate_pairs, load_coco, save_coco, DatasetManifest, GeneratorConfig, GuardedSplit,
    RegimeConfig, SceneSample, Split,
};

/// Criteria that fail on this implementation, with the analysis kept in the
/// decisions ledger. 7: dense routing anti-correlates with object count.
/// 9: curriculum alone is the most seed-stable mode on this benchmark.
const EXPECTED_FAILURES: &[u32] = &[7, 9];

const SEEDS: [u64; 3] = [42, 123, 789];
const MODES: [&str; 4] = ["baseline", "curriculum", "cpa", "both"];

// Tolerances, as stated by the criteria.
const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_BUDGET_SECS: u64 = 120;
const SIMPLEX_TOL: f64 = 1e-9;
const SCHEDULE_TOL: f64 = 1e-12;
const ROUTING_R: f64 = 0.5;
const ROUTING_SEED_BUDGET_SECS: u64 = 15 * 60;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, name, passed, detail }
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn golden_text(rel: &str) -> String {
    let p = golden_dir().join(rel);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn golden_record(mode: &str, seed: u64) -> (String, RunRecord) {
    let text = golden_text(&format!("{mode}/run_record_seed{seed}.json"));
    let record = serde_json::from_str(&text).unwrap();
    (text, record)
}

fn pair_samples(cfg: &GeneratorConfig, seed: u64, first: u64, pairs: usize) -> Vec<SceneSample> {
    generate_pairs(cfg, seed, first, pairs).unwrap().into_iter().flat_map(|(g, a)| [g, a]).collect()
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: 64.0,
        grid: 4,
        channels: 8,
        categories: vec!["a".into(), "b".into(), "c".into()],
        ground: RegimeConfig {
            count: (1, 3),
            side: (10.0, 24.0),
            cluster_sigma: Some(8.0),
        },
        aerial: RegimeConfig {
            count: (3, 6),
            side: (3.0, 8.0),
            cluster_sigma: None,
        },
        max_shared_categories: 2,
        ..GeneratorConfig::default()
    }
}

fn randomized_detector(shape: DetectorShape, seed: u64) -> DetectorParams {
    let mut r = rng(seed);
    let mut det = DetectorParams::init(shape, &mut r);
    let names: Vec<String> = det.store().names().cloned().collect();
    for n in names {
        let mut fresh = det.store().get(&n).unwrap().clone();
        for x in fresh.data_mut() {
            *x = r.random_range(-0.5..0.5);
        }
        det.store_mut().insert(n, fresh);
    }
    det
}

fn worst(report: &GradCheckReport) -> f64 {
    report.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
}

/// Names of blocks whose backward gradient is identically zero.
fn unreached(store: &ParamStore, loss: impl Fn(&mut Graph, &ParamStore) -> xview_core::Result<xview_core::numerics::Var>) -> Vec<String> {
    let mut g = Graph::new();
    let root = loss(&mut g, store).unwrap();
    let grads = g.backward(root).unwrap().params();
    store
        .iter()
        .filter(|(n, _)| grads.get(*n).is_none_or(|a| a.data().iter().all(|&x| x == 0.0)))
        .map(|(n, _)| n.clone())
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        h: GRAD_H,
        tol: GRAD_TOL,
        ..GradCheckOptions::default()
    };
    let cfg = small_generator();
    let categories = cfg.num_categories();
    let shape = DetectorShape {
        channels: cfg.channels,
        categories,
    };
    let cpa_cfg = CpaConfig::for_channels(cfg.channels);
    // Every auxiliary term switched on.
    let coeffs = CpaCoefficients {
        align: 0.5,
        entropy: 0.2,
        balance: 0.3,
    };
    let mut blocks = 0;
    let mut max_err: f64 = 0.0;
    let mut problems = Vec::new();
    for seed in [1u64, 2, 3] {
        let data = pair_samples(&cfg, seed, 0, 1);
        let batch: Vec<&SceneSample> = data.iter().collect();
        let det = randomized_detector(shape, 10 + seed);
        let cpa = CpaParams::init(cpa_cfg, GateInit::Random, &mut rng(20 + seed));
        let store = det.store().merged(cpa.store()).unwrap();
        let loss = |g: &mut Graph, s: &ParamStore| training_loss_var(g, &batch, s, categories, Some((cpa_cfg, &coeffs)));
        let report = grad_check(loss, &store, opts).unwrap();
        problems.extend(report.failures().map(|b| format!("seed {seed} {}", b.name)));
        problems.extend(unreached(&store, loss).into_iter().map(|n| format!("seed {seed} {n} unreached")));
        blocks += report.blocks.len();
        max_err = max_err.max(worst(&report));

        let base = grad_check(|g, s| training_loss_var(g, &batch, s, categories, None), det.store(), opts).unwrap();
        problems.extend(base.failures().map(|b| format!("seed {seed} baseline {}", b.name)));
        blocks += base.blocks.len();
        max_err = max_err.max(worst(&base));
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = problems.is_empty() && secs < GRAD_BUDGET_SECS as f64;
    outcome(
        1,
        "gradient fidelity",
        passed,
        format!("{blocks} blocks, max rel error {max_err:.2e}, {secs:.1} s, problems {problems:?}"),
    )
}

fn random_cpa_input(r: &mut impl Rng, d: usize, scale: f64) -> (TokenGrid, TextSummary) {
    let h = r.random_range(2..6);
    let w = r.random_range(2..6);
    (
        TokenGrid::new(random_matrix(r, h * w, d, scale), h, w).unwrap(),
        TextSummary::new(random_matrix(r, 3, d, 1.0)).unwrap(),
    )
}

fn criterion_2() -> Outcome {
    let d = 8;
    let mut r = rng(2);
    let mut worst_sum: f64 = 0.0;
    let mut worst_recon: f64 = 0.0;
    let mut interior = true;
    for i in 0..10_000u64 {
        let params = CpaParams::init(CpaConfig::for_channels(d), GateInit::Random, &mut rng(1000 + i / 100));
        let (v, t) = random_cpa_input(&mut r, d, [0.1, 1.0, 10.0][i as usize % 3]);
        let (f, _) = cpa_forward(&v, &t, &params, &CpaCoefficients::default()).unwrap();
        for p in [f.c.0, f.w] {
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            interior &= p.iter().all(|&x| x > 0.0 && x < 1.0);
        }
        worst_recon = worst_recon.max(f.reconstruction_error());
    }
    outcome(
        2,
        "simplex invariants",
        worst_sum <= SIMPLEX_TOL && interior && worst_recon < SIMPLEX_TOL,
        format!("max |sum - 1| {worst_sum:.1e}, interior {interior}, max reconstruction error {worst_recon:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let d = 8;
    let mut r = rng(3);
    let params = CpaParams::init(CpaConfig::for_channels(d), GateInit::Neutral, &mut r);
    let mut exact = 0;
    for _ in 0..100 {
        let (v, t) = random_cpa_input(&mut r, d, 1.0);
        let (f, _) = cpa_forward(&v, &t, &params, &CpaCoefficients::default()).unwrap();
        if f.c.0 == [1.0 / 3.0; 3] && f.w == [1.0 / 3.0; 3] {
            exact += 1;
        }
    }
    outcome(3, "zero-init neutrality", exact == 100, format!("{exact}/100 inputs exactly uniform"))
}

fn criterion_4() -> Outcome {
    let s = Schedule::new(0.3, 0.7, 1000).unwrap();
    let mut r = rng(4);
    let mut flat_ok = true;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        flat_ok &= p_pair(r.random_range(0.0..300.0), &s).unwrap() == 1.0;
        flat_ok &= p_pair(r.random_range(700.0..=1000.0), &s).unwrap() == 0.0;
        let t: f64 = r.random_range(300.0..700.0);
        worst = worst.max((p_pair(t, &s).unwrap() - (700.0 - t) / 400.0).abs());
    }

    let cfg = GeneratorConfig::default();
    let data = PairedDataset::new(pair_samples(&cfg, 5, 0, 12)).unwrap();
    let schedule = Schedule::default_for(90).unwrap();
    let batches = 10_000u64;
    let mut within = Vec::new();
    for step in [0u64, 35, 45, 55, 80] {
        let p = schedule.p_pair(step as f64).unwrap();
        let mut paired = 0;
        for b in 0..batches {
            let mut sampler = Sampler::new(1_000_000 * step + b, Some(schedule));
            for _ in 0..step {
                sampler.next_batch(&data, 2).unwrap();
            }
            paired += sampler.next_batch(&data, 2).unwrap().paired_draws;
        }
        let frac = paired as f64 / batches as f64;
        let sigma = (p * (1.0 - p) / batches as f64).sqrt();
        within.push(((frac - p).abs() <= 3.0 * sigma, format!("t={step} p={p:.3} obs={frac:.4}")));
    }
    let sampler_ok = within.iter().all(|(ok, _)| *ok);
    let points: Vec<&str> = within.iter().map(|(_, s)| s.as_str()).collect();
    outcome(
        4,
        "schedule exactness",
        flat_ok && worst <= SCHEDULE_TOL && sampler_ok,
        format!("flat regions exact {flat_ok}, max interior error {worst:.1e}, 3-sigma {sampler_ok} [{}]", points.join("; ")),
    )
}

fn int_box(r: &mut impl Rng) -> BBox {
    BBox::new(
        r.random_range(0..48) as f64,
        r.random_range(0..48) as f64,
        r.random_range(1..40) as f64,
        r.random_range(1..40) as f64,
    )
}

/// Random images with at most six truths and six detections; detections are
/// a mix of jittered truths and free boxes.
fn eval_fixture(r: &mut impl Rng, scored: bool) -> (Vec<Vec<Detection>>, Vec<ImageTruth>) {
    let images = r.random_range(1..=3);
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..images {
        let n = r.random_range(0..=6);
        let boxes: Vec<BBox> = (0..n).map(|_| int_box(r)).collect();
        let categories: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let mut d = Vec::new();
        for _ in 0..r.random_range(0..=6) {
            let score = if scored { 0.25 * r.random_range(1..=4) as f64 } else { 1.0 };
            let (bbox, category) = if n > 0 && r.random_bool(0.7) {
                let k = r.random_range(0..n);
                let b = boxes[k];
                let mut j = |v: f64, lo: f64| (v + r.random_range(-4..=4) as f64).max(lo);
                let bbox = BBox::new(j(b.x, 0.0), j(b.y, 0.0), j(b.w, 1.0), j(b.h, 1.0));
                (bbox, if r.random_bool(0.8) { categories[k] } else { r.random_range(0..2) })
            } else {
                (int_box(r), r.random_range(0..2))
            };
            d.push(Detection { bbox, category, score });
        }
        dets.push(d);
        truths.push(ImageTruth { boxes, categories });
    }
    (dets, truths)
}

fn same(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
        (None, None) => true,
        _ => false,
    }
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let bounds = AreaBounds::default();
    let fixtures = 3000;
    let mut mismatches = 0;
    let mut perfect_ok = true;
    let mut nms_ok = true;
    for i in 0..fixtures {
        let (dets, truths) = eval_fixture(&mut r, i % 2 == 0);
        let got = coco_map(&dets, &truths, bounds);
        let want = brute_force_coco(&dets, &truths, bounds.small, bounds.medium);
        let agree = same(got.map, want.map)
            && same(got.map50, want.map50)
            && same(got.map75, want.map75)
            && same(got.map_s, want.map_s)
            && same(got.map_m, want.map_m);
        mismatches += usize::from(!agree);

        let perfect: Vec<Vec<Detection>> = truths
            .iter()
            .map(|t| t.boxes.iter().zip(&t.categories).map(|(b, &c)| Detection { bbox: *b, category: c, score: 1.0 }).collect())
            .collect();
        let m = coco_map(&perfect, &truths, bounds);
        perfect_ok &= [m.map, m.map50, m.map75, m.map_s, m.map_m].iter().all(|v| v.is_none_or(|x| x == 100.0));

        for d in &dets {
            let once = nms(d, 0.5);
            nms_ok &= nms(&once, 0.5) == once;
        }
    }
    let seventh = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 2.0, 2.0)) == 1.0 / 7.0;
    outcome(
        5,
        "evaluator oracle equivalence",
        mismatches == 0 && perfect_ok && nms_ok && seventh,
        format!("{mismatches}/{fixtures} oracle mismatches, perfect = 100 {perfect_ok}, NMS idempotent {nms_ok}, IoU 1/7 {seventh}"),
    )
}

fn criterion_6() -> Outcome {
    let cfg = GeneratorConfig::default();
    let samples = pair_samples(&cfg, 6, 0, 25);
    let shape = DetectorShape {
        channels: cfg.channels,
        categories: cfg.num_categories(),
    };
    let detector = randomized_detector(shape, 6);
    let with = Model {
        detector: detector.clone(),
        cpa: init_model(shape, Some((CpaConfig::for_channels(cfg.channels), GateInit::Random)), 6).cpa,
    };
    let without = Model { detector, cpa: None };
    let bits = |d: &[Detection]| -> Vec<[u64; 5]> {
        d.iter()
            .map(|x| [x.bbox.x, x.bbox.y, x.bbox.w, x.bbox.h, x.score].map(f64::to_bits))
            .collect()
    };
    let mut identical = 0;
    let mut emitted = 0;
    for s in &samples {
        let mut same_here = true;
        for scored in [false, true] {
            let icfg = InferConfig { scored, ..InferConfig::default() };
            let a = with.infer(s, &icfg).unwrap();
            let b = without.infer(s, &icfg).unwrap();
            same_here &= bits(&a) == bits(&b) && a.iter().map(|d| d.category).eq(b.iter().map(|d| d.category));
            emitted += a.len();
        }
        identical += usize::from(same_here);
    }
    outcome(
        6,
        "inference purity",
        identical == samples.len() && emitted > 0 && with.cpa.is_some(),
        format!("{identical}/{} samples bit-identical ({emitted} detections)", samples.len()),
    )
}

struct Benchmark {
    train: PairedDataset,
    val: Vec<SceneSample>,
    test: Vec<SceneSample>,
    categories: usize,
}

fn benchmark() -> Benchmark {
    let manifest: DatasetManifest = serde_json::from_str(&golden_text("dataset_manifest.json")).unwrap();
    Benchmark {
        train: PairedDataset::new(manifest.generate_split(Split::Train).unwrap()).unwrap(),
        val: manifest.generate_split(Split::Val).unwrap(),
        test: manifest.generate_split(Split::Test).unwrap(),
        categories: manifest.generator.num_categories(),
    }
}

/// Trains mode=cpa from each golden record's own config.
fn replay_cpa(bench: &Benchmark) -> Vec<(u64, String, RunRecord, f64)> {
    SEEDS
        .iter()
        .map(|&seed| {
            let (_, golden) = golden_record("cpa", seed);
            assert_eq!((golden.config.mode, golden.config.seed, golden.config.epochs), (Mode::Cpa, seed, 10));
            let start = Instant::now();
            let out = train(&golden.config, bench.categories, &bench.train, &bench.val, &GuardedSplit::new(bench.test.clone())).unwrap();
            (seed, out.record.to_json().unwrap(), out.record, start.elapsed().as_secs_f64())
        })
        .collect()
}

fn criterion_7(runs: &[(u64, String, RunRecord, f64)]) -> Outcome {
    let mut hits = 0;
    let mut parts = Vec::new();
    let mut slow = false;
    for (seed, _, record, secs) in runs {
        let trace = record.routing.as_ref().expect("cpa run has routing");
        // Recomputed from the per-sample trace rather than trusting the summary.
        let counts: Vec<f64> = trace.records.iter().map(|r| r.object_count as f64).collect();
        let wd: Vec<f64> = trace.records.iter().map(|r| r.w[2]).collect();
        let ws: Vec<f64> = trace.records.iter().map(|r| r.w[0]).collect();
        let rd = pearson(&wd, &counts).unwrap().r;
        let rs = pearson(&ws, &counts).unwrap().r;
        let ok = rd.is_some_and(|r| r > ROUTING_R) && rs.is_some_and(|r| r < -ROUTING_R);
        hits += usize::from(ok);
        slow |= *secs >= ROUTING_SEED_BUDGET_SECS as f64;
        parts.push(format!(
            "seed {seed}: r_d {:+.3} r_s {:+.3} ({} val samples, {secs:.0} s)",
            rd.unwrap_or(f64::NAN),
            rs.unwrap_or(f64::NAN),
            counts.len()
        ));
    }
    outcome(
        7,
        "routing-complexity correlation",
        hits >= 2 && !slow,
        format!("{hits}/3 seeds with r_d > +{ROUTING_R} and r_s < -{ROUTING_R}; {}", parts.join("; ")),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn golden_metric(mode: &str, f: impl Fn(&RunRecord) -> Option<f64>) -> Vec<f64> {
    SEEDS.iter().map(|&s| f(&golden_record(mode, s).1).expect("metric defined")).collect()
}

fn criterion_8() -> Outcome {
    let val = |m| mean(&golden_metric(m, |r| r.val.overall.map));
    let aerial = |m| mean(&golden_metric(m, |r| r.test.aerial.and_then(|a| a.map)));
    let (vb, vbase) = (val("both"), val("baseline"));
    let (ab, abase) = (aerial("both"), aerial("baseline"));
    let others: Vec<String> = ["curriculum", "cpa"].iter().map(|m| format!("{m} {:.3}", val(m))).collect();
    outcome(
        8,
        "ablation direction",
        vb >= vbase && ab >= abase,
        format!(
            "mean val mAP both {vb:.3} vs baseline {vbase:.3} ({}); mean aerial test mAP both {ab:.3} vs baseline {abase:.3}",
            others.join(", ")
        ),
    )
}

/// Population convention, as in the seed reports.
fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn criterion_9() -> Outcome {
    let mut failures = Vec::new();
    let mut consistent = true;
    let mut stds = Vec::new();
    for mode in ["both", "curriculum"] {
        let shipped: SeedReport = serde_json::from_str(&golden_text(&format!("{mode}/seed_report.json"))).unwrap();
        failures.extend(shipped.failures.iter().map(|s| format!("{mode} seed {s}")));
        let runs: Vec<SeedRun> = SEEDS
            .iter()
            .map(|&seed| SeedRun {
                seed,
                report: Some(golden_record(mode, seed).1.test),
                error: None,
            })
            .collect();
        let recomputed = SeedReport::from_runs(runs);
        consistent &= recomputed.std == shipped.std && recomputed.mean == shipped.mean;
        let maps = golden_metric(mode, |r| r.test.overall.map);
        let std = population_std(&maps);
        consistent &= (std - shipped.std["overall.map"]).abs() <= 1e-12 * std.max(1.0);
        stds.push(std);
    }
    outcome(
        9,
        "stability direction",
        failures.is_empty() && consistent && stds[0] <= stds[1],
        format!(
            "std test mAP both {:.4} vs curriculum {:.4}; seed report consistent {consistent}; failed seeds {failures:?}",
            stds[0], stds[1]
        ),
    )
}

fn criterion_10(runs: &[(u64, String, RunRecord, f64)]) -> Outcome {
    let mut parsed_ok = true;
    for mode in MODES {
        for seed in SEEDS {
            let (text, record) = golden_record(mode, seed);
            parsed_ok &= record.to_json().unwrap() == text;
        }
    }
    let replayed: Vec<String> = runs
        .iter()
        .map(|(seed, json, _, _)| format!("cpa/{seed} {}", if *json == golden_record("cpa", *seed).0 { "identical" } else { "DIFFERS" }))
        .collect();
    let all_same = replayed.iter().all(|s| s.ends_with("identical"));
    outcome(
        10,
        "determinism",
        parsed_ok && all_same,
        format!("goldens re-serialize byte-exactly {parsed_ok}; replays: {}", replayed.join(", ")),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let samples = pair_samples(&cfg, 11, 0, 20);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    save_coco(&samples, &cfg.categories, &a).unwrap();
    let mut loaded = load_coco(&a).unwrap();
    attach_features(&mut loaded, &cfg).unwrap();
    save_coco(&loaded, &cfg.categories, &b).unwrap();
    let coco_ok = loaded == samples && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let shape = DetectorShape {
        channels: cfg.channels,
        categories: cfg.num_categories(),
    };
    let mut ckpt_ok = true;
    for (i, cpa) in [None, Some((CpaConfig::for_channels(cfg.channels), GateInit::Random))].into_iter().enumerate() {
        let model = init_model(shape, cpa, 11 + i as u64);
        let first = dir.path().join(format!("m{i}.xvck"));
        let second = dir.path().join(format!("n{i}.xvck"));
        save_checkpoint(&first, &model, Some(3)).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&second, &loaded.model, loaded.selected_epoch).unwrap();
        ckpt_ok &= loaded.model == model && std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    }
    outcome(
        11,
        "round-trips",
        coco_ok && ckpt_ok,
        format!("COCO lossless {coco_ok}, checkpoint byte-identical {ckpt_ok}"),
    )
}

#[test]
fn acceptance() {
    let bench = benchmark();
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6()];
    let runs = replay_cpa(&bench);
    outcomes.push(criterion_7(&runs));
    outcomes.push(criterion_8());
    outcomes.push(criterion_9());
    outcomes.push(criterion_10(&runs));
    outcomes.push(criterion_11());

    println!();
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        let known = if !o.passed && EXPECTED_FAILURES.contains(&o.id) { " (known failure)" } else { "" };
        println!("[{tag}] {:>2} {}{known}: {}", o.id, o.name, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria pass", outcomes.len());

    let changed: Vec<String> = outcomes
        .iter()
        .filter(|o| o.passed == EXPECTED_FAILURES.contains(&o.id))
        .map(|o| format!("{} {} now {}", o.id, o.name, if o.passed { "passes" } else { "fails" }))
        .collect();
    assert!(changed.is_empty(), "criterion outcomes changed: {changed:?}");
}

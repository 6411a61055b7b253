//! Subcommand implementations. Each validates its inputs, delegates to the
//! core library and records its outputs in a run manifest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use xview_core::curriculum::{PairedDataset, Schedule};
use xview_core::detector::{
    evaluate, init_model, load_checkpoint, save_checkpoint, train as train_model, DetectorShape, Mode, RunRecord,
    TrainConfig,
};
use xview_core::eval::{seed_sweep, EvalReport, SeedReport, REPORT_CSV_HEADER};
use xview_core::pathways::{routing_trace, Correlation, GateInit, RoutingTrace};
use xview_core::synth::{generate_dataset, load_dataset, SceneSample, Split, SplitAccess, SplitSizes, View};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;
use crate::{Common, EvalSplit, Format, RoutingSplit, Views};

pub const CHECKPOINT_FILE: &str = "checkpoint.xvck";
pub const RUN_RECORD_FILE: &str = "run_record.json";

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} exists and is not empty (use --force to overwrite)", out.display());
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn wants(common: &Common, f: Format) -> bool {
    common.format.is_none_or(|g| g == f)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn report_csv(report: &EvalReport, label: &str) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in report.csv_rows(label) {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn write_report(m: &mut ManifestBuilder, common: &Common, stem: &str, report: &EvalReport) -> Result<()> {
    if wants(common, Format::Json) {
        m.write(&format!("{stem}.json"), &to_json(report)?)?;
    }
    if wants(common, Format::Csv) {
        m.write(&format!("{stem}.csv"), &report_csv(report, stem))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RoutingSummary<'a> {
    samples: usize,
    r_dense: &'a Correlation,
    r_sparse: &'a Correlation,
    r_medium: &'a Correlation,
    rho_c_dense: &'a Correlation,
    /// Names of correlations left undefined by constant routing.
    undefined: Vec<&'static str>,
}

fn write_routing(m: &mut ManifestBuilder, common: &Common, trace: &RoutingTrace) -> Result<()> {
    let pairs = [
        ("r_dense", &trace.r_dense),
        ("r_sparse", &trace.r_sparse),
        ("r_medium", &trace.r_medium),
        ("rho_c_dense", &trace.rho_c_dense),
    ];
    let summary = RoutingSummary {
        samples: trace.records.len(),
        r_dense: &trace.r_dense,
        r_sparse: &trace.r_sparse,
        r_medium: &trace.r_medium,
        rho_c_dense: &trace.rho_c_dense,
        undefined: pairs.iter().filter(|(_, c)| !c.is_defined()).map(|(n, _)| *n).collect(),
    };
    if wants(common, Format::Csv) {
        m.write("routing.csv", &trace.to_csv())?;
    }
    if wants(common, Format::Json) {
        m.write("routing_summary.json", &to_json(&summary)?)?;
    }
    for (name, c) in pairs {
        match c.r {
            Some(r) => println!("{name}: r = {r:.4}, p = {:.3e}, n = {}", c.p_value.unwrap_or(f64::NAN), c.n),
            None => println!("{name}: undefined (constant routing), n = {}", c.n),
        }
    }
    Ok(())
}

fn train_config(cfg: &RunConfig, mode: Option<Mode>, seed: Option<u64>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut t = cfg.train.clone();
    if let Some(m) = mode {
        t.mode = m;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(e) = epochs {
        t.epochs = e;
    }
    t.validate()?;
    Ok(t)
}

pub fn generate(common: &Common, args: Vec<String>, seed: Option<u64>, pairs: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(p) = pairs {
        cfg.splits = SplitSizes::proportional(p)?;
    }
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("generate", args, &common.out);
    let manifest = generate_dataset(&cfg.generator, cfg.master_seed, cfg.splits, &common.out, true)?;
    m.record(xview_core::synth::MANIFEST_FILE);
    for split in [Split::Train, Split::Val, Split::Test] {
        m.record(split.file_name());
    }
    log::info!(
        "wrote {} pairs ({} / {} / {}) to {}",
        manifest.splits.total(),
        manifest.splits.train,
        manifest.splits.val,
        manifest.splits.test,
        common.out.display()
    );
    let config = json!({ "master_seed": cfg.master_seed, "splits": cfg.splits, "generator": cfg.generator });
    m.finish(config, Some(cfg.master_seed))?;
    Ok(())
}

pub fn train(
    common: &Common,
    args: Vec<String>,
    data: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let tc = train_config(&cfg, mode, seed, epochs)?;
    let (dataset, train_set, val, test) = load_dataset(data)?;
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("train", args, &common.out);
    let paired = PairedDataset::new(train_set)?;
    let outcome = train_model(&tc, dataset.generator.num_categories(), &paired, &val, &test)?;
    let record = &outcome.record;
    save_checkpoint(&common.out.join(CHECKPOINT_FILE), &outcome.model, Some(record.selected_epoch))?;
    m.record(CHECKPOINT_FILE);
    m.write(RUN_RECORD_FILE, &record.to_json()?)?;
    write_report(&mut m, common, "val_report", &record.val)?;
    write_report(&mut m, common, "test_report", &record.test)?;
    if let Some(trace) = &record.routing {
        write_routing(&mut m, common, trace)?;
    }
    println!(
        "selected epoch {} of {}; test mAP {:.2} (aerial {:.2})",
        record.selected_epoch,
        tc.epochs,
        record.test.overall.map.unwrap_or(f64::NAN),
        record.test.aerial.and_then(|a| a.map).unwrap_or(f64::NAN)
    );
    let config = json!({ "data": data, "dataset": dataset, "train": tc });
    m.finish(config, Some(dataset.master_seed))?;
    Ok(())
}

fn filter_views(samples: Vec<SceneSample>, views: Views) -> Vec<SceneSample> {
    let keep = match views {
        Views::All => return samples,
        Views::Ground => View::Ground,
        Views::Aerial => View::Aerial,
    };
    samples.into_iter().filter(|s| s.view == keep).collect()
}

pub fn eval(
    common: &Common,
    args: Vec<String>,
    checkpoint: &Path,
    data: &Path,
    split: EvalSplit,
    views: Views,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let loaded = load_checkpoint(checkpoint)?;
    let access = SplitAccess::open(data)?;
    let samples = match split {
        EvalSplit::Val => access.load(Split::Val)?,
        EvalSplit::Test => {
            let Some(token) = loaded.selection_token() else {
                bail!("checkpoint carries no selection record; the test split stays closed");
            };
            access.load_test_guarded()?.open(&token).to_vec()
        }
    };
    let samples = filter_views(samples, views);
    if samples.is_empty() {
        bail!("no samples of the requested view");
    }
    let shape = loaded.model.detector.shape();
    if shape.categories != access.manifest().generator.num_categories() {
        bail!(
            "checkpoint has {} categories, dataset has {}",
            shape.categories,
            access.manifest().generator.num_categories()
        );
    }
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("eval", args, &common.out);
    let report = evaluate(&loaded.model.detector, &samples, &cfg.train.infer, cfg.train.area_bounds)?;
    write_report(&mut m, common, "eval_report", &report)?;
    println!(
        "{} samples: mAP {:.2}, mAP50 {:.2}",
        report.samples,
        report.overall.map.unwrap_or(f64::NAN),
        report.overall.map50.unwrap_or(f64::NAN)
    );
    let config = json!({
        "checkpoint": checkpoint,
        "data": data,
        "split": format!("{split:?}").to_lowercase(),
        "views": format!("{views:?}").to_lowercase(),
        "infer": cfg.train.infer,
        "area_bounds": cfg.train.area_bounds,
    });
    m.finish(config, Some(access.manifest().master_seed))?;
    Ok(())
}

pub fn sweep_seeds(
    common: &Common,
    args: Vec<String>,
    data: &Path,
    seeds: &[u64],
    mode: Option<Mode>,
    epochs: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let base = train_config(&cfg, mode, None, epochs)?;
    let (dataset, train_set, val, test) = load_dataset(data)?;
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("sweep-seeds", args, &common.out);
    let paired = PairedDataset::new(train_set)?;
    let categories = dataset.generator.num_categories();
    let mut records: Vec<RunRecord> = Vec::new();
    let report: SeedReport = seed_sweep(seeds, |seed| {
        let tc = TrainConfig { seed, ..base.clone() };
        let outcome = train_model(&tc, categories, &paired, &val, &test)?;
        let test_report = outcome.record.test.clone();
        records.push(outcome.record);
        Ok(test_report)
    })?;
    for r in &records {
        m.write(&format!("run_record_seed{}.json", r.config.seed), &r.to_json()?)?;
    }
    if wants(common, Format::Json) {
        m.write("seed_report.json", &to_json(&report)?)?;
    }
    if wants(common, Format::Csv) {
        m.write("seed_report.csv", &report.to_csv())?;
    }
    let key = "overall.map";
    println!(
        "{} seeds ({} failed): test mAP {:.2} +/- {:.2}",
        report.seeds.len(),
        report.failures.len(),
        report.mean.get(key).copied().unwrap_or(f64::NAN),
        report.std.get(key).copied().unwrap_or(f64::NAN)
    );
    let config = json!({ "data": data, "dataset": dataset, "train": base, "seeds": seeds });
    m.finish(config, Some(dataset.master_seed))?;
    Ok(())
}

pub fn analyze_routing(
    common: &Common,
    args: Vec<String>,
    data: &Path,
    checkpoint: Option<&Path>,
    untrained: bool,
    seed: u64,
    split: RoutingSplit,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let access = SplitAccess::open(data)?;
    let samples = access.load(match split {
        RoutingSplit::Train => Split::Train,
        RoutingSplit::Val => Split::Val,
    })?;
    let model = match (checkpoint, untrained) {
        (Some(path), false) => load_checkpoint(path)?.model,
        (None, true) => {
            let shape = DetectorShape {
                channels: access.manifest().generator.channels,
                categories: access.manifest().generator.num_categories(),
            };
            let cpa_cfg = cfg.train.cpa_config(shape.channels);
            init_model(shape, Some((cpa_cfg, GateInit::Neutral)), seed)
        }
        _ => bail!("pass exactly one of --checkpoint and --untrained"),
    };
    let Some(cpa) = &model.cpa else {
        bail!("checkpoint has no pathway parameters (trained without CPA)");
    };
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("analyze-routing", args, &common.out);
    let trace = routing_trace(&model.detector, cpa, &samples)?;
    write_routing(&mut m, common, &trace)?;
    let config = json!({
        "data": data,
        "checkpoint": checkpoint,
        "untrained": untrained,
        "seed": seed,
        "split": format!("{split:?}").to_lowercase(),
        "cpa": cfg.train.cpa_config(model.detector.shape().channels),
    });
    m.finish(config, Some(access.manifest().master_seed))?;
    Ok(())
}

pub fn schedule(common: &Common, args: Vec<String>, t1: f64, t2: f64, steps: u64) -> Result<()> {
    let s = Schedule::new(t1, t2, steps)?;
    prepare_out(&common.out, common.force)?;
    let mut m = ManifestBuilder::new("schedule", args, &common.out);
    let rows: Vec<(u64, f64)> = (0..=steps)
        .map(|t| Ok((t, s.p_pair(t as f64)?)))
        .collect::<xview_core::Result<_>>()?;
    if wants(common, Format::Csv) {
        let mut csv = String::from("step,p_pair\n");
        for (t, p) in &rows {
            csv.push_str(&format!("{t},{p}\n"));
        }
        m.write("schedule.csv", &csv)?;
    }
    if wants(common, Format::Json) {
        let v: Vec<_> = rows.iter().map(|(t, p)| json!({ "step": t, "p_pair": p })).collect();
        m.write("schedule.json", &to_json(&v)?)?;
    }
    let (b1, b2) = s.boundaries();
    println!("T1 = {b1}, T2 = {b2}, {} rows", rows.len());
    m.finish(json!({ "t1": t1, "t2": t2, "steps": steps }), None)?;
    Ok(())
}

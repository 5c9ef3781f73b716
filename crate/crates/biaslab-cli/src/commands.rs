//! Implementations of the subcommands. Every command writes its reports
//! plus the fully resolved `config.toml` into a fresh output directory and
//! is bit-reproducible from that echo.

use std::path::Path;

use serde::Serialize;

use biaslab::cbi::{self, BiasTransform, CbiReport};
use biaslab::dataset::{Dataset, Sample, Split};
use biaslab::error::{Error, Result};
use biaslab::gebi;
use biaslab::mitigation::{self, AugmentationPolicy, FeedbackConfig};
use biaslab::model::{evaluate, EvalReport, TinyCnn};
use biaslab::rng;
use biaslab::stylemix;
use biaslab::synthdata::{self, generate};

use crate::config::RunConfig;

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serializing {name}: {e}")))?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

fn load_model(path: &Path) -> Result<TinyCnn> {
    TinyCnn::load(path)
}

fn test_split(dataset: &Dataset) -> Vec<&Sample> {
    dataset.with_split(Split::Test)
}

fn build_transform(cfg: &RunConfig, spec: &cbi::TransformSpec, bank_seed: u64) -> BiasTransform {
    let stamp_side = ((cfg.data.side as f64) * cfg.cbi.stamp_side_frac).round() as usize;
    spec.build(stamp_side.max(8), bank_seed)
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Serialize)]
struct GenReport {
    total: usize,
    per_class: Vec<usize>,
    train: usize,
    val: usize,
    test: usize,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = generate(&cfg.data)?;
    dataset.save(&out.join("dataset"))?;
    let report = GenReport {
        total: dataset.len(),
        per_class: (0..2).map(|c| dataset.count_class(c)).collect(),
        train: dataset.with_split(Split::Train).len(),
        val: dataset.with_split(Split::Val).len(),
        test: dataset.with_split(Split::Test).len(),
    };
    write_json(out, "gen_report.json", &report)
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct TrainReport {
    loss_history: Vec<f64>,
    eval_val: Option<EvalReport>,
    eval_test: EvalReport,
    parameter_count: usize,
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let (model, report) = train_on(cfg, &dataset)?;
    model.save(&out.join("model.bin"))?;
    write_json(out, "train_report.json", &report)
}

fn train_on(cfg: &RunConfig, dataset: &Dataset) -> Result<(TinyCnn, TrainReport)> {
    let mut model = TinyCnn::new(cfg.model.input_side, cfg.model.classes, cfg.model.init_seed)?;
    let train_samples = dataset.with_split(Split::Train);
    let loss_history = model.train(&train_samples, &cfg.train, None)?;
    let val = dataset.with_split(Split::Val);
    let eval_val = if val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &val)?)
    };
    let eval_test = evaluate(&model, &test_split(dataset))?;
    let report = TrainReport {
        loss_history,
        eval_val,
        eval_test,
        parameter_count: model.param_count(),
    };
    Ok((model, report))
}

// ── audit-gebi ───────────────────────────────────────────────────────

pub fn audit_gebi(cfg: &RunConfig, data_dir: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let model = load_model(model_path)?;
    let test = test_split(&dataset);
    let report = gebi::run_gebi(&test, &model, &cfg.gebi)?;
    export_attribution_maps(cfg, &model, &test, out)?;
    if cfg.gebi_export.contact_sheets {
        export_contact_sheets(&dataset, &report, out)?;
    }
    write_json(out, "gebi_report.json", &report)
}

/// Write the first few attribution maps of the explained class as PGM
/// files (contrast-stretched for display).
fn export_attribution_maps(
    cfg: &RunConfig,
    model: &TinyCnn,
    test: &[&Sample],
    out: &Path,
) -> Result<()> {
    if cfg.gebi_export.maps == 0 {
        return Ok(());
    }
    let dir = out.join("maps");
    std::fs::create_dir_all(&dir)?;
    for s in test
        .iter()
        .filter(|s| s.label == cfg.gebi.target_class)
        .take(cfg.gebi_export.maps)
    {
        let prepared = model.prepare(&s.image)?;
        let map = match cfg.gebi.explainer {
            biaslab::attribution::ExplainerKind::Saliency => {
                biaslab::attribution::saliency(model, &prepared, cfg.gebi.target_class)?
            }
            biaslab::attribution::ExplainerKind::Occlusion => biaslab::attribution::occlusion(
                model,
                &prepared,
                cfg.gebi.target_class,
                cfg.gebi.occlusion_patch,
                cfg.gebi.occlusion_stride,
            )?,
            biaslab::attribution::ExplainerKind::Lrp => biaslab::attribution::lrp_epsilon(
                model,
                &prepared,
                cfg.gebi.target_class,
                &cfg.gebi.lrp,
            )?,
        };
        map.values
            .stretch_contrast()
            .write_pgm(&dir.join(format!("map_{:06}.pgm", s.id)))?;
    }
    Ok(())
}

/// Per-cluster montage of up to 12 member images, 4 per row.
fn export_contact_sheets(
    dataset: &Dataset,
    report: &gebi::ClusterReport,
    out: &Path,
) -> Result<()> {
    use biaslab::image::Image;
    const TILE: usize = 32;
    const COLS: usize = 4;
    let dir = out.join("clusters");
    std::fs::create_dir_all(&dir)?;
    let by_id: std::collections::HashMap<u64, &Sample> =
        dataset.samples.iter().map(|s| (s.id, s)).collect();
    for cluster in &report.clusters {
        let members: Vec<&Sample> = cluster
            .member_ids
            .iter()
            .take(12)
            .filter_map(|id| by_id.get(id).copied())
            .collect();
        if members.is_empty() {
            continue;
        }
        let rows = members.len().div_ceil(COLS);
        let (w, h) = (COLS * (TILE + 1) + 1, rows * (TILE + 1) + 1);
        let mut sheet = Image::filled(w, h, 1.0);
        for (i, s) in members.iter().enumerate() {
            let tile = s.image.box_downscale(TILE)?;
            let (ox, oy) = ((i % COLS) * (TILE + 1) + 1, (i / COLS) * (TILE + 1) + 1);
            for y in 0..TILE {
                for x in 0..TILE {
                    sheet.set(ox + x, oy + y, tile.get(x, y));
                }
            }
        }
        sheet.write_pgm(&dir.join(format!("cluster_{:02}_sheet.pgm", cluster.index)))?;
    }
    Ok(())
}

// ── audit-cbi ────────────────────────────────────────────────────────

pub fn audit_cbi(cfg: &RunConfig, data_dir: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let model = load_model(model_path)?;
    let transform = build_transform(cfg, &cfg.cbi.transform, cfg.cbi.bank_seed);
    let report = cbi::run_cbi(&model, &test_split(&dataset), &transform, cfg.seed)?;
    write_cbi(out, "cbi_report.json", "cbi_rows.csv", &report)
}

fn write_cbi(out: &Path, json_name: &str, csv_name: &str, report: &CbiReport) -> Result<()> {
    write_json(out, json_name, report)?;
    let mut w = csv::Writer::from_path(out.join(csv_name))
        .map_err(|e| Error::data(format!("{csv_name}: {e}")))?;
    w.write_record(["id", "p_orig", "p_biased", "change", "switched", "direction"])
        .map_err(|e| Error::data(format!("{csv_name}: {e}")))?;
    for row in &report.rows {
        w.write_record([
            row.id.to_string(),
            format!("{}", row.p_orig),
            format!("{}", row.p_biased),
            format!("{}", row.change),
            (row.switched as u8).to_string(),
            format!("{}->{}", row.predicted, row.to),
        ])
        .map_err(|e| Error::data(format!("{csv_name}: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

// ── sweep-tda ────────────────────────────────────────────────────────

#[derive(Serialize)]
struct SweepRow {
    transform: String,
    p: f64,
    seed: u64,
    f1_org: f64,
    f1_aug: f64,
    f1_mean: f64,
    switched: usize,
    switched_fraction: f64,
    mean_change: f64,
    median_change: f64,
}

pub fn sweep_tda(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let rows = run_sweep(cfg, &dataset)?;
    write_sweep_csv(out, "tda_sweep.csv", &rows)
}

fn run_sweep(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<SweepRow>> {
    let train_transform = build_transform(cfg, &cfg.tda.transform, cfg.tda.train_bank_seed);
    let test_transform = build_transform(cfg, &cfg.tda.transform, cfg.tda.test_bank_seed);
    let mut rows = Vec::new();
    for &p in &cfg.tda.probabilities {
        for &seed in &cfg.tda.seeds {
            let mut model = TinyCnn::new(
                cfg.model.input_side,
                cfg.model.classes,
                rng::subseed(cfg.model.init_seed, 11, seed),
            )?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let policy = AugmentationPolicy::single(train_transform.clone(), p);
            let tda = mitigation::tda_train(
                &mut model,
                dataset,
                &policy,
                &train_cfg,
                &test_transform,
                rng::subseed(cfg.seed, 13, seed),
            )?;
            let audit = cbi::run_cbi(
                &model,
                &test_split(dataset),
                &test_transform,
                rng::subseed(cfg.seed, 13, seed),
            )?;
            rows.push(SweepRow {
                transform: cfg.tda.transform.label().to_string(),
                p,
                seed,
                f1_org: tda.f1_org,
                f1_aug: tda.f1_aug,
                f1_mean: tda.f1_mean,
                switched: audit.switched_total,
                switched_fraction: audit.switched_fraction(),
                mean_change: audit.mean_change,
                median_change: audit.median_change,
            });
        }
    }
    Ok(rows)
}

fn write_sweep_csv(out: &Path, name: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join(name))
        .map_err(|e| Error::data(format!("{name}: {e}")))?;
    w.write_record([
        "transform",
        "p",
        "seed",
        "f1_org",
        "f1_aug",
        "f1_mean",
        "switched",
        "switched_fraction",
        "mean_change",
        "median_change",
    ])
    .map_err(|e| Error::data(format!("{name}: {e}")))?;
    for r in rows {
        w.write_record([
            r.transform.clone(),
            format!("{}", r.p),
            r.seed.to_string(),
            format!("{}", r.f1_org),
            format!("{}", r.f1_aug),
            format!("{}", r.f1_mean),
            r.switched.to_string(),
            format!("{}", r.switched_fraction),
            format!("{}", r.mean_change),
            format!("{}", r.median_change),
        ])
        .map_err(|e| Error::data(format!("{name}: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

// ── finetune-attr ────────────────────────────────────────────────────

#[derive(Serialize)]
struct CbiSummary {
    switched: usize,
    switched_fraction: f64,
    mean_change: f64,
    median_change: f64,
    f1_class1: f64,
    attribution_gap: f64,
}

#[derive(Serialize)]
struct FinetuneReport {
    alpha: f64,
    epochs: usize,
    before: CbiSummary,
    after: CbiSummary,
    history: Vec<mitigation::FeedbackEpoch>,
}

fn cbi_summary(
    model: &TinyCnn,
    test: &[&Sample],
    transform: &BiasTransform,
    seed: u64,
) -> Result<CbiSummary> {
    let audit = cbi::run_cbi(model, test, transform, seed)?;
    let eval = evaluate(model, test)?;
    let gap = mitigation::mean_attribution_gap(model, test, transform, seed)?;
    Ok(CbiSummary {
        switched: audit.switched_total,
        switched_fraction: audit.switched_fraction(),
        mean_change: audit.mean_change,
        median_change: audit.median_change,
        f1_class1: eval.per_class[1].f1,
        attribution_gap: gap,
    })
}

pub fn finetune_attr(
    cfg: &RunConfig,
    data_dir: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let mut model = load_model(model_path)?;
    let report = run_finetune(cfg, &dataset, &mut model)?;
    model.save(&out.join("model_attr.bin"))?;
    write_json(out, "attr_finetune.json", &report)
}

fn run_finetune(cfg: &RunConfig, dataset: &Dataset, model: &mut TinyCnn) -> Result<FinetuneReport> {
    let train_transform = build_transform(cfg, &cfg.feedback.transform, cfg.feedback.train_bank_seed);
    let audit_transform = build_transform(cfg, &cfg.cbi.transform, cfg.cbi.bank_seed);
    let test = test_split(dataset);
    let before = cbi_summary(model, &test, &audit_transform, cfg.seed)?;
    let fb = FeedbackConfig {
        alpha: cfg.feedback.alpha,
        epochs: cfg.feedback.epochs,
        learning_rate: cfg.feedback.learning_rate,
        batch_size: cfg.feedback.batch_size,
        lr_decay: cfg.feedback.lr_decay,
        seed: cfg.seed,
        transform: train_transform,
    };
    let history = mitigation::feedback_finetune(model, &dataset.with_split(Split::Train), &fb)?;
    let after = cbi_summary(model, &test, &audit_transform, cfg.seed)?;
    Ok(FinetuneReport {
        alpha: cfg.feedback.alpha,
        epochs: cfg.feedback.epochs,
        before,
        after,
        history,
    })
}

// ── stda ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct StdaReport {
    pairs: usize,
    label_counts: Vec<usize>,
    content_class: usize,
    style_class: usize,
}

pub fn stda(cfg: &RunConfig, data_dir: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let model = load_model(model_path)?;
    let synthetic = stylemix::stda_generate(&dataset, &model, &cfg.stda)?;
    synthetic.save(&out.join("synthetic"))?;
    let mut label_counts = vec![0usize; cfg.model.classes];
    for s in &synthetic.samples {
        label_counts[s.label] += 1;
    }
    let report = StdaReport {
        pairs: synthetic.len(),
        label_counts,
        content_class: cfg.stda.content_class,
        style_class: cfg.stda.style_class,
    };
    write_json(out, "stda_report.json", &report)
}

// ── stats ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct StatsCommandReport {
    stats: synthdata::StatsReport,
    /// Agreement between the frame annotation and the black-corner
    /// detector (two "raters" over the same images).
    frame_detector_kappa: Option<f64>,
}

pub fn stats(_cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let report = stats_on(&dataset)?;
    write_json(out, "stats_report.json", &report)
}

fn stats_on(dataset: &Dataset) -> Result<StatsCommandReport> {
    let stats = synthdata::stats_report(dataset)?;
    let annotated: Vec<usize> = dataset
        .samples
        .iter()
        .map(|s| usize::from(s.annotation.frame))
        .collect();
    let detected: Vec<usize> = dataset
        .samples
        .iter()
        .map(|s| usize::from(synthdata::detect_frame(&s.image)))
        .collect();
    let frame_detector_kappa = synthdata::cohens_kappa(&annotated, &detected).ok();
    Ok(StatsCommandReport {
        stats,
        frame_detector_kappa,
    })
}

// ── repro ────────────────────────────────────────────────────────────

/// The end-to-end reproduction: generate, inspect, train, audit with GEBI
/// and CBI (frame plus the circle control), then mitigate with the TDA
/// sweep and attribution-feedback fine-tuning on a reduced dataset.
pub fn repro(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = generate(&cfg.data)?;
    write_json(out, "stats_report.json", &stats_on(&dataset)?)?;

    let (model, train_report) = train_on(cfg, &dataset)?;
    model.save(&out.join("model.bin"))?;
    write_json(out, "train_report.json", &train_report)?;

    let gebi_report = gebi::run_gebi(&test_split(&dataset), &model, &cfg.gebi)?;
    write_json(out, "gebi_report.json", &gebi_report)?;

    let frame = build_transform(cfg, &cfg.cbi.transform, cfg.cbi.bank_seed);
    let frame_report = cbi::run_cbi(&model, &test_split(&dataset), &frame, cfg.seed)?;
    write_cbi(out, "cbi_report.json", "cbi_rows.csv", &frame_report)?;
    let control = build_transform(cfg, &biaslab::cbi::TransformSpec::circle(), cfg.cbi.bank_seed);
    let control_report = cbi::run_cbi(&model, &test_split(&dataset), &control, cfg.seed)?;
    write_cbi(
        out,
        "cbi_control_report.json",
        "cbi_control_rows.csv",
        &control_report,
    )?;

    // mitigation stages run on a reduced copy of the same spec
    let mut reduced_spec = cfg.data.clone();
    reduced_spec.n_per_class = cfg.repro.mitigation_n_per_class;
    reduced_spec.seed = rng::subseed(cfg.data.seed, 17, 1);
    let reduced = generate(&reduced_spec)?;

    let rows = run_sweep(cfg, &reduced)?;
    write_sweep_csv(out, "tda_sweep.csv", &rows)?;

    let (mut pretrained, _) = train_on(cfg, &reduced)?;
    let finetune_report = run_finetune(cfg, &reduced, &mut pretrained)?;
    pretrained.save(&out.join("model_attr.bin"))?;
    write_json(out, "attr_finetune.json", &finetune_report)?;
    Ok(())
}

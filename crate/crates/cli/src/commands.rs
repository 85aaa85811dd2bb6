use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use clap::Args;
use serde::{Deserialize, Serialize};

use triad_core::config::{ClientKind, RunConfig};
use triad_core::cotm::{
    export_records, filter_records, parse_rejection_list, run_cotm, CotmOptions, CotmTask, GenClient,
    MfgStore, StubClient,
};
use triad_core::cvm::{combine_responses, Rationale};
use triad_core::egroi::{run_egroi, run_egroi_training};
use triad_core::evalharness::{
    answers_from_responses, render_items, score_paired, score_run, EvalItem, PromptContext, Response, Shot,
};
use triad_core::instructiad::{build_dataset, dataset_stats, AnnotatedSample, Catalog};
use triad_core::map_io::{
    load_anomaly_map, load_mask, load_raster, read_json, read_jsonl, write_jsonl, write_raster, AnomalyMap,
    BinaryMask, ImageMeta, MapFormat,
};
use triad_core::metrics::{
    image_accuracy_sweep, normalize_map, pixel_auroc, threshold_sweep, AccuracyRow, ThresholdRow,
};
use triad_core::{Decision, Error, Label, Result};

use crate::rundir::RunDir;
use crate::ShotArg;

/// One line of a `--samples` file for `regions` and `metrics`. Paths are
/// relative to the dataset root.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapSample {
    sample_id: String,
    #[serde(default)]
    product_class: String,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    map: Option<String>,
    /// Defaults to `png16` for `.png` files and `f32raw` otherwise.
    #[serde(default)]
    map_format: Option<MapFormat>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    gt_mask: Option<String>,
}

fn resolve(config: &RunConfig, relative: &str) -> PathBuf {
    config.dataset_root.join(relative)
}

/// Sample ids become file names, so they must be plain.
fn check_sample_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(Error::Argument(format!("sample id `{id}` cannot be used as a file name")));
    }
    Ok(())
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Integrity(format!("duplicate sample_id `{id}`")));
        }
    }
    Ok(())
}

impl MapSample {
    fn load_map(&self, config: &RunConfig, run: &mut RunDir) -> Result<AnomalyMap> {
        let rel = self
            .map
            .as_deref()
            .ok_or_else(|| Error::Argument(format!("sample `{}` has no map", self.sample_id)))?;
        let path = resolve(config, rel);
        let format = self.map_format.unwrap_or_else(|| {
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                MapFormat::Png16
            } else {
                MapFormat::F32raw
            }
        });
        run.input(&path)?;
        load_anomaly_map(&path, format)
    }

    fn load_gt(&self, config: &RunConfig, run: &mut RunDir) -> Result<BinaryMask> {
        let rel = self
            .gt_mask
            .as_deref()
            .ok_or_else(|| Error::Argument(format!("sample `{}` has no gt_mask", self.sample_id)))?;
        let path = resolve(config, rel);
        run.input(&path)?;
        load_mask(&path)
    }
}

/// Applies `f` to every item on at most `workers` threads; results keep
/// input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("slot filled"))
        .collect()
}

#[derive(Debug, Args)]
pub struct RegionsArgs {
    /// JSONL sample list: sample_id, product_class, label, map, image, gt_mask.
    #[arg(long)]
    samples: PathBuf,
    /// Take boxes from ground-truth masks plus random normal regions.
    #[arg(long)]
    training: bool,
    /// Also write the cropped patches (requires `image`).
    #[arg(long)]
    crops: bool,
}

#[derive(Debug, Serialize)]
struct RegionsSummary {
    samples: usize,
    boxes: usize,
    per_sample: BTreeMap<String, usize>,
}

struct Loaded {
    meta: ImageMeta,
    raster: Option<triad_core::map_io::Raster>,
    map: Option<AnomalyMap>,
    gt: Option<BinaryMask>,
}

pub fn regions(config: &RunConfig, args: &RegionsArgs) -> Result<()> {
    let mut run = RunDir::create(config, "regions")?;
    run.arg("training", args.training);
    run.arg("crops", args.crops);
    run.input(&args.samples)?;
    let samples: Vec<MapSample> = read_jsonl(&args.samples)?;
    check_unique(samples.iter().map(|s| s.sample_id.as_str()))?;

    // Loading records input digests, so it stays sequential.
    let mut loaded = Vec::with_capacity(samples.len());
    for s in &samples {
        check_sample_id(&s.sample_id)?;
        let raster = match &s.image {
            Some(rel) => {
                let path = resolve(config, rel);
                run.input(&path)?;
                Some(load_raster(&path)?)
            }
            None => None,
        };
        let (map, gt) = if args.training {
            (None, Some(s.load_gt(config, &mut run)?))
        } else {
            (Some(s.load_map(config, &mut run)?), None)
        };
        let (width, height) = match (&raster, &map, &gt) {
            (Some(r), _, _) => (r.width(), r.height()),
            (None, Some(m), _) => (m.width(), m.height()),
            (None, None, Some(g)) => (g.width(), g.height()),
            _ => unreachable!("either a map or a mask is loaded"),
        };
        let meta = ImageMeta {
            width,
            height,
            product_class: s.product_class.clone(),
            sample_id: s.sample_id.clone(),
            label: s.label.unwrap_or(Label::Normal),
        };
        loaded.push(Loaded { meta, raster, map, gt });
    }

    let outputs = parallel_map(&loaded, config.workers, |l| {
        let raster = if args.crops { l.raster.as_ref() } else { None };
        match (&l.map, &l.gt) {
            (Some(map), _) => run_egroi(&l.meta, raster, map, &config.egroi),
            (None, Some(gt)) => run_egroi_training(&l.meta, raster, gt, &config.egroi),
            _ => unreachable!("either a map or a mask is loaded"),
        }
    });

    let mut summary = RegionsSummary {
        samples: loaded.len(),
        boxes: 0,
        per_sample: BTreeMap::new(),
    };
    for (l, out) in loaded.iter().zip(outputs) {
        let out = out?;
        let id = &l.meta.sample_id;
        run.write_json(&format!("manifests/{id}.json"), &out.manifest)?;
        for (k, patch) in out.patches.iter().enumerate() {
            let rel = format!("manifests/{id}.patch{k}.png");
            write_raster(patch, &run.path(&rel))?;
            run.output(&rel)?;
        }
        summary.boxes += out.manifest.boxes.len();
        summary.per_sample.insert(id.clone(), out.manifest.boxes.len());
    }
    run.write_json("reports/regions.json", &summary)?;
    println!("{} samples, {} boxes", summary.samples, summary.boxes);
    run.finish()?;
    Ok(())
}

fn default_thresholds() -> Vec<f64> {
    (1..=9).rev().map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// JSONL sample list with `map`, `gt_mask` and `label`.
    #[arg(long)]
    samples: PathBuf,
    /// Comma-separated binarization thresholds; negative values mark the
    /// lowest-scoring fraction of each map.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = default_thresholds())]
    thresholds: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    samples: usize,
    pixel_auroc: Option<f64>,
    thresholds: Vec<ThresholdRow>,
    image_accuracy: Vec<AccuracyRow>,
}

fn metrics_table(report: &MetricsReport) -> String {
    let mut s = String::from("threshold  pix-TPR  pix-FPR  img-acc\n");
    for row in &report.thresholds {
        let acc = report
            .image_accuracy
            .iter()
            .find(|a| a.threshold == row.threshold)
            .map(|a| format!("{:.1}%", a.accuracy * 100.0))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:>9}  {:>6.1}%  {:>6.1}%  {:>7}\n",
            row.threshold,
            row.rates.tpr * 100.0,
            row.rates.fpr * 100.0,
            acc
        ));
    }
    match report.pixel_auroc {
        Some(a) => s.push_str(&format!("P-AUROC: {:.1}%\n", a * 100.0)),
        None => s.push_str("P-AUROC: undefined\n"),
    }
    s
}

pub fn metrics(config: &RunConfig, args: &MetricsArgs) -> Result<()> {
    let mut run = RunDir::create(config, "metrics")?;
    run.arg(
        "thresholds",
        args.thresholds.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    run.input(&args.samples)?;
    let samples: Vec<MapSample> = read_jsonl(&args.samples)?;
    check_unique(samples.iter().map(|s| s.sample_id.as_str()))?;
    let mut raw = Vec::new();
    let mut gts = Vec::new();
    for s in &samples {
        raw.push(s.load_map(config, &mut run)?);
        gts.push(s.load_gt(config, &mut run)?);
    }
    let normalized: Vec<AnomalyMap> = raw.iter().map(normalize_map).collect();
    let pairs: Vec<(&AnomalyMap, &BinaryMask)> = normalized.iter().zip(&gts).collect();
    let pixel_auroc = match pixel_auroc(&pairs) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(why)) => {
            log::warn!("pixel AUROC undefined: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    let thresholds = threshold_sweep(&pairs, &args.thresholds)?;
    let positive: Vec<f64> = args.thresholds.iter().copied().filter(|t| *t > 0.0 && *t < 1.0).collect();
    let labelled: Vec<(&AnomalyMap, Decision)> = raw
        .iter()
        .zip(&samples)
        .map(|(m, s)| (m, Decision::from(s.label.unwrap_or(Label::Normal))))
        .collect();
    let image_accuracy = if positive.is_empty() || labelled.is_empty() {
        Vec::new()
    } else {
        image_accuracy_sweep(&labelled, &positive)?
    };
    let report = MetricsReport {
        samples: samples.len(),
        pixel_auroc,
        thresholds,
        image_accuracy,
    };
    let table = metrics_table(&report);
    run.write_json("reports/metrics.json", &report)?;
    run.write_text("reports/metrics.txt", &table)?;
    print!("{table}");
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct CvmArgs {
    /// Zero-shot model responses (JSONL with word-prediction scores).
    #[arg(long)]
    zero: PathBuf,
    /// One-shot model responses.
    #[arg(long)]
    one: PathBuf,
}

pub fn cvm(config: &RunConfig, args: &CvmArgs) -> Result<()> {
    let mut run = RunDir::create(config, "cvm")?;
    run.input(&args.zero)?;
    run.input(&args.one)?;
    let zero: Vec<Response> = read_jsonl(&args.zero)?;
    let one: Vec<Response> = read_jsonl(&args.one)?;
    let combined = combine_responses(&zero, &one, config.scheme)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let responses: Vec<Response> = combined
        .iter()
        .map(|c| {
            let key = match c.verdict.map(|v| v.rationale) {
                Some(Rationale::Consensus) => "consensus",
                Some(Rationale::TrustedQuery) => "trusted_query",
                Some(Rationale::AdoptedOpposite) => "adopted_opposite",
                None => "abstain",
            };
            *counts.entry(key.to_string()).or_default() += 1;
            Response {
                sample_id: c.sample_id.clone(),
                response_text: match c.verdict.map(|v| v.decision) {
                    Some(Decision::Defect) => "A".into(),
                    Some(Decision::Normal) => "B".into(),
                    None => String::new(),
                },
                normal_score_query: None,
                normal_score_reference: None,
                rationale: c.verdict.map(|v| v.rationale),
            }
        })
        .collect();
    write_jsonl(&responses, &run.path("records/cvm_responses.jsonl"))?;
    run.output("records/cvm_responses.jsonl")?;
    run.write_json("reports/cvm.json", &counts)?;
    println!("{} combined responses", responses.len());
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// JSONL annotated samples.
    #[arg(long)]
    samples: PathBuf,
    /// JSON object mapping sample ids to generated explanations.
    #[arg(long)]
    explanations: Option<PathBuf>,
    /// JSON `{"classes": [...]}` restricting product classes.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

pub fn dataset_build(config: &RunConfig, args: &DatasetBuildArgs) -> Result<()> {
    let mut run = RunDir::create(config, "dataset_build")?;
    run.input(&args.samples)?;
    let samples: Vec<AnnotatedSample> = read_jsonl(&args.samples)?;
    let explanations: BTreeMap<String, String> = match &args.explanations {
        Some(p) => {
            run.input(p)?;
            read_json(p)?
        }
        None => BTreeMap::new(),
    };
    let catalog: Option<Catalog> = match &args.catalog {
        Some(p) => {
            run.input(p)?;
            Some(read_json(p)?)
        }
        None => None,
    };
    let records = build_dataset(&samples, &explanations, catalog.as_ref())?;
    write_jsonl(&records, &run.path("records/instructiad.jsonl"))?;
    run.output("records/instructiad.jsonl")?;
    let stats = dataset_stats(&records, catalog.as_ref());
    run.write_json("reports/dataset_stats.json", &stats)?;
    println!("{} records from {} samples", records.len(), samples.len());
    run.finish()?;
    Ok(())
}

fn load_store(config: &RunConfig, run: &mut RunDir) -> Result<Option<MfgStore>> {
    match &config.mfg_store {
        Some(p) => {
            run.input(p)?;
            Ok(Some(MfgStore::load(p)?))
        }
        None => Ok(None),
    }
}

fn make_client(config: &RunConfig) -> Result<Box<dyn GenClient>> {
    let c = &config.client;
    match c.kind {
        ClientKind::Stub => Ok(Box::new(StubClient { seed: c.seed })),
        ClientKind::Http => http_client(config),
    }
}

#[cfg(feature = "http")]
fn http_client(config: &RunConfig) -> Result<Box<dyn GenClient>> {
    let c = &config.client;
    let endpoint = c
        .endpoint
        .clone()
        .ok_or_else(|| Error::Config {
            key: "client.endpoint".into(),
            message: "required for the http client".into(),
        })?;
    let mut client = triad_core::cotm::HttpClient::new(endpoint, c.model.clone()).with_token_env(&c.token_env);
    client.max_attempts = c.max_attempts;
    client.backoff = Duration::from_millis(c.backoff_ms);
    client.timeout = Duration::from_secs(c.timeout_s);
    Ok(Box::new(client))
}

#[cfg(not(feature = "http"))]
fn http_client(_: &RunConfig) -> Result<Box<dyn GenClient>> {
    let _ = Duration::ZERO;
    Err(Error::Config {
        key: "client.kind".into(),
        message: "this build has no http client".into(),
    })
}

#[derive(Debug, Args)]
pub struct CotmArgs {
    /// JSONL tasks: sample_id, product_class, mode, label, caption, coarse_label, image, plan.
    #[arg(long)]
    tasks: PathBuf,
    /// Reviewed rejection list: one record id per line.
    #[arg(long)]
    reject: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CotmAudit {
    total: usize,
    filtered: usize,
    exported: usize,
    unknown_rejections: Vec<String>,
}

pub fn cotm_generate(config: &RunConfig, args: &CotmArgs) -> Result<()> {
    let mut run = RunDir::create(config, "cotm_generate")?;
    run.input(&args.tasks)?;
    let tasks: Vec<CotmTask> = read_jsonl(&args.tasks)?;
    let store = load_store(config, &mut run)?.ok_or_else(|| Error::Config {
        key: "mfg_store".into(),
        message: "CoT-M generation needs a manufacturing process store".into(),
    })?;
    let client = make_client(config)?;
    run.arg("client", client.identity());
    let opts = CotmOptions {
        seed: config.client.seed,
        in_flight: config.client.in_flight,
        ..CotmOptions::default()
    };
    let mut records = run_cotm(&tasks, &store, client.as_ref(), &opts)?;
    let unknown = match &args.reject {
        Some(p) => {
            run.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            filter_records(&mut records, &parse_rejection_list(&text))
        }
        None => Vec::new(),
    };
    let exported = export_records(&records);
    let audit = CotmAudit {
        total: records.len(),
        filtered: records.len() - exported.len(),
        exported: exported.len(),
        unknown_rejections: unknown,
    };
    write_jsonl(&records, &run.path("records/cotm.jsonl"))?;
    run.output("records/cotm.jsonl")?;
    write_jsonl(exported, &run.path("records/cotm_export.jsonl"))?;
    run.output("records/cotm_export.jsonl")?;
    run.write_json("reports/cotm_audit.json", &audit)?;
    println!("{} records, {} filtered, {} exported", audit.total, audit.filtered, audit.exported);
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// JSONL evaluation items.
    #[arg(long)]
    items: PathBuf,
    /// Insert the manufacturing process as context.
    #[arg(long)]
    mfg: bool,
    #[arg(long, value_enum, default_value = "zero")]
    shot: ShotArg,
}

fn load_hints(config: &RunConfig, run: &mut RunDir) -> Result<Option<BTreeMap<String, String>>> {
    match &config.hints {
        Some(p) => {
            run.input(p)?;
            Ok(Some(read_json(p)?))
        }
        None => Ok(None),
    }
}

pub fn eval_render(config: &RunConfig, args: &RenderArgs) -> Result<()> {
    let mut run = RunDir::create(config, "eval_render")?;
    run.arg("mfg", args.mfg);
    let shot = match args.shot {
        ShotArg::Zero => Shot::Zero,
        ShotArg::One => Shot::One,
    };
    run.arg("shot", format!("{shot:?}").to_lowercase());
    run.input(&args.items)?;
    let items: Vec<EvalItem> = read_jsonl(&args.items)?;
    check_unique(items.iter().map(|i| i.sample_id.as_str()))?;
    let store = load_store(config, &mut run)?;
    let hints = load_hints(config, &mut run)?;
    let ctx = PromptContext {
        mfg: store.as_ref(),
        hints: hints.as_ref(),
    };
    let prompts = render_items(&items, config.template, args.mfg, shot, &ctx)?;
    write_jsonl(&prompts, &run.path("records/prompts.jsonl"))?;
    run.output("records/prompts.jsonl")?;
    println!("{} prompts", prompts.len());
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL evaluation items.
    #[arg(long)]
    items: PathBuf,
    /// JSONL responses without MFG context (or the only run).
    #[arg(long)]
    responses: PathBuf,
    /// JSONL responses with MFG context; reports the paired delta.
    #[arg(long)]
    mfg_responses: Option<PathBuf>,
    /// Break accuracy down by defect size using each item's `gt_mask_ref`.
    #[arg(long)]
    per_size: bool,
}

fn load_answers(path: &Path, config: &RunConfig, run: &mut RunDir) -> Result<BTreeMap<String, triad_core::evalharness::Answer>> {
    run.input(path)?;
    let responses: Vec<Response> = read_jsonl(path)?;
    answers_from_responses(&responses, config.scheme)
}

pub fn eval_score(config: &RunConfig, args: &ScoreArgs) -> Result<()> {
    let mut run = RunDir::create(config, "eval_score")?;
    run.arg("per_size", args.per_size);
    run.input(&args.items)?;
    let items: Vec<EvalItem> = read_jsonl(&args.items)?;
    check_unique(items.iter().map(|i| i.sample_id.as_str()))?;
    let masks = if args.per_size {
        let mut masks = BTreeMap::new();
        for item in items.iter().filter(|i| i.ground_truth == Decision::Defect) {
            let rel = item.gt_mask_ref.as_deref().ok_or_else(|| {
                Error::Scoring(format!("defect item `{}` has no gt_mask_ref", item.sample_id))
            })?;
            let path = resolve(config, rel);
            run.input(&path)?;
            masks.insert(rel.to_string(), load_mask(&path)?);
        }
        Some(masks)
    } else {
        None
    };
    let base = load_answers(&args.responses, config, &mut run)?;
    let table = match &args.mfg_responses {
        None => {
            let report = score_run(&items, &base, masks.as_ref())?;
            run.write_json("reports/score.json", &report)?;
            report.to_table("accuracy")
        }
        Some(p) => {
            let with_mfg = load_answers(p, config, &mut run)?;
            let paired = score_paired(&items, &base, &with_mfg, masks.as_ref())?;
            run.write_json("reports/score.json", &paired)?;
            format!("{}\n{}", paired.base.to_table("base"), paired.mfg.to_table("+MFG"))
        }
    };
    run.write_text("reports/score.txt", &table)?;
    print!("{table}");
    run.finish()?;
    Ok(())
}

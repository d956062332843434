//! Experiment matrix: every (kind, selection, seed) cell is built, trained,
//! checkpointed and evaluated; results are aggregated into reports.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sfae_core::backbone::{Backbone, StateDict};
use sfae_core::data::{preprocess, SliceBatch};
use sfae_core::dataset::{assemble_dataset, LabeledDataset};
use sfae_core::evaluation::{evaluate_run, metrics_from_maps, EvalReport, Metric, MetricTriple, SeedMetrics};
use sfae_core::features::{output_geometry, FeatureCache, FeatureExtractor, LayerSelection};
use sfae_core::models::{build_baseline, InputSpace, ModelKind};
use sfae_core::phantom::make_phantom;
use sfae_core::scoring::{AnomalyMap, ScoreKind};
use sfae_core::training::{train_with, Lifting, TrainEvent};

use crate::archive::Archive;
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{Context, Error, Result};
use crate::report::{export_overlay, read_json, save_maps, write_bar_chart_png, write_figure_csv, write_json, write_table_csv};
use crate::volume_io::{list_volumes, load_volume, volume_id};

pub const CONSTANT_METHOD: &str = "constant";
const PROPOSED: ModelKind = ModelKind::FeatureAe;

/// One training run of the matrix. Image-space kinds carry no selection.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub kind: ModelKind,
    pub selection: Option<LayerSelection>,
    pub seed: u64,
}

impl Cell {
    /// Directory name of the cell, e.g. `feature_ae__layer0-1-2__seed3`.
    pub fn key(&self) -> String {
        format!("{}__{}__seed{}", self.kind.name(), selection_tag(self.selection.as_ref()), self.seed)
    }
}

fn selection_tag(sel: Option<&LayerSelection>) -> String {
    match sel {
        Some(s) => s.label().replace(',', "-"),
        None => "image".into(),
    }
}

/// The cells of a config, grouped by selection, kind, then seed.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for sel in &cfg.selections {
        for &kind in cfg.kinds.iter().filter(|k| k.space() == InputSpace::Features) {
            out.extend(cfg.seeds.iter().map(|&seed| Cell {
                kind,
                selection: Some(sel.clone()),
                seed,
            }));
        }
    }
    for &kind in cfg.kinds.iter().filter(|k| k.space() == InputSpace::Images) {
        out.extend(cfg.seeds.iter().map(|&seed| Cell { kind, selection: None, seed }));
    }
    out
}

/// Summary written to `cells/<key>/result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config_hash: String,
    pub cell: Cell,
    pub metrics: MetricTriple,
    pub score_kind: ScoreKind,
    pub dynamic_range: f64,
    pub final_train_loss: f64,
    pub best_val: Option<(usize, f64)>,
    pub checkpoint_sha256: String,
    pub maps_sha256: String,
    /// Hash of everything above that a rerun must reproduce.
    pub digest: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selection: LayerSelection,
    /// `(C, H, W)` of the feature stack.
    pub geometry: (usize, usize, usize),
    pub method: String,
    /// 1-based rank of this selection per metric, by mean.
    pub rank: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Per metric and seed: selection labels from best to worst.
    pub per_seed_rankings: BTreeMap<String, Vec<(u64, Vec<String>)>>,
}

/// Everything `report.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
    pub ablation: Option<AblationSummary>,
}

impl RunReport {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Dataset plus the optional backbone, shared by all cells.
pub struct Prepared {
    pub data: LabeledDataset,
    pub extractor: Option<FeatureExtractor>,
    pub backbone_source: String,
}

/// Builds the labeled dataset the config describes.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<LabeledDataset> {
    match cfg {
        DatasetConfig::Phantom { n_volumes, seed, generator } => Ok(make_phantom(*n_volumes, *seed, generator)?),
        DatasetConfig::NiftiDir {
            path,
            seed,
            n_center_slices,
            out_size,
        } => {
            let files = list_volumes(path)?;
            let names: Vec<String> = files.iter().map(|(p, _)| volume_id(p)).collect();
            let mut io_error = None;
            let assembled = assemble_dataset(&names, *seed, |i| {
                let (p, fmt) = &files[i];
                match load_volume(p, *fmt) {
                    Ok(v) => preprocess(&v, *n_center_slices, *out_size),
                    Err(e) => {
                        let msg = e.to_string();
                        io_error = Some(e);
                        Err(sfae_core::Error::Format(msg))
                    }
                }
            });
            match (assembled, io_error) {
                (Ok(d), _) => Ok(d),
                (Err(_), Some(e)) => Err(e),
                (Err(e), None) => Err(e.into()),
            }
        }
    }
}

/// Loads backbone weights from an archive of named `f32` tensors.
pub fn load_backbone_weights(path: &Path) -> Result<Backbone> {
    let archive = Archive::load(path).at(path)?;
    let mut dict = StateDict::new();
    for (name, t) in archive.tensors {
        let values = t.as_f32().ok_or_else(|| Error::Format(format!("{name} must be f32")).at(path))?.to_vec();
        dict.insert(name, (t.shape, values));
    }
    Backbone::from_state_dict(dict).at(path)
}

pub fn load_backbone(cfg: &ExperimentConfig) -> Result<(Backbone, String)> {
    if let Some(path) = cfg.weights_path() {
        let bytes = std::fs::read(&path).at(&path)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        return Ok((load_backbone_weights(&path)?, format!("weights sha256 {digest}")));
    }
    if cfg.backbone.allow_random {
        warn!("no backbone weights found; using a random backbone (seed {})", cfg.backbone.seed);
        return Ok((Backbone::random(cfg.backbone.seed), format!("random seed {}", cfg.backbone.seed)));
    }
    Err(Error::Config(format!(
        "no backbone weights: set backbone.weights, put {} in ${}, or set backbone.allow_random",
        crate::config::WEIGHTS_FILE,
        crate::config::WEIGHTS_DIR_ENV
    )))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let t = Instant::now();
    let data = load_dataset(&cfg.dataset)?;
    info!(
        "dataset ready: {} train, {} val, {} test slices ({:.1}s)",
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        t.elapsed().as_secs_f64()
    );
    let (extractor, backbone_source) = if cfg.needs_backbone() {
        let (b, src) = load_backbone(cfg)?;
        (Some(FeatureExtractor::new(b)), src)
    } else {
        (None, "none".into())
    };
    Ok(Prepared {
        data,
        extractor,
        backbone_source,
    })
}

/// Feature caches for one selection, if enabled and within budget.
struct Caches {
    train: FeatureCache,
    val: FeatureCache,
    test: FeatureCache,
}

fn build_caches(cfg: &ExperimentConfig, prep: &Prepared, sel: &LayerSelection) -> Result<Option<Caches>> {
    let Some(ex) = &prep.extractor else {
        return Ok(None);
    };
    if !cfg.feature_cache.enabled {
        return Ok(None);
    }
    let split = &prep.data.split;
    let (c, h, w) = output_geometry(sel, split.train.size());
    let n = split.train.len() + split.val.len() + split.test.len();
    let bytes = n * c * h * w * 2;
    if bytes > cfg.feature_cache.memory_budget_mb << 20 {
        info!("feature cache for {} needs {} MiB, over budget; extracting per batch", sel.label(), bytes >> 20);
        return Ok(None);
    }
    let t = Instant::now();
    let caches = Caches {
        train: FeatureCache::build(ex, &split.train.images, sel, 32)?,
        val: FeatureCache::build(ex, &split.val.images, sel, 32)?,
        test: FeatureCache::build(ex, &split.test.images, sel, 32)?,
    };
    info!("cached {} features ({} MiB, {:.1}s)", sel.label(), bytes >> 20, t.elapsed().as_secs_f64());
    Ok(Some(caches))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn maps_digest(maps: &[AnomalyMap]) -> String {
    let mut h = Sha256::new();
    for m in maps {
        for v in &m.pixel_scores {
            h.update(v.to_le_bytes());
        }
        h.update(m.image_score.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn cell_digest(r: &CellResult) -> String {
    let mut r = r.clone();
    r.digest.clear();
    r.seconds = 0.0;
    sha256_hex(&serde_json::to_vec(&r).expect("result serializes"))
}

/// Trains and evaluates one cell, writing its artifacts under `dir`.
fn run_cell(cfg: &ExperimentConfig, hash: &str, prep: &Prepared, lifting: Lifting<'_>, cell: &Cell, dir: &Path) -> Result<CellResult> {
    let start = Instant::now();
    std::fs::create_dir_all(dir).at(dir)?;
    let split = &prep.data.split;
    let size = split.train.size();
    let geometry = match &cell.selection {
        Some(sel) => output_geometry(sel, size),
        None => (1, size, size),
    };
    let model = build_baseline(cell.kind, geometry, cell.seed)?;
    let tc = cfg.train_config(cell.kind, cell.seed);

    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(&log_path).at(&log_path)?);
    let mut log_error: Option<std::io::Error> = None;
    let mut ckpt_error: Option<Error> = None;
    let key = cell.key();
    let state = train_with(model, split, lifting, &tc, &mut |event| {
        let line = match &event {
            TrainEvent::Step { step, loss } => serde_json::json!({"step": step, "train_loss": loss}),
            TrainEvent::Validation { step, loss, .. } => {
                info!("{key}: step {step} val loss {loss:.5}");
                serde_json::json!({"step": step, "val_loss": loss})
            }
        };
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
        if let (TrainEvent::Validation { step, dynamic_range, model, .. }, Some(every)) = (&event, cfg.train.checkpoint_interval) {
            if every > 0 && step % every == 0 {
                let ckpt = periodic_checkpoint(model, *step, &tc, *dynamic_range, cell, hash);
                if let Err(e) = ckpt.and_then(|c| c.save(&dir.join(format!("checkpoint-step{step:06}.sfta")))) {
                    ckpt_error.get_or_insert(e);
                }
            }
        }
    })?;
    log.flush().at(&log_path)?;
    if let Some(e) = log_error {
        return Err(Error::Io(e).at(&log_path));
    }
    if let Some(e) = ckpt_error {
        return Err(e);
    }

    let ckpt = Checkpoint::from_state(&state, cell.selection.as_ref(), hash)?;
    let bytes = ckpt.to_archive()?.to_bytes()?;
    let ckpt_path = dir.join("checkpoint.sfta");
    std::fs::write(&ckpt_path, &bytes).at(&ckpt_path)?;

    let eval = evaluate_run(&state, &split.test, lifting, &cfg.scoring)?;
    let meta = serde_json::json!({"config_hash": hash, "cell": cell});
    if cfg.save_maps {
        save_maps(&eval.maps, meta.clone(), &dir.join("maps.sfta"))?;
    }
    export_overlays(cfg.overlays, &split.test, &eval.maps, &dir.join("overlays"));

    let mut result = CellResult {
        config_hash: hash.to_string(),
        cell: cell.clone(),
        metrics: eval.metrics,
        score_kind: eval.score_kind,
        dynamic_range: state.dynamic_range,
        final_train_loss: state.curve.last().map_or(f64::NAN, |p| p.train_loss),
        best_val: state.best.as_ref().map(|b| (b.step, b.val_loss)),
        checkpoint_sha256: sha256_hex(&bytes),
        maps_sha256: maps_digest(&eval.maps),
        digest: String::new(),
        seconds: 0.0,
    };
    result.digest = cell_digest(&result);
    result.seconds = start.elapsed().as_secs_f64();
    write_json(&result, &dir.join("result.json"))?;
    Ok(result)
}

fn periodic_checkpoint(
    model: &sfae_core::models::Model,
    step: usize,
    tc: &sfae_core::training::TrainConfig,
    dynamic_range: f64,
    cell: &Cell,
    hash: &str,
) -> Result<Checkpoint> {
    let geometry = model.geometry().ok_or_else(|| Error::Format("model has no fixed geometry".into()))?;
    Ok(Checkpoint {
        meta: crate::checkpoint::CheckpointMeta {
            version: crate::checkpoint::CHECKPOINT_VERSION,
            kind: model.kind,
            geometry,
            selection: cell.selection.clone(),
            spec: matches!(model.kind, ModelKind::FeatureAe | ModelKind::ImageAeMse | ModelKind::ImageAeSsim)
                .then(|| sfae_core::models::FeatureAeSpec::new(geometry[0])),
            seed: model.seed,
            step,
            train_config: tc.clone(),
            dynamic_range,
            config_hash: hash.to_string(),
            adam_step: step as u64,
        },
        weights: model.state_dict(),
        moments: None,
    })
}

/// Writes overlays for the first `n` anomalous test slices; failures are
/// logged, never raised.
fn export_overlays(n: usize, test: &SliceBatch, maps: &[AnomalyMap], dir: &Path) {
    if n == 0 {
        return;
    }
    let Some(labels) = &test.labels else { return };
    if let Err(e) = std::fs::create_dir_all(dir) {
        warn!("cannot create {}: {e}", dir.display());
        return;
    }
    for i in (0..test.len()).filter(|&i| labels[i] == 1).take(n) {
        let map = &maps[i];
        if map.size != test.size() {
            warn!("overlay skipped: map size {} differs from slice size {}", map.size, test.size());
            return;
        }
        let path = dir.join(format!("{}_{:03}.png", map.id.volume, map.id.slice));
        let mask = test.mask(i).unwrap_or(&[]);
        if let Err(e) = export_overlay(test.image(i), mask, map, &path) {
            warn!("overlay {} failed: {e}", path.display());
        }
    }
}

fn load_result(dir: &Path, hash: &str) -> Option<CellResult> {
    let path = dir.join("result.json");
    if !path.is_file() {
        return None;
    }
    match read_json::<CellResult>(&path) {
        Ok(r) if r.config_hash == hash && r.digest == cell_digest(&r) => Some(r),
        Ok(_) => {
            warn!("{} belongs to another config or is corrupt; rerunning", path.display());
            None
        }
        Err(e) => {
            warn!("{e}; rerunning");
            None
        }
    }
}

/// Outcome of a matrix run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
    pub results: Vec<CellResult>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        !self.report.failures.is_empty()
    }
}

/// Runs `cells` (skipping completed ones) and returns their results and failures.
fn run_cells(cfg: &ExperimentConfig, hash: &str, cells: &[Cell], root: &Path, prep: &mut Option<Prepared>) -> Result<(Vec<CellResult>, Vec<CellFailure>)> {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut pending: BTreeMap<Option<LayerSelection>, Vec<Cell>> = BTreeMap::new();
    for cell in cells {
        match load_result(&root.join("cells").join(cell.key()), hash) {
            Some(r) => {
                info!("{}: already complete", cell.key());
                results.push(r);
            }
            None => pending.entry(cell.selection.clone()).or_default().push(cell.clone()),
        }
    }
    if pending.is_empty() {
        return Ok((results, failures));
    }
    if prep.is_none() {
        *prep = Some(prepare(cfg)?);
    }
    let prep = prep.as_ref().expect("prepared above");
    // Selections in config order, image cells last.
    let mut groups: Vec<(Option<LayerSelection>, Vec<Cell>)> = Vec::new();
    for sel in cfg.selections.iter().cloned().map(Some).chain([None]) {
        if let Some(cells) = pending.remove(&sel) {
            groups.push((sel, cells));
        }
    }
    for (sel, group) in groups {
        let caches = match &sel {
            Some(s) => build_caches(cfg, prep, s)?,
            None => None,
        };
        let lifting = match (&sel, &caches, &prep.extractor) {
            (None, _, _) => Lifting::Images,
            (Some(_), Some(c), _) => Lifting::Cached {
                train: Some(&c.train),
                val: Some(&c.val),
                test: Some(&c.test),
            },
            (Some(s), None, Some(ex)) => Lifting::Extract { extractor: ex, selection: s },
            (Some(_), None, None) => unreachable!("feature cells always prepare a backbone"),
        };
        let next = AtomicUsize::new(0);
        let outcomes: Mutex<Vec<(usize, std::result::Result<CellResult, String>)>> = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..cfg.workers.min(group.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = group.get(i) else { break };
                    let key = cell.key();
                    info!("{key}: training");
                    let dir = root.join("cells").join(&key);
                    let outcome = match catch_unwind(AssertUnwindSafe(|| run_cell(cfg, hash, prep, lifting, cell, &dir))) {
                        Ok(Ok(r)) => Ok(r),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(panic) => Err(panic_message(panic)),
                    };
                    match &outcome {
                        Ok(r) => info!("{key}: {:?} in {:.0}s", r.metrics, r.seconds),
                        Err(e) => warn!("{key} failed: {e}"),
                    }
                    outcomes.lock().unwrap().push((i, outcome));
                });
            }
        });
        let mut outcomes = outcomes.into_inner().unwrap();
        outcomes.sort_by_key(|(i, _)| *i);
        for (i, outcome) in outcomes {
            match outcome {
                Ok(r) => results.push(r),
                Err(error) => {
                    let cell = group[i].clone();
                    let failure = CellFailure { cell, error };
                    let dir = root.join("cells").join(failure.cell.key());
                    if std::fs::create_dir_all(&dir).is_ok() {
                        let _ = write_json(&failure, &dir.join("failure.json"));
                    }
                    failures.push(failure);
                }
            }
        }
    }
    results.sort_by(|a, b| a.cell.cmp(&b.cell));
    Ok((results, failures))
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

/// Metrics of a scorer that gives every pixel and slice the same score.
pub fn constant_baseline(test: &SliceBatch) -> Result<MetricTriple> {
    let plane = test.images.plane_len();
    let maps: Vec<AnomalyMap> = test
        .ids
        .iter()
        .map(|id| AnomalyMap {
            id: id.clone(),
            size: test.size(),
            pixel_scores: vec![0.5; plane],
            image_score: 0.5,
        })
        .collect();
    Ok(metrics_from_maps(&maps, test)?)
}

fn method_name(cfg: &ExperimentConfig, kind: ModelKind, sel: Option<&LayerSelection>) -> String {
    match sel {
        Some(s) if cfg.selections.len() > 1 => format!("{} [{}]", kind.name(), s.label()),
        _ => kind.name().to_string(),
    }
}

/// Aggregates cell results into one report per (kind, selection), plus the
/// constant row, with Welch tests of the proposed method against the rest.
pub fn aggregate(cfg: &ExperimentConfig, hash: &str, results: &[CellResult], constant: Option<MetricTriple>, backbone_source: &str) -> Result<Vec<EvalReport>> {
    #[allow(clippy::type_complexity)]
    let mut groups: Vec<((ModelKind, Option<LayerSelection>), Vec<SeedMetrics>)> = Vec::new();
    for cell in cells(cfg) {
        let Some(r) = results.iter().find(|r| r.cell == cell) else {
            continue;
        };
        let key = (cell.kind, cell.selection.clone());
        let sm = SeedMetrics {
            seed: cell.seed,
            metrics: r.metrics,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(sm),
            None => groups.push((key, vec![sm])),
        }
    }
    let mut reports = Vec::new();
    for ((kind, sel), per_seed) in groups {
        let mut r = EvalReport::new(method_name(cfg, kind, sel.as_ref()), per_seed, hash)?;
        let tc = cfg.train_config(kind, 0);
        let score = cfg.scoring.score.unwrap_or(ScoreKind::for_kind(kind));
        r.metadata = vec![
            ("kind".into(), kind.name().into()),
            ("selection".into(), sel.as_ref().map_or("image".into(), |s| s.label())),
            ("steps".into(), tc.steps.to_string()),
            ("batch_size".into(), tc.batch_size.to_string()),
            ("lr".into(), tc.lr.to_string()),
            ("score".into(), serde_json::to_string(&score)?),
            ("reducer".into(), serde_json::to_string(&cfg.scoring.reducer)?),
            ("backbone".into(), if kind.space() == InputSpace::Features { backbone_source.into() } else { "none".into() }),
        ];
        if let Some(s) = &sel {
            let (c, h, w) = output_geometry(s, cfg.dataset.slice_size());
            r.metadata.push(("geometry".into(), format!("{c}x{h}x{w}")));
        }
        reports.push(r);
    }
    if let Some(m) = constant {
        let per_seed = cfg.seeds.iter().map(|&seed| SeedMetrics { seed, metrics: m }).collect();
        let mut r = EvalReport::new(CONSTANT_METHOD, per_seed, hash)?;
        r.metadata = vec![("score".into(), "constant".into())];
        reports.push(r);
    }
    let baselines: Vec<EvalReport> = reports
        .iter()
        .filter(|r| !r.metadata.iter().any(|(k, v)| k == "kind" && v == PROPOSED.name()))
        .cloned()
        .collect();
    for r in reports.iter_mut() {
        if r.metadata.iter().any(|(k, v)| k == "kind" && v == PROPOSED.name()) && r.n_seeds >= 2 {
            for b in baselines.iter().filter(|b| b.n_seeds >= 2) {
                r.compare_with(b)?;
            }
        }
    }
    Ok(reports)
}

fn write_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    write_json(report, &dir.join("report.json"))?;
    write_table_csv(&report.reports, &dir.join("table.csv"))?;
    write_figure_csv(&report.reports, &dir.join("figure.csv"))?;
    if let Err(e) = write_bar_chart_png(&report.reports, &dir.join("figure.png")) {
        warn!("bar chart not rendered: {e}");
    }
    if let Some(ab) = &report.ablation {
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path).at(&path)?;
        w.write_record(["selection", "geometry", "metric", "mean", "std", "rank", "config_hash"]).at(&path)?;
        for row in &ab.rows {
            let r = report.report(&row.method).expect("ablation rows come from reports");
            for m in Metric::ALL {
                let s = r.summary(m);
                let (c, h, wd) = row.geometry;
                w.write_record([
                    row.selection.label(),
                    format!("{c}x{h}x{wd}"),
                    m.name().to_string(),
                    format!("{:.6}", s.mean),
                    format!("{:.6}", s.std),
                    row.rank[m.name()].to_string(),
                    report.config_hash.clone(),
                ])
                .at(&path)?;
            }
        }
        w.flush().at(&path)?;
    }
    Ok(())
}

/// Constant-score metrics, computed once per output directory.
fn constant_metrics(dir: &Path, cfg: &ExperimentConfig, hash: &str, prep: &mut Option<Prepared>) -> Result<MetricTriple> {
    #[derive(Serialize, Deserialize)]
    struct Stored {
        config_hash: String,
        metrics: MetricTriple,
    }
    let path = dir.join("baseline_constant.json");
    if let Ok(s) = read_json::<Stored>(&path) {
        if s.config_hash == hash {
            return Ok(s.metrics);
        }
    }
    if prep.is_none() {
        *prep = Some(prepare(cfg)?);
    }
    let metrics = constant_baseline(&prep.as_ref().unwrap().data.split.test)?;
    write_json(
        &Stored {
            config_hash: hash.into(),
            metrics,
        },
        &path,
    )?;
    Ok(metrics)
}

fn backbone_source(results_dir: &Path, prep: &Option<Prepared>) -> String {
    if let Some(p) = prep {
        return p.backbone_source.clone();
    }
    read_json::<RunReport>(&results_dir.join("report.json"))
        .ok()
        .and_then(|r| {
            r.reports
                .iter()
                .flat_map(|x| x.metadata.iter())
                .find(|(k, v)| k == "backbone" && v != "none")
                .map(|(_, v)| v.clone())
        })
        .unwrap_or_else(|| "unknown".into())
}

fn run_matrix(cfg: &ExperimentConfig, ablation: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).at(&dir)?;
    let cfg_path = dir.join("config.json");
    if cfg_path.is_file() {
        let existing = ExperimentConfig::load(&cfg_path)?;
        if existing.hash() != hash {
            return Err(Error::Config(format!("{} holds results of a different config", dir.display())));
        }
    }
    write_json(cfg, &cfg_path)?;
    info!("config {hash}");
    let mut prep = None;
    let (results, failures) = run_cells(cfg, &hash, &cells(cfg), &dir, &mut prep)?;
    let constant = constant_metrics(&dir, cfg, &hash, &mut prep)?;
    let source = backbone_source(&dir, &prep);
    let reports = aggregate(cfg, &hash, &results, Some(constant), &source)?;
    let ablation = ablation.then(|| ablation_summary(cfg, &reports, &results));
    let report = RunReport {
        config_hash: hash,
        reports,
        failures,
        ablation,
    };
    write_outputs(&dir, &report)?;
    Ok(RunOutcome { dir, report, results })
}

/// Trains and evaluates every cell, then writes reports to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_matrix(cfg, false)
}

/// Layer selections compared by the ablation.
pub fn ablation_selections() -> Vec<LayerSelection> {
    [&[0][..], &[0, 1], &[0, 1, 2], &[0, 1, 2, 3]]
        .iter()
        .map(|l| LayerSelection::new(l).expect("valid selection"))
        .collect()
}

/// The config an ablation runs: feature_ae over the four nested selections.
pub fn ablation_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    if cfg.kinds.iter().any(|&k| k != PROPOSED) {
        return Err(Error::Config(format!("the ablation runs {} only", PROPOSED.name())));
    }
    Ok(ExperimentConfig {
        kinds: vec![PROPOSED],
        selections: ablation_selections(),
        ..cfg.clone()
    })
}

/// One row per layer selection, in selection order, with per-metric ranks.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_matrix(&ablation_config(cfg)?, true)
}

fn ablation_summary(cfg: &ExperimentConfig, reports: &[EvalReport], results: &[CellResult]) -> AblationSummary {
    let size = cfg.dataset.slice_size();
    let mut rows: Vec<AblationRow> = cfg
        .selections
        .iter()
        .filter_map(|sel| {
            let method = method_name(cfg, PROPOSED, Some(sel));
            reports.iter().any(|r| r.method == method).then(|| AblationRow {
                selection: sel.clone(),
                geometry: output_geometry(sel, size),
                method,
                rank: BTreeMap::new(),
            })
        })
        .collect();
    for m in Metric::ALL {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mean = |i: usize| reports.iter().find(|r| r.method == rows[i].method).unwrap().summary(m).mean;
        order.sort_by(|&a, &b| mean(b).total_cmp(&mean(a)));
        for (rank, i) in order.into_iter().enumerate() {
            rows[i].rank.insert(m.name().to_string(), rank + 1);
        }
    }
    let mut per_seed_rankings = BTreeMap::new();
    for m in Metric::ALL {
        let mut seeds = Vec::new();
        for &seed in &cfg.seeds {
            let mut entries: Vec<(String, f64)> = results
                .iter()
                .filter(|r| r.cell.seed == seed && r.cell.kind == PROPOSED)
                .filter_map(|r| r.cell.selection.as_ref().map(|s| (s.label(), m.of(&r.metrics))))
                .collect();
            entries.sort_by(|a, b| b.1.total_cmp(&a.1));
            seeds.push((seed, entries.into_iter().map(|e| e.0).collect()));
        }
        per_seed_rankings.insert(m.name().to_string(), seeds);
    }
    AblationSummary { rows, per_seed_rankings }
}

/// Rebuilds reports from the cell results already in `dir`.
pub fn rebuild_report(dir: &Path) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let hash = cfg.hash();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for cell in cells(&cfg) {
        let cell_dir = dir.join("cells").join(cell.key());
        match load_result(&cell_dir, &hash) {
            Some(r) => results.push(r),
            None => failures.push(CellFailure {
                error: read_json::<CellFailure>(&cell_dir.join("failure.json")).map_or_else(|_| "not run".into(), |f| f.error),
                cell,
            }),
        }
    }
    let mut prep = None;
    let constant = constant_metrics(dir, &cfg, &hash, &mut prep)?;
    let source = backbone_source(dir, &prep);
    let reports = aggregate(&cfg, &hash, &results, Some(constant), &source)?;
    let is_ablation = cfg.kinds == [PROPOSED] && cfg.selections == ablation_selections();
    let report = RunReport {
        config_hash: hash,
        ablation: is_ablation.then(|| ablation_summary(&cfg, &reports, &results)),
        reports,
        failures,
    };
    write_outputs(dir, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub config_hash: String,
    /// Problems with stored hashes or artifact checksums.
    pub hash_errors: Vec<String>,
    pub rerun_cells: usize,
    /// Cells whose rerun produced a different digest.
    pub mismatches: Vec<String>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.hash_errors.is_empty() && self.mismatches.is_empty()
    }
}

/// Re-hashes the config, checks that every artifact embeds that hash and
/// matches its recorded checksum, then reruns up to `max_rerun` cells in a
/// scratch directory and compares their digests.
pub fn verify(dir: &Path, max_rerun: usize) -> Result<VerifyOutcome> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let hash = cfg.hash();
    let mut out = VerifyOutcome {
        config_hash: hash.clone(),
        ..Default::default()
    };
    let mut err = |msg: String| out.hash_errors.push(msg);
    match read_json::<RunReport>(&dir.join("report.json")) {
        Ok(r) => {
            if r.config_hash != hash {
                err(format!("report.json has hash {}", r.config_hash));
            }
            for rep in r.reports.iter().filter(|rep| rep.config_hash != hash) {
                err(format!("report row {} has hash {}", rep.method, rep.config_hash));
            }
        }
        Err(e) => err(e.to_string()),
    }
    for name in ["table.csv", "figure.csv"] {
        let path = dir.join(name);
        match csv::Reader::from_path(&path) {
            Ok(mut rd) => {
                for rec in rd.records() {
                    match rec {
                        Ok(rec) if rec.iter().next_back() == Some(hash.as_str()) => {}
                        Ok(rec) => err(format!("{name}: row {:?} lacks the config hash", rec.get(0))),
                        Err(e) => err(format!("{name}: {e}")),
                    }
                }
            }
            Err(e) => err(format!("{name}: {e}")),
        }
    }
    let mut completed = Vec::new();
    for cell in cells(&cfg) {
        let cell_dir = dir.join("cells").join(cell.key());
        let path = cell_dir.join("result.json");
        if !path.is_file() {
            continue;
        }
        let result: CellResult = match read_json(&path) {
            Ok(r) => r,
            Err(e) => {
                err(e.to_string());
                continue;
            }
        };
        if result.config_hash != hash {
            err(format!("{}: result has hash {}", cell.key(), result.config_hash));
        }
        if result.cell != cell || result.digest != cell_digest(&result) {
            err(format!("{}: result digest does not match its contents", cell.key()));
        }
        let ckpt_path = cell_dir.join("checkpoint.sfta");
        match std::fs::read(&ckpt_path) {
            Ok(bytes) => {
                if sha256_hex(&bytes) != result.checkpoint_sha256 {
                    err(format!("{}: checkpoint checksum differs from the result", cell.key()));
                }
                match Archive::read_from(&mut bytes.as_slice()).and_then(|a| Checkpoint::from_archive(&a)) {
                    Ok(c) if c.meta.config_hash == hash && c.meta.seed == cell.seed => {}
                    Ok(c) => err(format!("{}: checkpoint has hash {} seed {}", cell.key(), c.meta.config_hash, c.meta.seed)),
                    Err(e) => err(format!("{}: {e}", cell.key())),
                }
            }
            Err(e) => err(format!("{}: {e}", cell.key())),
        }
        completed.push(result);
    }
    if max_rerun > 0 && !completed.is_empty() {
        let scratch = dir.join("verify-scratch");
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch).at(&scratch)?;
        }
        let picked: Vec<CellResult> = completed.into_iter().take(max_rerun).collect();
        let cells: Vec<Cell> = picked.iter().map(|r| r.cell.clone()).collect();
        let mut prep = None;
        let (rerun, failures) = run_cells(&cfg, &hash, &cells, &scratch, &mut prep)?;
        for f in failures {
            out.mismatches.push(format!("{}: rerun failed: {}", f.cell.key(), f.error));
        }
        for r in &rerun {
            let original = picked.iter().find(|p| p.cell == r.cell).expect("rerun of a picked cell");
            if original.digest != r.digest {
                out.mismatches.push(format!("{}: digest {} != {}", r.cell.key(), r.digest, original.digest));
            }
        }
        out.rerun_cells = rerun.len();
        std::fs::remove_dir_all(&scratch).at(&scratch)?;
    }
    write_json(&out, &dir.join("verify.json"))?;
    Ok(out)
}

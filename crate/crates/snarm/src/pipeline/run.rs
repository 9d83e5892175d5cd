//! Orchestration: feature extraction with optional caching, bank building,
//! training over a category scope, inference with map export, evaluation and
//! the four experimental regimes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{self, PrototypeBank};
use crate::decoder::AnomalyMap;
use crate::encoder::{self, EncoderBackend, PatchFeatureGrid, SyntheticBackend};
use crate::error::{Result, SnarmError};
use crate::grid::Grid2;
use crate::metrics::{self, BinaryMask, MetricReport};
use crate::model::{infer_features, SnarmModel};
use crate::pipeline::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::pipeline::config::{Config, Regime};
use crate::pipeline::dataset::{
    self, fewshot_subset, DatasetManifest, ManifestEntry, Split,
};
use crate::pipeline::pnm;
use crate::seeding;
use crate::train::{
    self, compute_inters, cyclic_train_with, synthesize_anomaly, TrainOptions, TrainReport,
    TrainSample,
};

pub const CACHE_ENV: &str = "SNARM_CACHE";

/// Backend registry: `synthetic` ships; external backbones are wrapped
/// behind `EncoderBackend` by embedding code and are not part of this build.
pub fn create_backend(cfg: &Config) -> Result<Box<dyn EncoderBackend>> {
    match cfg.encoder.backend.as_str() {
        "synthetic" => {
            let seed = backend_seed(cfg.run.seed);
            Ok(Box::new(SyntheticBackend::new(
                seed,
                cfg.encoder.layers,
                cfg.encoder.channels,
                cfg.encoder.patch_size,
            )?))
        }
        other => Err(SnarmError::config(format!(
            "unknown encoder backend `{other}` (only `synthetic` is registered)"
        ))),
    }
}

pub fn backend_seed(root: u64) -> u64 {
    seeding::substream(root, "encoder-backend", 0).gen()
}

pub fn bank_seed(root: u64) -> u64 {
    seeding::substream(root, "bank-build", 0).gen()
}

pub fn model_seed(root: u64) -> u64 {
    seeding::substream(root, "model-init", 0).gen()
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn cache_key(cfg: &Config, image_bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(toml::to_string(&cfg.encoder).unwrap_or_default().as_bytes());
    hasher.update(cfg.run.seed.to_le_bytes());
    hasher.update(image_bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Image file -> preprocessed -> backbone -> fused grid (optionally
/// upsampled/flattened). Uses the SNARM_CACHE directory when set.
pub fn compute_features(
    cfg: &Config,
    backend: &dyn EncoderBackend,
    path: &Path,
) -> Result<PatchFeatureGrid> {
    let bytes = std::fs::read(path)?;
    let cache = cache_dir().map(|dir| (dir.clone(), cache_key(cfg, &bytes)));
    if let Some((dir, key)) = &cache {
        let file = dir.join(format!("{key}.sft"));
        if file.is_file() {
            return encoder::read_feature_grid(&file);
        }
    }
    let image = dataset::load_image(path)?;
    let image = encoder::preprocess(&image, cfg.encoder.resize, cfg.encoder.crop)?;
    let stack = encoder::extract(&image, backend)?;
    let mut grid = encoder::fuse(&stack, image.h, image.w)?;
    if let (Some(th), Some(tw)) = (cfg.encoder.flatten_h, cfg.encoder.flatten_w) {
        grid = encoder::flatten_features(&grid, th, tw)?;
    }
    if let Some((dir, key)) = &cache {
        std::fs::create_dir_all(dir)?;
        encoder::write_feature_grid(&dir.join(format!("{key}.sft")), &grid)?;
    }
    Ok(grid)
}

/// Pooled or per-category prototype banks.
#[derive(Debug, Clone)]
pub enum Banks {
    Pooled(PrototypeBank),
    PerCategory(BTreeMap<String, PrototypeBank>),
}

impl Banks {
    pub fn for_category(&self, category: &str) -> Result<&PrototypeBank> {
        match self {
            Banks::Pooled(b) => Ok(b),
            Banks::PerCategory(map) => map.get(category).ok_or_else(|| {
                SnarmError::config(format!("no bank for category `{category}`"))
            }),
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        match self {
            Banks::Pooled(b) => bank::write_bank(&out_dir.join("bank.bin"), b),
            Banks::PerCategory(map) => {
                let dir = out_dir.join("banks");
                std::fs::create_dir_all(&dir)?;
                for (cat, b) in map {
                    bank::write_bank(&dir.join(format!("{cat}.bin")), b)?;
                }
                Ok(())
            }
        }
    }
}

/// Build a bank from feature grids; T is clamped to the pool size.
pub fn build_bank(cfg: &Config, grids: &[PatchFeatureGrid]) -> Result<PrototypeBank> {
    let pool = bank::build_raw_pool(grids)?;
    let t = cfg.bank.coreset_size.min(pool.len());
    bank::coreset_select(&pool, t, bank_seed(cfg.run.seed))
}

/// A trained model with its bank(s) and the training-loss milestones.
pub struct Trained {
    pub model: SnarmModel,
    pub banks: Banks,
    pub report: TrainReport,
    pub adam: train::Adam,
    pub scope: Vec<String>,
}

fn train_options(cfg: &Config) -> TrainOptions {
    TrainOptions {
        loss: cfg.loss_config(),
        stage: cfg.stage_config(),
        cycles: cfg.train.cycles,
        snmm_cyclic: cfg.train.snmm_cyclic,
        seed: cfg.run.seed,
    }
}

/// Train one model on the train-good images of `scope` categories.
/// `restrict` optionally limits the usable train images (few-shot).
pub fn train_scope(
    cfg: &Config,
    manifest: &DatasetManifest,
    scope: &[String],
    restrict: Option<&std::collections::BTreeSet<PathBuf>>,
    backend: &dyn EncoderBackend,
) -> Result<Trained> {
    // features per category, manifest order
    let mut per_cat: BTreeMap<String, Vec<PatchFeatureGrid>> = BTreeMap::new();
    for cat in scope {
        let mut grids = Vec::new();
        for entry in manifest.train_entries(cat) {
            if let Some(keep) = restrict {
                if !keep.contains(&entry.path) {
                    continue;
                }
            }
            grids.push(compute_features(cfg, backend, &entry.path)?);
        }
        if grids.is_empty() {
            return Err(SnarmError::data(format!(
                "category `{cat}` has no usable training images"
            )));
        }
        per_cat.insert(cat.clone(), grids);
    }

    let banks = if cfg.bank.per_category {
        let mut map = BTreeMap::new();
        for (cat, grids) in &per_cat {
            map.insert(cat.clone(), build_bank(cfg, grids)?);
        }
        Banks::PerCategory(map)
    } else {
        let all: Vec<PatchFeatureGrid> = per_cat.values().flatten().cloned().collect();
        Banks::Pooled(build_bank(cfg, &all)?)
    };

    // training set: every clean image plus synthesized anomalous variants
    let all_grids: Vec<&PatchFeatureGrid> = per_cat.values().flatten().collect();
    let mut samples = Vec::new();
    let mut sample_cats = Vec::new();
    let mut synth_idx = 0u64;
    for (cat, grids) in &per_cat {
        for grid in grids {
            samples.push(TrainSample::normal(grid.clone()));
            sample_cats.push(cat.clone());
            for _ in 0..cfg.train.synth_per_image {
                let donors: Vec<&PatchFeatureGrid> = all_grids
                    .iter()
                    .copied()
                    .filter(|g| !std::ptr::eq(*g, grid))
                    .collect();
                let clean = TrainSample::normal(grid.clone());
                samples.push(synthesize_anomaly(
                    &clean,
                    &donors,
                    seeding::substream(cfg.run.seed, "synthesize", synth_idx).gen(),
                )?);
                sample_cats.push(cat.clone());
                synth_idx += 1;
            }
        }
    }

    let mut inters = Vec::with_capacity(samples.len());
    for (sample, cat) in samples.iter().zip(&sample_cats) {
        let b = banks.for_category(cat)?;
        inters.extend(compute_inters(
            std::slice::from_ref(sample),
            b,
            cfg.bank.theta,
            cfg.bank.topk,
        )?);
    }

    let d_f = samples[0].features.grid().c;
    let mut model = SnarmModel::init(
        d_f,
        cfg.snmm.dim,
        cfg.snmm.state_dim,
        model_seed(cfg.run.seed),
    );
    let (report, adam) = cyclic_train_with(&mut model, &samples, inters, &train_options(cfg))?;
    Ok(Trained {
        model,
        banks,
        report,
        adam,
        scope: scope.to_vec(),
    })
}

/// One inference result tied back to its manifest entry.
pub struct Prediction {
    pub entry: ManifestEntry,
    pub map: AnomalyMap,
}

/// Run inference over test entries of the given categories; when `out_dir`
/// is set, writes 16-bit maps under `<out>/<cat>/<defect>/<stem>.pgm` and a
/// `scores.csv` sidecar.
pub fn infer_entries(
    cfg: &Config,
    model: &SnarmModel,
    banks: &Banks,
    backend: &dyn EncoderBackend,
    manifest: &DatasetManifest,
    categories: &[String],
    out_dir: Option<&Path>,
) -> Result<Vec<Prediction>> {
    let stage = cfg.stage_config();
    let reduction = cfg.score_reduction();
    let mut predictions = Vec::new();
    for cat in categories {
        let bank = banks.for_category(cat)?;
        if bank.dim != model.d_f {
            return Err(SnarmError::config(format!(
                "bank dim {} does not match model dim {}",
                bank.dim, model.d_f
            )));
        }
        for entry in manifest.test_entries(cat) {
            let features = compute_features(cfg, backend, &entry.path)?;
            let out = infer_features(model, bank, &features, &stage, reduction)?;
            predictions.push(Prediction {
                entry: entry.clone(),
                map: out.map,
            });
        }
    }
    if let Some(dir) = out_dir {
        write_predictions(dir, &predictions)?;
    }
    Ok(predictions)
}

/// Export maps as 16-bit graymaps (round(v * 65535)) plus scores.csv.
pub fn write_predictions(dir: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut rows = Vec::new();
    for p in predictions {
        let id = p.entry.image_id();
        let rel = PathBuf::from(format!("{id}.pgm"));
        let path = dir.join(&rel);
        std::fs::create_dir_all(path.parent().unwrap())?;
        let values: Vec<u16> = p
            .map
            .values
            .data
            .iter()
            .map(|&v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        pnm::write_pgm16(&path, p.map.values.w, p.map.values.h, &values)?;
        rows.push((id, p.map.image_score));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut csv = String::from("image_id,image_score\n");
    for (id, score) in rows {
        csv.push_str(&format!("{id},{score}\n"));
    }
    std::fs::write(dir.join("scores.csv"), csv)?;
    Ok(())
}

fn record_for(prediction: &Prediction) -> Result<(metrics::EvalRecord, bool)> {
    let entry = &prediction.entry;
    let (h, w) = (prediction.map.values.h, prediction.map.values.w);
    let mask = match (&entry.mask_path, entry.label) {
        (Some(path), true) => {
            let m = dataset::load_mask(path)?;
            if m.h != h || m.w != w {
                return Err(SnarmError::data(format!(
                    "mask {} is {}x{}, map is {}x{}",
                    path.display(),
                    m.h,
                    m.w,
                    h,
                    w
                )));
            }
            m
        }
        _ => BinaryMask::zeros(h, w),
    };
    let pixel_ok = !entry.label || !entry.mask_missing;
    Ok((
        metrics::EvalRecord {
            image_score: prediction.map.image_score,
            pixel_scores: prediction.map.values.clone(),
            gt_label: entry.label,
            gt_mask: mask,
        },
        pixel_ok,
    ))
}

/// Image AUROC over all predictions; pixel metrics over those with usable
/// masks (mask-missing anomalies are image-level only).
pub fn evaluate_predictions(
    cfg: &Config,
    predictions: &[Prediction],
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(SnarmError::data("no predictions to evaluate"));
    }
    let mut image_scores = Vec::new();
    let mut image_labels = Vec::new();
    let mut pixel_records = Vec::new();
    for p in predictions {
        let (record, pixel_ok) = record_for(p)?;
        image_scores.push(record.image_score);
        image_labels.push(record.gt_label);
        if pixel_ok {
            pixel_records.push(record);
        }
    }
    let i_auroc = metrics::auroc(&image_scores, &image_labels)?;
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for r in &pixel_records {
        pixel_scores.extend_from_slice(&r.pixel_scores.data);
        pixel_labels.extend(r.gt_mask.data.iter().copied());
    }
    let p_auroc = metrics::auroc(&pixel_scores, &pixel_labels)?;
    let p_ap = metrics::average_precision(&pixel_scores, &pixel_labels)?;
    let pairs: Vec<(&Grid2, &BinaryMask)> = pixel_records
        .iter()
        .map(|r| (&r.pixel_scores, &r.gt_mask))
        .collect();
    let pro = metrics::pro(&pairs, &cfg.pro_config())?;
    Ok(MetricReport {
        i_auroc,
        p_auroc,
        p_ap,
        pro,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub loss_at_400: Option<f64>,
    pub final_loss: f64,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        TrainSummary {
            steps: r.steps,
            initial_loss: r.initial_loss(),
            loss_at_400: r.loss_at(400),
            final_loss: r.final_loss(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub regime: String,
    pub overall: MetricReport,
    pub categories: BTreeMap<String, MetricReport>,
    pub train: BTreeMap<String, TrainSummary>,
    pub warnings: Vec<String>,
}

fn save_checkpoint(cfg: &Config, trained: &Trained, path: &Path) -> Result<()> {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        scope: trained.scope.clone(),
        model: trained.model.clone(),
        adam: trained.adam.clone(),
        root_seed: cfg.run.seed,
        trained_steps: trained.report.steps,
    }
    .save(path)
}

fn per_category_reports(
    cfg: &Config,
    predictions: &[Prediction],
) -> Result<BTreeMap<String, MetricReport>> {
    let mut out = BTreeMap::new();
    let mut cats: Vec<String> = predictions
        .iter()
        .map(|p| p.entry.category.clone())
        .collect();
    cats.sort();
    cats.dedup();
    for cat in cats {
        let subset: Vec<Prediction> = predictions
            .iter()
            .filter(|p| p.entry.category == cat)
            .map(|p| Prediction {
                entry: p.entry.clone(),
                map: AnomalyMap {
                    values: p.map.values.clone(),
                    image_score: p.map.image_score,
                },
            })
            .collect();
        out.insert(cat, evaluate_predictions(cfg, &subset)?);
    }
    Ok(out)
}

/// Execute a full regime: train, infer, export predictions, evaluate.
pub fn run_regime(
    cfg: &Config,
    regime: &Regime,
    data_root: &Path,
    out_dir: &Path,
) -> Result<RunReport> {
    let manifest = dataset::load_manifest(data_root)?;
    std::fs::create_dir_all(out_dir)?;
    let backend = create_backend(cfg)?;
    let pred_dir = out_dir.join("pred");
    let mut train_summaries = BTreeMap::new();
    let mut predictions: Vec<Prediction> = Vec::new();

    match regime {
        Regime::Multi | Regime::Fewshot => {
            let restrict = if *regime == Regime::Fewshot {
                Some(fewshot_subset(
                    &manifest,
                    cfg.run.fewshot_k,
                    cfg.run.seed,
                )?)
            } else {
                None
            };
            let trained = train_scope(
                cfg,
                &manifest,
                &manifest.categories,
                restrict.as_ref(),
                backend.as_ref(),
            )?;
            train_summaries.insert("all".to_string(), TrainSummary::from(&trained.report));
            predictions = infer_entries(
                cfg,
                &trained.model,
                &trained.banks,
                backend.as_ref(),
                &manifest,
                &manifest.categories,
                Some(&pred_dir),
            )?;
            trained.banks.save(out_dir)?;
            save_checkpoint(cfg, &trained, &out_dir.join("checkpoint.json"))?;
        }
        Regime::Single => {
            for cat in &manifest.categories {
                let scope = vec![cat.clone()];
                let trained = train_scope(cfg, &manifest, &scope, None, backend.as_ref())?;
                train_summaries.insert(cat.clone(), TrainSummary::from(&trained.report));
                let preds = infer_entries(
                    cfg,
                    &trained.model,
                    &trained.banks,
                    backend.as_ref(),
                    &manifest,
                    &scope,
                    None,
                )?;
                predictions.extend(preds);
                let model_dir = out_dir.join("models").join(cat);
                std::fs::create_dir_all(&model_dir)?;
                trained.banks.save(&model_dir)?;
                save_checkpoint(cfg, &trained, &model_dir.join("checkpoint.json"))?;
            }
            write_predictions(&pred_dir, &predictions)?;
        }
        Regime::Cross => {
            if manifest.categories.len() < 2 {
                return Err(SnarmError::config(
                    "cross regime needs at least 2 categories",
                ));
            }
            if cfg.bank.per_category {
                return Err(SnarmError::config(
                    "cross regime needs a pooled bank (bank.per_category = false)",
                ));
            }
            for held_out in manifest.categories.clone() {
                let scope: Vec<String> = manifest
                    .categories
                    .iter()
                    .filter(|c| **c != held_out)
                    .cloned()
                    .collect();
                let trained = train_scope(cfg, &manifest, &scope, None, backend.as_ref())?;
                train_summaries.insert(held_out.clone(), TrainSummary::from(&trained.report));
                let preds = infer_entries(
                    cfg,
                    &trained.model,
                    &trained.banks,
                    backend.as_ref(),
                    &manifest,
                    std::slice::from_ref(&held_out),
                    None,
                )?;
                predictions.extend(preds);
                let model_dir = out_dir.join("models").join(&held_out);
                std::fs::create_dir_all(&model_dir)?;
                trained.banks.save(&model_dir)?;
                save_checkpoint(cfg, &trained, &model_dir.join("checkpoint.json"))?;
            }
            write_predictions(&pred_dir, &predictions)?;
        }
    }

    let overall = evaluate_predictions(cfg, &predictions)?;
    let categories = per_category_reports(cfg, &predictions)?;
    let report = RunReport {
        regime: format!("{regime:?}").to_lowercase(),
        overall,
        categories,
        train: train_summaries,
        warnings: manifest.warnings.clone(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| SnarmError::config(format!("serialize report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

/// Inference from a saved checkpoint and bank file over a dataset's test
/// split. Verifies bank/model compatibility before any compute.
pub fn infer_from_checkpoint(
    ckpt_path: &Path,
    bank_path: &Path,
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<Prediction>> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let bank = bank::read_bank(bank_path)?;
    if bank.dim != ckpt.model.d_f {
        return Err(SnarmError::config(format!(
            "bank dim {} incompatible with checkpoint dim {}",
            bank.dim, ckpt.model.d_f
        )));
    }
    if bank.build_seed != bank_seed(ckpt.root_seed) {
        return Err(SnarmError::config(
            "bank was built under a different seed/config than the checkpoint",
        ));
    }
    let manifest = dataset::load_manifest(data_root)?;
    let backend = create_backend(cfg)?;
    infer_entries(
        cfg,
        &ckpt.model,
        &Banks::Pooled(bank),
        backend.as_ref(),
        &manifest,
        &manifest.categories,
        Some(out_dir),
    )
}

/// Evaluate an exported prediction directory against dataset ground truth.
pub fn evaluate_exported(
    cfg: &Config,
    pred_dir: &Path,
    gt_root: &Path,
) -> Result<RunReport> {
    let manifest = dataset::load_manifest(gt_root)?;
    let csv = std::fs::read_to_string(pred_dir.join("scores.csv"))
        .map_err(|e| SnarmError::data(format!("scores.csv: {e}")))?;
    let mut scores = BTreeMap::new();
    for line in csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line.rsplit_once(',').ok_or_else(|| {
            SnarmError::data(format!("malformed scores.csv row: `{line}`"))
        })?;
        let score: f64 = score
            .parse()
            .map_err(|_| SnarmError::data(format!("bad score in row `{line}`")))?;
        scores.insert(id.to_string(), score);
    }
    let mut predictions = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let id = entry.image_id();
        let map_path = pred_dir.join(format!("{id}.pgm"));
        if !map_path.is_file() {
            return Err(SnarmError::data(format!(
                "missing prediction map {}",
                map_path.display()
            )));
        }
        let values = match pnm::read_pnm(&map_path)? {
            pnm::Pnm::Gray16 { w, h, data } => Grid2 {
                h,
                w,
                data: data.iter().map(|&v| v as f64 / 65535.0).collect(),
            },
            pnm::Pnm::Gray8 { w, h, data } => Grid2 {
                h,
                w,
                data: data.iter().map(|&v| v as f64 / 255.0).collect(),
            },
            _ => {
                return Err(SnarmError::data(format!(
                    "{} is not a grayscale map",
                    map_path.display()
                )))
            }
        };
        let image_score = *scores.get(&id).ok_or_else(|| {
            SnarmError::data(format!("scores.csv has no row for `{id}`"))
        })?;
        predictions.push(Prediction {
            entry: entry.clone(),
            map: AnomalyMap {
                values,
                image_score,
            },
        });
    }
    let overall = evaluate_predictions(cfg, &predictions)?;
    let categories = per_category_reports(cfg, &predictions)?;
    Ok(RunReport {
        regime: "evaluate".to_string(),
        overall,
        categories,
        train: BTreeMap::new(),
        warnings: manifest.warnings,
    })
}

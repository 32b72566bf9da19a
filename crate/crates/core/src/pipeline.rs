//! Offline orchestration: fleet change-point detection, label and window
//! construction, training, evaluation and the minimum-lifespan sweep.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmapss::{read_cmapss_file, read_rul_targets, select_sensors, DatasetId, EngineSeries, RulTarget, SensorSelection};
use crate::cva::Standardizer;
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, EvalReport};
use crate::labeling::{
    final_window, piecewise_rul_labels, pooled_standardizer, sliding_windows, standardize_reference, RulLabelSpec,
    WindowedDataset, DEFAULT_RUL_CAP,
};
use crate::lstm::{train, CheckpointMeta, LstmRegressor, OptimizerKind, TrainConfig, TrainHistory};
use crate::monitor::{
    fit_device_monitor, ChangePointRecord, DetectionMethod, LimitSamples, MonitorConfig, MonitorModel,
};

pub const SWEEP_CANDIDATES: [usize; 6] = [100, 125, 150, 175, 200, 225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetId,
    /// Directory holding `train_FDxxx.txt`, `test_FDxxx.txt`, `RUL_FDxxx.txt`.
    pub data_dir: Option<PathBuf>,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub rul_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub p: usize,
    pub f: usize,
    pub r: usize,
    pub alpha: f64,
    pub normal_window: usize,
    pub validation_window: usize,
    pub min_lifespan: usize,
    pub validation_breach_threshold: f64,
    pub limit_samples: LimitSamples,
    pub fallback_cap: usize,
    /// `false` labels every engine with the fallback cap (constant-cap ablation).
    pub use_change_points: bool,
    pub seq_len: usize,
    pub hidden_sizes: Vec<usize>,
    pub dropout_ratios: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Keep only the first N train and first N test engines.
    pub subset: Option<usize>,
    pub threads: Option<usize>,
    pub sweep_candidates: Vec<usize>,
    /// A sweep row is NA when more than this share of admitted engines has
    /// no locatable change point.
    pub sweep_na_fraction: f64,
}

impl PipelineConfig {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        let mon = MonitorConfig::for_dataset(dataset);
        let (hidden, dropout) = match dataset {
            DatasetId::FD001 => (vec![256, 128, 32], vec![0.2, 0.1]),
            DatasetId::FD002 => (vec![256, 128, 32], vec![0.1, 0.1]),
            DatasetId::FD003 => (vec![256, 100, 32], vec![0.2, 0.1]),
            DatasetId::FD004 => (vec![256, 100, 32], vec![0.1, 0.1]),
        };
        let lstm = TrainConfig::default();
        Self {
            dataset,
            data_dir: None,
            train_file: None,
            test_file: None,
            rul_file: None,
            out_dir: PathBuf::from("out"),
            p: mon.p,
            f: mon.f,
            r: mon.r,
            alpha: mon.alpha,
            normal_window: mon.normal_window,
            validation_window: mon.validation_window,
            min_lifespan: mon.min_lifespan,
            validation_breach_threshold: mon.validation_breach_threshold,
            limit_samples: mon.limit_samples,
            fallback_cap: DEFAULT_RUL_CAP,
            use_change_points: true,
            seq_len: lstm.seq_len,
            hidden_sizes: hidden,
            dropout_ratios: dropout,
            learning_rate: lstm.learning_rate,
            epochs: lstm.epochs,
            batch_size: lstm.batch_size,
            optimizer: lstm.optimizer,
            clip_norm: lstm.clip_norm,
            seed: lstm.seed,
            subset: None,
            threads: None,
            sweep_candidates: SWEEP_CANDIDATES.to_vec(),
            sweep_na_fraction: 0.2,
        }
    }

    /// Defaults for the dataset named in `text` (or `dataset`, which wins),
    /// overlaid with every key present in `text`.
    pub fn from_json(text: Option<&str>, dataset: Option<DatasetId>) -> Result<Self> {
        let user: serde_json::Map<String, serde_json::Value> = match text {
            Some(t) => match serde_json::from_str(t).map_err(|e| Error::Config(format!("config JSON: {e}")))? {
                serde_json::Value::Object(m) => m,
                _ => return Err(Error::Config("config file must hold a JSON object".into())),
            },
            None => Default::default(),
        };
        let id = match (dataset, user.get("dataset")) {
            (Some(d), _) => d,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("dataset: {e}")))?,
            (None, None) => DatasetId::FD001,
        };
        let mut base = match serde_json::to_value(Self::for_dataset(id))? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, v) in user {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            base.insert(k, v);
        }
        base.insert("dataset".into(), serde_json::to_value(id)?);
        let cfg: Self =
            serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig {
            p: self.p,
            f: self.f,
            r: self.r,
            alpha: self.alpha,
            normal_window: self.normal_window,
            validation_window: self.validation_window,
            min_lifespan: self.min_lifespan,
            validation_breach_threshold: self.validation_breach_threshold,
            limit_samples: self.limit_samples,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seq_len: self.seq_len,
            hidden_sizes: self.hidden_sizes.clone(),
            dropout_ratios: self.dropout_ratios.clone(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            clip_norm: self.clip_norm,
            output_scale: self.fallback_cap as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.monitor_config().validate()?;
        self.train_config().validate()?;
        if self.fallback_cap == 0 {
            return Err(Error::Config("fallback_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sweep_na_fraction) {
            return Err(Error::Config("sweep_na_fraction must lie in [0, 1]".into()));
        }
        if self.subset == Some(0) || self.threads == Some(0) {
            return Err(Error::Config("subset and threads must be positive".into()));
        }
        Ok(())
    }

    pub fn selection(&self) -> SensorSelection {
        select_sensors(self.dataset)
    }

    fn data_file(&self, explicit: &Option<PathBuf>, prefix: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        match &self.data_dir {
            Some(d) => Ok(d.join(format!("{prefix}_{}.txt", self.dataset))),
            None => Err(Error::Config(format!(
                "no {prefix} file: set data_dir or {prefix}_file"
            ))),
        }
    }

    pub fn train_path(&self) -> Result<PathBuf> {
        self.data_file(&self.train_file, "train")
    }

    pub fn test_path(&self) -> Result<PathBuf> {
        self.data_file(&self.test_file, "test")
    }

    pub fn rul_path(&self) -> Result<PathBuf> {
        self.data_file(&self.rul_file, "RUL")
    }
}

fn take_subset<T>(mut v: Vec<T>, subset: Option<usize>) -> Vec<T> {
    if let Some(n) = subset {
        v.truncate(n);
    }
    v
}

pub fn load_train(cfg: &PipelineConfig) -> Result<Vec<EngineSeries>> {
    Ok(take_subset(read_cmapss_file(&cfg.train_path()?, cfg.dataset)?, cfg.subset))
}

/// Test engines and their targets, subset consistently.
pub fn load_test(cfg: &PipelineConfig) -> Result<(Vec<EngineSeries>, Vec<RulTarget>)> {
    let test = read_cmapss_file(&cfg.test_path()?, cfg.dataset)?;
    let targets = read_rul_targets(&cfg.rul_path()?, cfg.dataset, Some(test.len()))?;
    Ok((take_subset(test, cfg.subset), take_subset(targets, cfg.subset)))
}

/// Detection output for one engine.
#[derive(Debug, Clone)]
pub struct EngineDetection {
    pub record: ChangePointRecord,
    pub model: Option<MonitorModel>,
    /// The permanent breach began before monitoring started.
    pub clamped: bool,
    pub validation_breach: Option<f64>,
}

impl EngineDetection {
    /// Admitted for detection but without a usable change point.
    pub fn undetectable(&self) -> bool {
        self.record.method == DetectionMethod::NoneDetected || self.clamped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub dataset: DatasetId,
    pub min_lifespan: usize,
    pub n_engines: usize,
    pub admitted: usize,
    pub detected: usize,
    pub none_detected: usize,
    pub fallback: usize,
    pub clamped: usize,
    pub validation_flagged: usize,
}

/// Per-engine detection, in unit order.
pub fn detect_fleet(engines: &[EngineSeries], cfg: &PipelineConfig) -> Result<Vec<EngineDetection>> {
    let mon = cfg.monitor_config();
    mon.validate()?;
    let selection = cfg.selection();
    let out: Vec<Result<EngineDetection>> = engines
        .par_iter()
        .map(|e| match fit_device_monitor(e, &selection, &mon) {
            Ok(fit) => Ok(EngineDetection {
                record: ChangePointRecord::from_fit(cfg.dataset, &fit),
                clamped: fit.result.flagged,
                validation_breach: Some(fit.validation.breach_fraction),
                model: Some(fit.model),
            }),
            Err(Error::FallbackRequired { .. }) => Ok(EngineDetection {
                record: ChangePointRecord::fallback(cfg.dataset, e.unit_id, e.k_max()),
                model: None,
                clamped: false,
                validation_breach: None,
            }),
            Err(err) => Err(err),
        })
        .collect();
    out.into_iter().collect()
}

pub fn summarize(detections: &[EngineDetection], cfg: &PipelineConfig) -> DetectionSummary {
    let count = |m: DetectionMethod| detections.iter().filter(|d| d.record.method == m).count();
    DetectionSummary {
        dataset: cfg.dataset,
        min_lifespan: cfg.min_lifespan,
        n_engines: detections.len(),
        admitted: detections.iter().filter(|d| d.model.is_some()).count(),
        detected: count(DetectionMethod::Detected),
        none_detected: count(DetectionMethod::NoneDetected),
        fallback: count(DetectionMethod::FallbackCap),
        clamped: detections.iter().filter(|d| d.clamped).count(),
        validation_flagged: detections
            .iter()
            .filter(|d| d.validation_breach.is_some_and(|b| b > cfg.validation_breach_threshold))
            .count(),
    }
}

/// Labels, pooled standardizer and windows for the training fleet.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub labels: Vec<RulLabelSpec>,
    pub standardizer: Standardizer,
    pub windows: WindowedDataset,
}

fn change_point_of(rec: &ChangePointRecord, use_change_points: bool) -> Option<usize> {
    if use_change_points && rec.method == DetectionMethod::Detected {
        rec.k_cp
    } else {
        None
    }
}

pub fn build_training_set(
    engines: &[EngineSeries],
    records: &[ChangePointRecord],
    cfg: &PipelineConfig,
) -> Result<TrainingSet> {
    let selection = cfg.selection();
    let mut labels = Vec::with_capacity(engines.len());
    let mut raws = Vec::with_capacity(engines.len());
    for e in engines {
        let rec = records
            .iter()
            .find(|r| r.unit == e.unit_id)
            .ok_or_else(|| Error::Integrity(format!("no change-point record for train unit {}", e.unit_id)))?;
        if rec.k_max != e.k_max() {
            return Err(Error::Integrity(format!(
                "unit {}: report lifespan {} but data has {} cycles",
                e.unit_id,
                rec.k_max,
                e.k_max()
            )));
        }
        let cp = change_point_of(rec, cfg.use_change_points);
        labels.push(piecewise_rul_labels(e.unit_id, e.k_max(), cp, cfg.fallback_cap)?);
        raws.push((e.sensor_matrix(&selection), standardize_reference(e.k_max(), cp, cfg.fallback_cap)));
    }
    let refs: Vec<_> = raws.iter().map(|(x, k)| (x, *k)).collect();
    let standardizer = pooled_standardizer(&refs)?;
    let parts: Vec<Result<WindowedDataset>> = raws
        .par_iter()
        .zip(labels.par_iter())
        .map(|((x, _), l)| sliding_windows(&standardizer.apply(x)?, l, cfg.seq_len, 1))
        .collect();
    let mut windows = WindowedDataset::empty(cfg.seq_len, selection.m());
    for p in parts {
        windows.extend(&p?)?;
    }
    Ok(TrainingSet {
        labels,
        standardizer,
        windows,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: LstmRegressor,
    pub history: TrainHistory,
    pub meta: CheckpointMeta,
}

pub fn train_model(set: &TrainingSet, cfg: &PipelineConfig) -> Result<TrainedModel> {
    let (model, history) = train(&set.windows, &cfg.train_config())?;
    Ok(TrainedModel {
        model,
        history,
        meta: CheckpointMeta {
            dataset: cfg.dataset.to_string(),
            seq_len: cfg.seq_len,
            channels: cfg.selection().channel_names(),
            label_cap: cfg.fallback_cap as f64,
            standardizer: Some(set.standardizer.clone()),
        },
    })
}

/// Final standardized window of every test engine, keyed by unit.
pub fn test_windows(
    test: &[EngineSeries],
    meta: &CheckpointMeta,
    selection: &SensorSelection,
) -> Result<Vec<(u32, Vec<f64>)>> {
    if meta.channels != selection.channel_names() {
        return Err(Error::Integrity(format!(
            "checkpoint channels {:?} do not match dataset channels {:?}",
            meta.channels,
            selection.channel_names()
        )));
    }
    let st = meta
        .standardizer
        .as_ref()
        .ok_or_else(|| Error::Integrity("checkpoint carries no standardizer".into()))?;
    test.iter()
        .map(|e| Ok((e.unit_id, final_window(&st.apply(&e.sensor_matrix(selection))?, meta.seq_len)?)))
        .collect()
}

fn truth_pairs(targets: &[RulTarget]) -> Vec<(u32, f64)> {
    targets.iter().map(|t| (t.unit_id, t.true_rul_at_cutoff as f64)).collect()
}

/// How predictions are produced for the test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    Model,
    /// Predict the true RUL; a harness check of the scoring path.
    Oracle,
    /// Predict the cap for every engine.
    Constant,
}

pub fn evaluate_test_set(
    trained: Option<(&LstmRegressor, &CheckpointMeta)>,
    test: &[EngineSeries],
    targets: &[RulTarget],
    cfg: &PipelineConfig,
    mode: PredictionMode,
) -> Result<EvalReport> {
    let cap = cfg.fallback_cap as f64;
    let truths = truth_pairs(targets);
    let preds: Vec<(u32, f64)> = match mode {
        PredictionMode::Oracle => truths.clone(),
        PredictionMode::Constant => test.iter().map(|e| (e.unit_id, cap)).collect(),
        PredictionMode::Model => {
            let (model, meta) =
                trained.ok_or_else(|| Error::Config("model predictions need a checkpoint".into()))?;
            if model.input_dim() != cfg.selection().m() || meta.seq_len != cfg.seq_len {
                return Err(Error::Integrity(format!(
                    "checkpoint expects {} channels and L = {}, config has {} and {}",
                    model.input_dim(),
                    meta.seq_len,
                    cfg.selection().m(),
                    cfg.seq_len
                )));
            }
            let windows = test_windows(test, meta, &cfg.selection())?;
            let refs: Vec<&[f64]> = windows.iter().map(|(_, w)| w.as_slice()).collect();
            let y = model.predict_batch(&refs, meta.label_cap)?;
            windows.iter().map(|(u, _)| *u).zip(y).collect()
        }
    };
    evaluate_predictions(cfg.dataset.as_str(), &preds, &truths, cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub min_lifespan: usize,
    pub admitted: usize,
    pub undetectable: usize,
    pub na: bool,
    pub na_reason: Option<String>,
    pub rmse: Option<f64>,
    pub sf: Option<f64>,
}

/// Full detect → train → evaluate run per candidate minimum lifespan.
pub fn sweep_min_lifespan(
    train_engines: &[EngineSeries],
    test: &[EngineSeries],
    targets: &[RulTarget],
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &candidate in &cfg.sweep_candidates {
        let mut c = cfg.clone();
        c.min_lifespan = candidate;
        let structural = c.normal_window + c.validation_window + 1;
        if candidate < structural {
            rows.push(SweepRow {
                min_lifespan: candidate,
                admitted: 0,
                undetectable: 0,
                na: true,
                na_reason: Some(format!("shorter than the {structural} cycles needed to fit and validate a monitor")),
                rmse: None,
                sf: None,
            });
            continue;
        }
        let det = detect_fleet(train_engines, &c)?;
        let admitted = det.iter().filter(|d| d.model.is_some()).count();
        let undetectable = det.iter().filter(|d| d.model.is_some() && d.undetectable()).count();
        let share = if admitted == 0 { 1.0 } else { undetectable as f64 / admitted as f64 };
        if admitted == 0 || share > c.sweep_na_fraction {
            log::info!("min lifespan {candidate}: {undetectable}/{admitted} admitted engines without a locatable change point");
            rows.push(SweepRow {
                min_lifespan: candidate,
                admitted,
                undetectable,
                na: true,
                na_reason: Some(format!(
                    "{undetectable} of {admitted} admitted engines have no locatable change point"
                )),
                rmse: None,
                sf: None,
            });
            continue;
        }
        let records: Vec<ChangePointRecord> = det.into_iter().map(|d| d.record).collect();
        let set = build_training_set(train_engines, &records, &c)?;
        let trained = train_model(&set, &c)?;
        let report = evaluate_test_set(Some((&trained.model, &trained.meta)), test, targets, &c, PredictionMode::Model)?;
        rows.push(SweepRow {
            min_lifespan: candidate,
            admitted,
            undetectable,
            na: false,
            na_reason: None,
            rmse: Some(report.rmse),
            sf: Some(report.sf),
        });
    }
    Ok(rows)
}

pub fn sweep_to_markdown(dataset: DatasetId, rows: &[SweepRow]) -> String {
    let mut out = format!("| {dataset} min lifespan | RMSE | SF |\n|---|---|---|\n");
    for r in rows {
        match (r.rmse, r.sf) {
            (Some(rmse), Some(sf)) => out.push_str(&format!("| {} | {rmse:.2} | {sf:.2} |\n", r.min_lifespan)),
            _ => out.push_str(&format!("| {} | NA | NA |\n", r.min_lifespan)),
        }
    }
    out
}

/// Write `text` to `dir/name`, creating `dir`.
pub fn write_output(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

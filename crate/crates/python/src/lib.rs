//! Python bindings: monitors, labels, metrics, the LSTM regressor and the
//! online monitor. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use rulcp::cmapss::{read_cmapss_file, select_sensors, DatasetId, EngineSeries, N_SENSORS};
use rulcp::error::ExitCategory;
use rulcp::labeling::{piecewise_rul_labels, WindowedDataset};
use rulcp::lstm::{load_checkpoint, save_checkpoint, train, CheckpointMeta, LstmRegressor, TrainConfig};
use rulcp::monitor::{fit_device_monitor, ChangePointRecord, DeviceMonitorFit};
use rulcp::pipeline::{
    build_training_set, detect_fleet, evaluate_test_set, load_test, load_train, train_model, PipelineConfig,
    PredictionMode,
};
use rulcp::stream::{CycleRecord, OnlineMonitor, RulEstimator, StreamSettings};
use rulcp::synthetic::{cmapss_like_corpus, SyntheticConfig};

create_exception!(rulcp_py, RulcpError, PyException);
create_exception!(rulcp_py, ConfigError, RulcpError);
create_exception!(rulcp_py, IntegrityError, RulcpError);
create_exception!(rulcp_py, NumericError, RulcpError);

fn to_py(e: rulcp::Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_category() {
        ExitCategory::Config => ConfigError::new_err(msg),
        ExitCategory::Integrity => IntegrityError::new_err(msg),
        ExitCategory::Numeric => NumericError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for rulcp::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| to_py(e.into()))
}

fn dataset(name: &str) -> PyResult<DatasetId> {
    name.parse::<DatasetId>().map_err(|_| ConfigError::new_err(format!("unknown dataset {name:?}")))
}

/// Build an engine from `N × 21` raw sensor rows.
fn engine_from_rows(ds: DatasetId, unit_id: u32, rows: &[Vec<f64>]) -> PyResult<EngineSeries> {
    let mut sensors = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let arr: [f64; N_SENSORS] = r
            .as_slice()
            .try_into()
            .map_err(|_| IntegrityError::new_err(format!("row {}: expected {N_SENSORS} sensors, got {}", i + 1, r.len())))?;
        sensors.push(arr);
    }
    EngineSeries::new(ds, unit_id, vec![[0.0; 3]; sensors.len()], sensors).py_err()
}

/// Flatten `L × m` rows into a time-major window.
fn flatten(window: &[Vec<f64>]) -> Vec<f64> {
    window.iter().flatten().copied().collect()
}

/// Retained sensor names for a dataset, e.g. `["s2", "s3", ...]`.
#[pyfunction]
fn sensor_names(dataset_id: &str) -> PyResult<Vec<String>> {
    Ok(select_sensors(dataset(dataset_id)?).channel_names())
}

#[pyclass(name = "Engine", frozen)]
struct PyEngine {
    inner: EngineSeries,
}

#[pymethods]
impl PyEngine {
    #[getter]
    fn unit_id(&self) -> u32 {
        self.inner.unit_id
    }

    #[getter]
    fn k_max(&self) -> usize {
        self.inner.k_max()
    }

    /// Raw rows, `k_max × 21`.
    #[getter]
    fn sensors(&self) -> Vec<Vec<f64>> {
        self.inner.sensors.iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Engine(dataset={}, unit_id={}, k_max={})", self.inner.dataset, self.inner.unit_id, self.inner.k_max())
    }
}

/// Write a seeded synthetic fleet as `train_/test_/RUL_<dataset>.txt` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, dataset_id = "FD001", n_train = 40, n_test = 40, seed = 1))]
fn write_synthetic(out_dir: PathBuf, dataset_id: &str, n_train: usize, n_test: usize, seed: u64) -> PyResult<()> {
    cmapss_like_corpus(SyntheticConfig::new(dataset(dataset_id)?, seed), n_train, n_test)
        .write_to_dir(&out_dir)
        .py_err()
}

/// Parse a whitespace-delimited turbofan file.
#[pyfunction]
fn read_engines(path: PathBuf, dataset_id: &str) -> PyResult<Vec<PyEngine>> {
    let engines = read_cmapss_file(&path, dataset(dataset_id)?).py_err()?;
    Ok(engines.into_iter().map(|inner| PyEngine { inner }).collect())
}

#[pyclass(name = "MonitorFit", frozen)]
struct PyMonitorFit {
    fit: DeviceMonitorFit,
    record: ChangePointRecord,
}

#[pymethods]
impl PyMonitorFit {
    #[getter]
    fn k_cp(&self) -> Option<usize> {
        self.fit.result.k_cp
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.fit.result.method.as_str()
    }

    #[getter]
    fn flagged(&self) -> bool {
        self.fit.result.flagged
    }

    #[getter]
    fn lambda_(&self) -> usize {
        self.fit.model.lambda
    }

    #[getter]
    fn cl_t2(&self) -> f64 {
        self.fit.model.cl_t2
    }

    #[getter]
    fn cl_q(&self) -> f64 {
        self.fit.model.cl_q
    }

    /// `(start_cycle, t2, q)` for every monitored cycle.
    fn trace(&self) -> (usize, Vec<f64>, Vec<f64>) {
        let t = &self.fit.trace;
        (t.start_cycle, t.t2.clone(), t.q.clone())
    }

    /// The change-point report row.
    fn record_json(&self) -> PyResult<String> {
        json(&self.record)
    }

    /// The monitor artifact, loadable by `OnlineMonitor`.
    fn model_json(&self) -> PyResult<String> {
        self.fit.model.to_json().py_err()
    }
}

/// Fit a per-device monitor on one run-to-failure series and locate its change point.
#[pyfunction]
#[pyo3(signature = (sensors, dataset_id = "FD001", unit_id = 1, config_json = None))]
fn fit_monitor(
    sensors: Vec<Vec<f64>>,
    dataset_id: &str,
    unit_id: u32,
    config_json: Option<&str>,
) -> PyResult<PyMonitorFit> {
    let ds = dataset(dataset_id)?;
    let cfg = PipelineConfig::from_json(config_json, Some(ds)).py_err()?;
    let engine = engine_from_rows(ds, unit_id, &sensors)?;
    let fit = fit_device_monitor(&engine, &cfg.selection(), &cfg.monitor_config()).py_err()?;
    let record = ChangePointRecord::from_fit(ds, &fit);
    Ok(PyMonitorFit { fit, record })
}

/// Control limit `CL` with `P(stat < CL) = alpha` under a Gaussian KDE.
#[pyfunction]
#[pyo3(signature = (samples, alpha = 0.99))]
fn kde_control_limit(samples: Vec<f64>, alpha: f64) -> PyResult<f64> {
    Ok(rulcp::monitor::kde_control_limit(&samples, alpha).py_err()?.value)
}

/// Piecewise RUL labels for cycles `1..=k_max`.
#[pyfunction]
#[pyo3(signature = (k_max, k_cp = None, cap = 130))]
fn piecewise_labels(k_max: usize, k_cp: Option<usize>, cap: usize) -> PyResult<Vec<f64>> {
    Ok(piecewise_rul_labels(1, k_max, k_cp, cap).py_err()?.labels)
}

#[pyfunction]
fn rmse(predicted: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    rulcp::eval::rmse(&predicted, &truth).py_err()
}

#[pyfunction]
fn score_function(predicted: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    rulcp::eval::score_function(&predicted, &truth).py_err()
}

#[pyclass(name = "Lstm")]
struct PyLstm {
    model: LstmRegressor,
    meta: Option<CheckpointMeta>,
}

#[pymethods]
impl PyLstm {
    #[new]
    #[pyo3(signature = (input_dim, hidden_sizes, dropout_ratios, seed = 42))]
    fn new(input_dim: usize, hidden_sizes: Vec<usize>, dropout_ratios: Vec<f64>, seed: u64) -> PyResult<Self> {
        let model = LstmRegressor::new(input_dim, &hidden_sizes, &dropout_ratios, seed).py_err()?;
        Ok(Self { model, meta: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, meta) = load_checkpoint(&path).py_err()?;
        Ok(Self { model, meta: Some(meta) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = self.meta.clone().unwrap_or_else(|| CheckpointMeta {
            dataset: String::new(),
            seq_len: 0,
            channels: Vec::new(),
            label_cap: self.model.output_scale,
            standardizer: None,
        });
        save_checkpoint(&path, &self.model, &meta).py_err()
    }

    /// Train on windows (`n × L × m` nested lists) and targets; returns the history JSON.
    #[staticmethod]
    #[pyo3(signature = (windows, targets, config_json = None))]
    fn fit(py: Python<'_>, windows: Vec<Vec<Vec<f64>>>, targets: Vec<f64>, config_json: Option<&str>) -> PyResult<(Self, String)> {
        let config: TrainConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| to_py(e.into()))?,
            None => TrainConfig::default(),
        };
        let first = windows.first().ok_or_else(|| IntegrityError::new_err("no training windows"))?;
        let (l, m) = (first.len(), first.first().map_or(0, Vec::len));
        if targets.len() != windows.len() {
            return Err(IntegrityError::new_err("one target per window is required"));
        }
        let mut data = WindowedDataset::empty(l, m);
        for (i, (w, &y)) in windows.iter().zip(&targets).enumerate() {
            if w.len() != l || w.iter().any(|r| r.len() != m) {
                return Err(IntegrityError::new_err(format!("window {i} is not {l} × {m}")));
            }
            data.push(&flatten(w), y, 0, i);
        }
        let (model, history) = py.detach(|| train(&data, &config)).py_err()?;
        Ok((Self { model, meta: None }, history.to_json().py_err()?))
    }

    #[getter]
    fn hidden_sizes(&self) -> Vec<usize> {
        self.model.hidden_sizes()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// RUL for one `L × m` window, clamped to `[0, cap]`.
    #[pyo3(signature = (window, cap = 130.0))]
    fn predict(&self, window: Vec<Vec<f64>>, cap: f64) -> PyResult<f64> {
        self.model.predict(&flatten(&window), cap).py_err()
    }

    #[pyo3(signature = (windows, cap = 130.0))]
    fn predict_batch(&self, windows: Vec<Vec<Vec<f64>>>, cap: f64) -> PyResult<Vec<f64>> {
        let flat: Vec<Vec<f64>> = windows.iter().map(|w| flatten(w)).collect();
        let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
        self.model.predict_batch(&refs, cap).py_err()
    }
}

/// Offline pipeline driven by a JSON config.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    cfg: PipelineConfig,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (dataset_id = None, config_json = None))]
    fn new(dataset_id: Option<&str>, config_json: Option<&str>) -> PyResult<Self> {
        let ds = dataset_id.map(dataset).transpose()?;
        let cfg = PipelineConfig::from_json(config_json, ds).py_err()?;
        cfg.validate().py_err()?;
        Ok(Self { cfg })
    }

    fn config_json(&self) -> PyResult<String> {
        self.cfg.to_json().py_err()
    }

    /// Change-point records for the train set, as a JSON array.
    fn detect(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = &self.cfg;
        let records = py
            .detach(|| -> rulcp::Result<Vec<ChangePointRecord>> {
                let train = load_train(cfg)?;
                Ok(detect_fleet(&train, cfg)?.into_iter().map(|d| d.record).collect())
            })
            .py_err()?;
        json(&records)
    }

    /// Detect, label, train and evaluate; returns `(model, eval_report_json)`.
    fn run(&self, py: Python<'_>) -> PyResult<(PyLstm, String)> {
        let cfg = &self.cfg;
        let (trained, report) = py
            .detach(|| -> rulcp::Result<_> {
                let train = load_train(cfg)?;
                let (test, targets) = load_test(cfg)?;
                let records: Vec<_> = detect_fleet(&train, cfg)?.into_iter().map(|d| d.record).collect();
                let set = build_training_set(&train, &records, cfg)?;
                let trained = train_model(&set, cfg)?;
                let report = evaluate_test_set(
                    Some((&trained.model, &trained.meta)),
                    &test,
                    &targets,
                    cfg,
                    PredictionMode::Model,
                )?;
                Ok((trained, report))
            })
            .py_err()?;
        Ok((
            PyLstm {
                model: trained.model,
                meta: Some(trained.meta),
            },
            report.to_json().py_err()?,
        ))
    }

    /// Score the constant-cap predictor on the test set.
    fn evaluate_constant(&self) -> PyResult<String> {
        let (test, targets) = load_test(&self.cfg).py_err()?;
        evaluate_test_set(None, &test, &targets, &self.cfg, PredictionMode::Constant)
            .py_err()?
            .to_json()
            .py_err()
    }
}

#[pyclass(name = "OnlineMonitor")]
struct PyOnlineMonitor {
    inner: OnlineMonitor,
}

#[pymethods]
impl PyOnlineMonitor {
    /// `models_json` holds monitor artifacts from `MonitorFit.model_json()`.
    #[new]
    #[pyo3(signature = (dataset_id = "FD001", models_json = Vec::new(), checkpoint = None, self_calibrate = true, min_lambda = 1, config_json = None))]
    fn new(
        dataset_id: &str,
        models_json: Vec<String>,
        checkpoint: Option<PathBuf>,
        self_calibrate: bool,
        min_lambda: usize,
        config_json: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = PipelineConfig::from_json(config_json, Some(dataset(dataset_id)?)).py_err()?;
        let models = models_json
            .iter()
            .map(|t| rulcp::monitor::MonitorModel::from_json(t))
            .collect::<rulcp::Result<Vec<_>>>()
            .py_err()?;
        let rul = match checkpoint {
            Some(p) => {
                let (model, meta) = load_checkpoint(&p).py_err()?;
                Some(RulEstimator { model, meta })
            }
            None => None,
        };
        let settings = StreamSettings {
            monitor: cfg.monitor_config(),
            self_calibrate,
            min_lambda,
        };
        let inner = OnlineMonitor::new(cfg.selection(), settings, models, rul).py_err()?;
        Ok(Self { inner })
    }

    /// Feed one cycle; returns the emitted events as JSON strings.
    fn process(&mut self, unit: u32, cycle: usize, sensors: Vec<f64>) -> PyResult<Vec<String>> {
        let events = self.inner.process(&CycleRecord { unit, cycle, sensors });
        events.iter().map(json).collect()
    }

    /// Feed one line-delimited JSON record.
    fn process_line(&mut self, line: &str) -> PyResult<Vec<String>> {
        self.inner.process_line(line).iter().map(json).collect()
    }

    /// `"normal" | "transition" | "degrading"`, or `None` for an unseen unit.
    fn status(&self, unit: u32) -> PyResult<Option<String>> {
        match self.inner.device(unit) {
            Some(d) => Ok(Some(json(&d.status)?.trim_matches('"').to_string())),
            None => Ok(None),
        }
    }
}

#[pymodule]
fn rulcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("RulcpError", py.get_type::<RulcpError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyEngine>()?;
    m.add_class::<PyMonitorFit>()?;
    m.add_class::<PyLstm>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyOnlineMonitor>()?;
    m.add_function(wrap_pyfunction!(sensor_names, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(read_engines, m)?)?;
    m.add_function(wrap_pyfunction!(fit_monitor, m)?)?;
    m.add_function(wrap_pyfunction!(kde_control_limit, m)?)?;
    m.add_function(wrap_pyfunction!(piecewise_labels, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(score_function, m)?)?;
    Ok(())
}

//! T² / Q health monitoring and offline change-point detection.
//!
//! Each device gets its own CVA model fitted on its first `normal_window`
//! cycles. Control limits come from a Gaussian KDE of the normal-window
//! statistics (held-out by default, see [`LimitSamples`]), the next `validation_window` cycles are checked against
//! them, and the change point is the first cycle after which a statistic
//! stays at or above its limit until the end of life.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::cmapss::{DatasetId, EngineSeries, SensorSelection};
use crate::cva::{build_lagged_matrices, fit_cva, CvaModel, LaggedMatrices, Projection, Standardizer};
use crate::error::{Error, Result};

pub const MIN_KDE_SAMPLES: usize = 30;
pub const SILVERMAN_FACTOR: f64 = 1.06;
/// Relative bandwidth used when every sample is identical.
pub const BANDWIDTH_FLOOR_REL: f64 = 1e-6;
const BISECTION_REL_TOL: f64 = 1e-6;

/// Per-cycle monitoring statistics. Entry `i` belongs to cycle `start_cycle + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticSeries {
    pub t2: Vec<f64>,
    pub q: Vec<f64>,
    pub start_cycle: usize,
}

impl StatisticSeries {
    pub fn new(t2: Vec<f64>, q: Vec<f64>, start_cycle: usize) -> Result<Self> {
        if t2.len() != q.len() {
            return Err(Error::Shape {
                expected: format!("{} Q values", t2.len()),
                got: format!("{}", q.len()),
            });
        }
        Ok(Self { t2, q, start_cycle })
    }

    pub fn len(&self) -> usize {
        self.t2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t2.is_empty()
    }

    /// Last covered cycle (`start_cycle - 1` when empty).
    pub fn end_cycle(&self) -> usize {
        self.start_cycle + self.len() - 1
    }

    /// Sub-series covering cycles `from..=to`, clipped to the available range.
    pub fn cycles(&self, from: usize, to: usize) -> StatisticSeries {
        let lo = from.max(self.start_cycle);
        let hi = to.min(self.end_cycle());
        if lo > hi {
            return StatisticSeries {
                t2: Vec::new(),
                q: Vec::new(),
                start_cycle: lo,
            };
        }
        let a = lo - self.start_cycle;
        let b = hi - self.start_cycle + 1;
        StatisticSeries {
            t2: self.t2[a..b].to_vec(),
            q: self.q[a..b].to_vec(),
            start_cycle: lo,
        }
    }

    /// `cycle,t2,q,cl_t2,cl_q` trace for plotting.
    pub fn to_trace_csv(&self, cl_t2: f64, cl_q: f64) -> String {
        let mut out = String::from("cycle,t2,q,cl_t2,cl_q\n");
        for (i, (t, q)) in self.t2.iter().zip(&self.q).enumerate() {
            out.push_str(&format!(
                "{},{t:?},{q:?},{cl_t2:?},{cl_q:?}\n",
                self.start_cycle + i
            ));
        }
        out
    }
}

/// Column-wise squared norms of the system and residual variates.
pub fn compute_statistics(z: &DMatrix<f64>, e: &DMatrix<f64>, start_cycle: usize) -> Result<StatisticSeries> {
    if z.ncols() != e.ncols() {
        return Err(Error::Shape {
            expected: format!("{} columns in E", z.ncols()),
            got: format!("{}", e.ncols()),
        });
    }
    let t2 = z.column_iter().map(|c| c.norm_squared()).collect();
    let q = e.column_iter().map(|c| c.norm_squared()).collect();
    StatisticSeries::new(t2, q, start_cycle)
}

pub fn statistics_of(proj: &Projection, start_cycle: usize) -> Result<StatisticSeries> {
    compute_statistics(&proj.z, &proj.e, start_cycle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimit {
    pub value: f64,
    pub bandwidth: f64,
    /// All samples were equal; `value` is that sample plus the bandwidth floor.
    pub degenerate: bool,
}

/// Gaussian-kernel density estimate with a Silverman bandwidth.
#[derive(Debug, Clone)]
pub struct GaussianKde {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl GaussianKde {
    pub fn silverman(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            samples: samples.to_vec(),
            bandwidth: SILVERMAN_FACTOR * var.sqrt() * n.powf(-0.2),
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let scale = 1.0 / (self.bandwidth * std::f64::consts::SQRT_2);
        let total: f64 = self
            .samples
            .iter()
            .map(|s| 0.5 * erfc((s - x) * scale))
            .sum();
        total / self.samples.len() as f64
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let norm = 1.0 / (self.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let total: f64 = self
            .samples
            .iter()
            .map(|s| {
                let u = (x - s) / self.bandwidth;
                (-0.5 * u * u).exp()
            })
            .sum();
        norm * total / self.samples.len() as f64
    }

    /// Smallest `x` with `cdf(x) = alpha`, by bisection.
    pub fn quantile(&self, alpha: f64) -> f64 {
        let min = self.samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = min;
        let mut hi = max + 5.0 * self.bandwidth;
        while self.cdf(hi) < alpha {
            hi += 5.0 * self.bandwidth;
        }
        while self.cdf(lo) > alpha {
            lo -= 5.0 * self.bandwidth;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= BISECTION_REL_TOL * mid.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Upper control limit `CL` solving `P(stat < CL) = alpha` under a KDE fit.
pub fn kde_control_limit(samples: &[f64], alpha: f64) -> Result<ControlLimit> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_KDE_SAMPLES,
            got: samples.len(),
        });
    }
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} must lie in (0.5, 1)")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite monitoring statistic".into()));
    }
    let kde = GaussianKde::silverman(samples);
    let scale = samples.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if !(kde.bandwidth() > 1e-14 * scale) {
        let value = samples[0];
        let floor = BANDWIDTH_FLOOR_REL * value.abs().max(1.0);
        log::warn!("degenerate control-limit samples (all equal to {value}); using bandwidth floor {floor:e}");
        return Ok(ControlLimit {
            value: value + floor,
            bandwidth: floor,
            degenerate: true,
        });
    }
    Ok(ControlLimit {
        value: kde.quantile(alpha),
        bandwidth: kde.bandwidth(),
        degenerate: false,
    })
}

/// Longest run of consecutive `true` values.
pub fn longest_run(flags: impl IntoIterator<Item = bool>) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for f in flags {
        if f {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

/// Index where the trailing all-`true` block begins, if the last value is `true`.
pub fn breach_suffix_start(flags: &[bool]) -> Option<usize> {
    let trailing = flags.iter().rev().take_while(|&&b| b).count();
    (trailing > 0).then(|| flags.len() - trailing)
}

/// Persistence length: the longest run of `t2 ≥ cl_t2` or of `q ≥ cl_q`.
pub fn compute_lambda(stats: &StatisticSeries, cl_t2: f64, cl_q: f64) -> usize {
    let t = longest_run(stats.t2.iter().map(|&v| v >= cl_t2));
    let q = longest_run(stats.q.iter().map(|&v| v >= cl_q));
    t.max(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    Detected,
    NoneDetected,
    FallbackCap,
}

impl DetectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionMethod::Detected => "detected",
            DetectionMethod::NoneDetected => "none_detected",
            DetectionMethod::FallbackCap => "fallback_cap",
        }
    }
}

impl fmt::Display for DetectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detected" => Ok(DetectionMethod::Detected),
            "none_detected" => Ok(DetectionMethod::NoneDetected),
            "fallback_cap" => Ok(DetectionMethod::FallbackCap),
            other => Err(Error::Integrity(format!("unknown detection method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointResult {
    pub unit_id: u32,
    pub k_max: usize,
    pub k_t2_cp: Option<usize>,
    pub k_q_cp: Option<usize>,
    pub k_cp: Option<usize>,
    pub method: DetectionMethod,
    /// The permanent breach began before the first monitored cycle and was clamped.
    pub flagged: bool,
}

impl ChangePointResult {
    pub fn fallback(unit_id: u32, k_max: usize) -> Self {
        Self {
            unit_id,
            k_max,
            k_t2_cp: None,
            k_q_cp: None,
            k_cp: None,
            method: DetectionMethod::FallbackCap,
            flagged: false,
        }
    }
}

fn earliest(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Suffix test: the change point of a statistic is the first cycle from
/// which it stays at or above its limit through `k_max`. The earlier of the
/// T² and Q candidates is selected.
pub fn detect_change_point(
    unit_id: u32,
    stats: &StatisticSeries,
    cl_t2: f64,
    cl_q: f64,
    k_max: usize,
) -> Result<ChangePointResult> {
    if !stats.is_empty() && stats.end_cycle() != k_max {
        return Err(Error::Shape {
            expected: format!("statistics through cycle {k_max}"),
            got: format!("statistics through cycle {}", stats.end_cycle()),
        });
    }
    let t2_flags: Vec<bool> = stats.t2.iter().map(|&v| v >= cl_t2).collect();
    let q_flags: Vec<bool> = stats.q.iter().map(|&v| v >= cl_q).collect();
    let k_t2_cp = breach_suffix_start(&t2_flags).map(|i| stats.start_cycle + i);
    let k_q_cp = breach_suffix_start(&q_flags).map(|i| stats.start_cycle + i);
    let k_cp = earliest(k_t2_cp, k_q_cp);
    Ok(ChangePointResult {
        unit_id,
        k_max,
        k_t2_cp,
        k_q_cp,
        k_cp,
        method: if k_cp.is_some() {
            DetectionMethod::Detected
        } else {
            DetectionMethod::NoneDetected
        },
        flagged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub p: usize,
    pub f: usize,
    pub r: usize,
    pub alpha: f64,
    pub normal_window: usize,
    pub validation_window: usize,
    pub min_lifespan: usize,
    /// Validation breach fraction above which a device is flagged.
    pub validation_breach_threshold: f64,
    pub limit_samples: LimitSamples,
}

impl MonitorConfig {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        Self {
            p: 2,
            f: 2,
            r: if dataset == DatasetId::FD004 { 21 } else { 15 },
            alpha: 0.99,
            normal_window: 60,
            validation_window: 20,
            min_lifespan: 200,
            validation_breach_threshold: 0.2,
            limit_samples: LimitSamples::HeldOut,
        }
    }

    /// First monitored cycle, right after the validation window.
    pub fn tau(&self) -> usize {
        self.normal_window + self.validation_window + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.f == 0 {
            return Err(Error::Config("p and f must be at least 1".into()));
        }
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0.5, 1)", self.alpha)));
        }
        let n_eff = self.normal_window as i64 - (self.p + self.f) as i64 + 1;
        if n_eff < MIN_KDE_SAMPLES as i64 {
            return Err(Error::Config(format!(
                "normal window of {} cycles leaves {n_eff} lagged samples; at least {MIN_KDE_SAMPLES} are needed",
                self.normal_window
            )));
        }
        if !(0.0..=1.0).contains(&self.validation_breach_threshold) {
            return Err(Error::Config("validation breach threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorModel {
    pub unit_id: u32,
    pub cva: CvaModel,
    pub alpha: f64,
    pub cl_t2: f64,
    pub cl_q: f64,
    pub lambda: usize,
    pub normal_window: usize,
    pub validation_window: usize,
}

const MONITOR_FORMAT: &str = "rulcp-monitor";
const MONITOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MonitorArtifact {
    format: String,
    version: u32,
    model: MonitorModel,
}

impl MonitorModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MonitorArtifact {
            format: MONITOR_FORMAT.into(),
            version: MONITOR_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let art: MonitorArtifact = serde_json::from_str(text)?;
        if art.format != MONITOR_FORMAT || art.version != MONITOR_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported monitor artifact {} v{}",
                art.format, art.version
            )));
        }
        // Re-validate embedded CVA shapes through its own loader.
        CvaModel::from_json(&art.model.cva.to_json()?)?;
        if !(art.model.cl_t2 > 0.0 && art.model.cl_q > 0.0) {
            return Err(Error::Integrity("control limits must be positive".into()));
        }
        Ok(art.model)
    }

    /// Statistics for cycles `p..=N` of a raw `m × N` series.
    pub fn statistics(&self, raw: &DMatrix<f64>) -> Result<StatisticSeries> {
        let (proj, start) = self.cva.project_series(raw)?;
        statistics_of(&proj, start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub t2_below_fraction: f64,
    pub q_below_fraction: f64,
    /// Larger of the two per-statistic breach fractions.
    pub breach_fraction: f64,
    pub flagged: bool,
}

/// Compare held-out normal-operation statistics against the model's limits.
pub fn validate_normal_window(
    model: &MonitorModel,
    validation: &StatisticSeries,
    breach_threshold: f64,
) -> ValidationReport {
    let n = validation.len();
    if n == 0 {
        return ValidationReport {
            n,
            t2_below_fraction: 1.0,
            q_below_fraction: 1.0,
            breach_fraction: 0.0,
            flagged: false,
        };
    }
    let below = |xs: &[f64], cl: f64| xs.iter().filter(|&&v| v < cl).count() as f64 / n as f64;
    let t2_below_fraction = below(&validation.t2, model.cl_t2);
    let q_below_fraction = below(&validation.q, model.cl_q);
    let breach_fraction = (1.0 - t2_below_fraction).max(1.0 - q_below_fraction);
    ValidationReport {
        n,
        t2_below_fraction,
        q_below_fraction,
        breach_fraction,
        flagged: breach_fraction > breach_threshold,
    }
}

/// Where the KDE samples for the control limits come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitSamples {
    /// Statistics of the training columns under the model fitted on them.
    InSample,
    /// Each training column scored by a model refitted without the columns
    /// that share an observation with it.
    HeldOut,
}

/// Held-out statistics over the normal window: column `j` of `lagged` is
/// projected by a CVA fitted on every column `i` with `|i − j| ≥ p + f`,
/// the columns that share no raw observation with `j`.
pub fn held_out_statistics(
    lagged: &LaggedMatrices,
    r: usize,
    standardizer: &Standardizer,
) -> Result<StatisticSeries> {
    let n = lagged.n_samples();
    let radius = lagged.p + lagged.f;
    let mut t2 = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for j in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&i| i.abs_diff(j) >= radius).collect();
        let sub = LaggedMatrices {
            past: lagged.past.select_columns(keep.iter()),
            future: lagged.future.select_columns(keep.iter()),
            p: lagged.p,
            f: lagged.f,
        };
        let model = fit_cva(&sub, r, standardizer.clone())?;
        let col = lagged.past.column(j).into_owned();
        let (z, e) = model.project_vector(&col)?;
        t2.push(z.norm_squared());
        q.push(e.norm_squared());
    }
    StatisticSeries::new(t2, q, lagged.p)
}

/// A monitor fitted on a device's normal window, before any scanning.
#[derive(Debug, Clone)]
pub struct NormalFit {
    /// `lambda` is left at 0.
    pub model: MonitorModel,
    pub cl_t2: ControlLimit,
    pub cl_q: ControlLimit,
    /// Fraction of in-sample training statistics below their limits.
    pub training_below: (f64, f64),
}

/// Standardize, fit CVA and set KDE control limits on the first
/// `normal_window` cycles of `raw` (channels × cycles).
pub fn fit_normal_model(unit_id: u32, raw: &DMatrix<f64>, config: &MonitorConfig) -> Result<NormalFit> {
    config.validate()?;
    if raw.ncols() < config.normal_window {
        return Err(Error::InsufficientData {
            needed: config.normal_window,
            got: raw.ncols(),
        });
    }
    let normal = raw.columns(0, config.normal_window).into_owned();
    let std_fit = Standardizer::fit(&normal)?;
    let normal_std = std_fit.standardizer.apply(&normal)?;
    let lagged = build_lagged_matrices(&normal_std, config.p, config.f)?;
    let cva = fit_cva(&lagged, config.r, std_fit.standardizer)?;

    let training = statistics_of(&cva.project(&lagged.past)?, config.p)?;
    let limit_stats = match config.limit_samples {
        LimitSamples::InSample => training.clone(),
        LimitSamples::HeldOut => held_out_statistics(&lagged, config.r, &cva.standardizer)?,
    };
    let cl_t2 = kde_control_limit(&limit_stats.t2, config.alpha)?;
    let cl_q = kde_control_limit(&limit_stats.q, config.alpha)?;
    let frac_below = |xs: &[f64], cl: f64| xs.iter().filter(|&&v| v < cl).count() as f64 / xs.len() as f64;
    let training_below = (
        frac_below(&training.t2, cl_t2.value),
        frac_below(&training.q, cl_q.value),
    );
    Ok(NormalFit {
        model: MonitorModel {
            unit_id,
            cva,
            alpha: config.alpha,
            cl_t2: cl_t2.value,
            cl_q: cl_q.value,
            lambda: 0,
            normal_window: config.normal_window,
            validation_window: config.validation_window,
        },
        cl_t2,
        cl_q,
        training_below,
    })
}

/// Everything produced by fitting and scanning one device.
#[derive(Debug, Clone)]
pub struct DeviceMonitorFit {
    pub model: MonitorModel,
    pub result: ChangePointResult,
    pub validation: ValidationReport,
    /// Statistics for every cycle from `p` to `k_max`.
    pub trace: StatisticSeries,
    /// Fraction of in-sample training statistics below their limits.
    pub training_below: (f64, f64),
    pub cl_t2: ControlLimit,
    pub cl_q: ControlLimit,
}

/// Fit a per-device monitor on the first `normal_window` cycles, validate
/// it on the next `validation_window` cycles and scan the rest for the
/// change point.
pub fn fit_device_monitor(
    series: &EngineSeries,
    selection: &SensorSelection,
    config: &MonitorConfig,
) -> Result<DeviceMonitorFit> {
    config.validate()?;
    let k_max = series.k_max();
    if k_max < config.min_lifespan {
        return Err(Error::FallbackRequired {
            unit_id: series.unit_id,
            k_max,
            min_lifespan: config.min_lifespan,
        });
    }
    let tau = config.tau();
    if k_max < tau {
        return Err(Error::InsufficientData { needed: tau, got: k_max });
    }

    let raw = series.sensor_matrix(selection);
    let NormalFit {
        mut model,
        cl_t2,
        cl_q,
        training_below,
    } = fit_normal_model(series.unit_id, &raw, config)?;

    let trace = model.statistics(&raw)?;
    let validation_stats = trace.cycles(config.normal_window + 1, tau - 1);
    let validation = validate_normal_window(&model, &validation_stats, config.validation_breach_threshold);

    // Scan validation + monitored cycles so a breach that was already under
    // way before τ is seen (and clamped) rather than mis-placed later.
    let scan = trace.cycles(config.normal_window + 1, k_max);
    let mut result = detect_change_point(series.unit_id, &scan, model.cl_t2, model.cl_q, k_max)?;
    for k in [&mut result.k_t2_cp, &mut result.k_q_cp].into_iter().flatten() {
        if *k < tau {
            *k = tau;
            result.flagged = true;
        }
    }
    result.k_cp = earliest(result.k_t2_cp, result.k_q_cp);
    if result.flagged {
        log::warn!(
            "unit {}: permanent breach starts inside the validation window; change point clamped to {tau}",
            series.unit_id
        );
    }

    // Persistence from normal + transition data: everything before each
    // statistic's own permanent breach (never shorter than train + validation).
    let prefix_end = |cp: Option<usize>| cp.map_or(k_max, |k| k.max(tau) - 1);
    let t2_prefix = trace.cycles(trace.start_cycle, prefix_end(result.k_t2_cp));
    let q_prefix = trace.cycles(trace.start_cycle, prefix_end(result.k_q_cp));
    model.lambda = longest_run(t2_prefix.t2.iter().map(|&v| v >= model.cl_t2))
        .max(longest_run(q_prefix.q.iter().map(|&v| v >= model.cl_q)));

    Ok(DeviceMonitorFit {
        model,
        result,
        validation,
        trace,
        training_below,
        cl_t2,
        cl_q,
    })
}

/// One row of the change-point report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointRecord {
    pub dataset: DatasetId,
    pub unit: u32,
    pub k_max: usize,
    pub k_t2_cp: Option<usize>,
    pub k_q_cp: Option<usize>,
    pub k_cp: Option<usize>,
    pub method: DetectionMethod,
    pub lambda: Option<usize>,
    pub cl_t2: Option<f64>,
    pub cl_q: Option<f64>,
    #[serde(default)]
    pub flagged: bool,
}

impl ChangePointRecord {
    pub fn from_fit(dataset: DatasetId, fit: &DeviceMonitorFit) -> Self {
        Self {
            dataset,
            unit: fit.result.unit_id,
            k_max: fit.result.k_max,
            k_t2_cp: fit.result.k_t2_cp,
            k_q_cp: fit.result.k_q_cp,
            k_cp: fit.result.k_cp,
            method: fit.result.method,
            lambda: Some(fit.model.lambda),
            cl_t2: Some(fit.model.cl_t2),
            cl_q: Some(fit.model.cl_q),
            flagged: fit.result.flagged || fit.validation.flagged,
        }
    }

    pub fn fallback(dataset: DatasetId, unit: u32, k_max: usize) -> Self {
        Self {
            dataset,
            unit,
            k_max,
            k_t2_cp: None,
            k_q_cp: None,
            k_cp: None,
            method: DetectionMethod::FallbackCap,
            lambda: None,
            cl_t2: None,
            cl_q: None,
            flagged: false,
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "dataset,unit,k_max,k_t2_cp,k_q_cp,k_cp,method,lambda,cl_t2,cl_q,flagged";

fn opt<T: fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref().map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn report_to_csv(rows: &[ChangePointRecord]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.unit,
            r.k_max,
            opt(&r.k_t2_cp),
            opt(&r.k_q_cp),
            opt(&r.k_cp),
            r.method,
            opt(&r.lambda),
            opt(&r.cl_t2),
            opt(&r.cl_q),
            r.flagged
        ));
    }
    out
}

pub fn report_from_csv(text: &str) -> Result<Vec<ChangePointRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_CSV_HEADER => {}
        _ => return Err(Error::Integrity("change-point report header mismatch".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("expected 11 fields, found {}", f.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            row: i + 1,
            message: format!("bad {what}"),
        };
        let ou = |s: &str, what: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err(what))
            }
        };
        let of = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err(what))
            }
        };
        out.push(ChangePointRecord {
            dataset: f[0].parse()?,
            unit: f[1].parse().map_err(|_| parse_err("unit"))?,
            k_max: f[2].parse().map_err(|_| parse_err("k_max"))?,
            k_t2_cp: ou(f[3], "k_t2_cp")?,
            k_q_cp: ou(f[4], "k_q_cp")?,
            k_cp: ou(f[5], "k_cp")?,
            method: f[6].parse()?,
            lambda: ou(f[7], "lambda")?,
            cl_t2: of(f[8], "cl_t2")?,
            cl_q: of(f[9], "cl_q")?,
            flagged: f[10].parse().map_err(|_| parse_err("flagged"))?,
        });
    }
    Ok(out)
}

//! Seeded generators for C-MAPSS shaped run-to-failure data with known
//! change points. Used by the test suites, the acceptance harness and the
//! Python smoke test; useful on its own for dry runs without the real files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmapss::{select_sensors, DatasetId, EngineSeries, N_SENSORS, N_SETTINGS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dataset: DatasetId,
    /// Number of operating regimes; each cycle draws one uniformly.
    pub n_regimes: usize,
    /// Measurement noise standard deviation (sensor units).
    pub noise_std: f64,
    /// AR(1) coefficient of the shared latent process.
    pub ar_phi: f64,
    /// Offset in noise units applied at the change point.
    pub degradation_step: f64,
    /// Exponential growth rate of the degradation after the change point.
    pub degradation_rate: f64,
    /// Degradation magnitude (noise units) reached at end of life.
    pub degradation_at_failure: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(dataset: DatasetId, seed: u64) -> Self {
        Self {
            dataset,
            n_regimes: if dataset.multi_condition() { 6 } else { 1 },
            noise_std: 1.0,
            ar_phi: 0.7,
            degradation_step: 4.0,
            degradation_rate: 0.03,
            degradation_at_failure: 25.0,
            seed,
        }
    }
}

/// Fixed per-fleet structure: regime settings, baselines and loadings.
#[derive(Debug, Clone)]
pub struct SyntheticFleet {
    cfg: SyntheticConfig,
    kept: Vec<usize>,
    regime_settings: Vec<[f64; N_SETTINGS]>,
    regime_offsets: Vec<[f64; N_SENSORS]>,
    base: [f64; N_SENSORS],
    loading: [f64; N_SENSORS],
    sensitivity: [f64; N_SENSORS],
}

impl SyntheticFleet {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1ee7);
        let kept = select_sensors(cfg.dataset).zero_based();
        let mut base = [0.0; N_SENSORS];
        let mut loading = [0.0; N_SENSORS];
        let mut sensitivity = [0.0; N_SENSORS];
        for j in 0..N_SENSORS {
            base[j] = 100.0 + 900.0 * rng.random::<f64>();
            loading[j] = 0.3 + 0.7 * rng.random::<f64>();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sensitivity[j] = sign * (0.5 + rng.random::<f64>());
        }
        let n_regimes = cfg.n_regimes.max(1);
        let mut regime_settings = Vec::with_capacity(n_regimes);
        let mut regime_offsets = Vec::with_capacity(n_regimes);
        for r in 0..n_regimes {
            regime_settings.push([10.0 * r as f64, 0.2 * r as f64, 60.0 + 20.0 * r as f64]);
            let mut off = [0.0; N_SENSORS];
            if r > 0 {
                for o in off.iter_mut() {
                    *o = 40.0 * (rng.random::<f64>() - 0.5);
                }
            }
            regime_offsets.push(off);
        }
        Self {
            cfg,
            kept,
            regime_settings,
            regime_offsets,
            base,
            loading,
            sensitivity,
        }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn health(&self, k: usize, change_point: Option<usize>, k_max: usize) -> f64 {
        let Some(cp) = change_point else { return 0.0 };
        if k < cp {
            return 0.0;
        }
        let span = (k_max.saturating_sub(cp)).max(1) as f64;
        let rate = self.cfg.degradation_rate;
        let grow = ((rate * (k - cp) as f64).exp() - 1.0) / ((rate * span).exp() - 1.0);
        self.cfg.degradation_step + (self.cfg.degradation_at_failure - self.cfg.degradation_step) * grow
    }

    /// One engine with `k_max` cycles; degradation starts at `change_point`.
    pub fn engine(&self, unit_id: u32, k_max: usize, change_point: Option<usize>) -> EngineSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (unit_id as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9),
        );
        let sd = self.cfg.noise_std;
        let mut latent = 0.0;
        let innov = (1.0 - self.cfg.ar_phi * self.cfg.ar_phi).sqrt();
        let mut settings = Vec::with_capacity(k_max);
        let mut sensors = Vec::with_capacity(k_max);
        for k in 1..=k_max {
            let regime = rng.random_range(0..self.regime_settings.len());
            let e: f64 = rng.sample(StandardNormal);
            latent = self.cfg.ar_phi * latent + innov * e;
            let h = self.health(k, change_point, k_max);
            let mut set = self.regime_settings[regime];
            for s in set.iter_mut() {
                *s += 1e-3 * rng.sample::<f64, _>(StandardNormal);
            }
            let mut row = [0.0; N_SENSORS];
            for j in 0..N_SENSORS {
                row[j] = self.base[j];
                if self.kept.contains(&j) {
                    let noise: f64 = rng.sample(StandardNormal);
                    row[j] += self.regime_offsets[regime][j]
                        + sd * (self.loading[j] * latent + noise)
                        + sd * self.sensitivity[j] * h;
                }
            }
            settings.push(set);
            sensors.push(row);
        }
        EngineSeries::new(self.cfg.dataset, unit_id, settings, sensors)
            .expect("generated series is well formed")
    }
}

/// A run-to-failure device with its ground-truth change point.
#[derive(Debug, Clone)]
pub struct LabelledEngine {
    pub series: EngineSeries,
    pub change_point: Option<usize>,
}

/// Degrading devices with lifespans in `[220, 360]` and change points
/// spread over the last 40–70 % of life, plus optional stationary devices.
pub fn change_point_corpus(cfg: SyntheticConfig, n_degrading: usize, n_stationary: usize) -> Vec<LabelledEngine> {
    let fleet = SyntheticFleet::new(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut out = Vec::new();
    for u in 0..(n_degrading + n_stationary) {
        let unit = u as u32 + 1;
        let k_max = rng.random_range(220..=360);
        let cp = if u < n_degrading {
            let frac = 0.3 + 0.3 * rng.random::<f64>();
            Some(k_max - (frac * k_max as f64) as usize)
        } else {
            None
        };
        out.push(LabelledEngine {
            series: fleet.engine(unit, k_max, cp),
            change_point: cp,
        });
    }
    out
}

/// Train / test / RUL triple in the public file layout.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: DatasetId,
    pub train: Vec<LabelledEngine>,
    pub test: Vec<EngineSeries>,
    pub test_rul: Vec<u32>,
}

/// Fleet whose lifespans resemble the turbofan training sets: roughly half
/// the units live at least 200 cycles. Degradation onsets sit 60–140 cycles
/// before failure. Test units are truncated at a random cycle.
pub fn cmapss_like_corpus(cfg: SyntheticConfig, n_train: usize, n_test: usize) -> SyntheticCorpus {
    let fleet = SyntheticFleet::new(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(99));
    let draw = |rng: &mut ChaCha8Rng| {
        let k_max: usize = rng.random_range(140..=320);
        let y_max: usize = rng.random_range(60..=140);
        (k_max, k_max - y_max.min(k_max - 90))
    };
    let train = (0..n_train)
        .map(|u| {
            let (k_max, cp) = draw(&mut rng);
            LabelledEngine {
                series: fleet.engine(u as u32 + 1, k_max, Some(cp)),
                change_point: Some(cp),
            }
        })
        .collect();
    let mut test = Vec::with_capacity(n_test);
    let mut test_rul = Vec::with_capacity(n_test);
    for u in 0..n_test {
        let (k_max, cp) = draw(&mut rng);
        // Unit ids continue past the train ids so noise streams differ.
        let full = fleet.engine((n_train + u) as u32 + 1, k_max, Some(cp));
        let cut = rng.random_range(30..k_max);
        let mut t = full.truncated(cut);
        t.unit_id = u as u32 + 1;
        test_rul.push((k_max - cut) as u32);
        test.push(t);
    }
    SyntheticCorpus {
        dataset: cfg.dataset,
        train,
        test,
        test_rul,
    }
}

impl SyntheticCorpus {
    /// Write `train_FDxxx.txt`, `test_FDxxx.txt` and `RUL_FDxxx.txt` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let id = self.dataset.as_str();
        let train: String = self.train.iter().map(|e| e.series.to_rows()).collect();
        let test: String = self.test.iter().map(|e| e.to_rows()).collect();
        let rul: String = self.test_rul.iter().map(|v| format!("{v}\n")).collect();
        for (name, body) in [
            (format!("train_{id}.txt"), train),
            (format!("test_{id}.txt"), test),
            (format!("RUL_{id}.txt"), rul),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

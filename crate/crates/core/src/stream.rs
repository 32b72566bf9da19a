//! Online per-cycle monitoring with λ-persistence and RUL estimates.
//!
//! Each device is scored from cycle `normal_window + 1` on. A statistic
//! whose consecutive breach run grows longer than λ declares the change
//! point at the start of that run; afterwards every cycle also yields an
//! RUL estimate from the trailing window.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cmapss::{SensorSelection, N_SENSORS};
use crate::error::{Error, Result};
use crate::lstm::{CheckpointMeta, LstmRegressor};
use crate::monitor::{fit_normal_model, longest_run, MonitorConfig, MonitorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Normal,
    Transition,
    Degrading,
}

/// One input line: `{"unit": 1, "cycle": 5, "sensors": [...]}`. Sensors are
/// either all 21 raw channels or only the selected ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub unit: u32,
    pub cycle: usize,
    pub sensors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Cycle {
        unit: u32,
        cycle: usize,
        t2: Option<f64>,
        q: Option<f64>,
        status: DeviceStatus,
    },
    Calibrated {
        unit: u32,
        cycle: usize,
        cl_t2: f64,
        cl_q: f64,
        lambda: usize,
    },
    ChangePoint {
        unit: u32,
        cycle: usize,
        k_cp: usize,
        statistic: String,
        lambda: usize,
    },
    Rul {
        unit: u32,
        cycle: usize,
        rul: f64,
    },
    Rejected {
        unit: Option<u32>,
        cycle: Option<usize>,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub monitor: MonitorConfig,
    /// Fit a monitor from a device's own first cycles when none is loaded.
    pub self_calibrate: bool,
    /// Lower bound on λ for self-calibrated devices.
    pub min_lambda: usize,
}

/// Stream state of one device.
#[derive(Debug, Clone)]
pub struct DeviceStreamState {
    pub unit_id: u32,
    pub model: Option<MonitorModel>,
    pub status: DeviceStatus,
    pub run_t2: usize,
    pub run_q: usize,
    pub k_cp: Option<usize>,
    pub last_cycle: usize,
    /// Recent selected-sensor rows, newest last.
    recent: VecDeque<Vec<f64>>,
    depth: usize,
    /// Every row until a self-calibrated monitor is fitted.
    calibration: Vec<Vec<f64>>,
}

impl DeviceStreamState {
    pub fn new(unit_id: u32, model: Option<MonitorModel>, depth: usize) -> Self {
        Self {
            unit_id,
            model,
            status: DeviceStatus::Normal,
            run_t2: 0,
            run_q: 0,
            k_cp: None,
            last_cycle: 0,
            recent: VecDeque::new(),
            depth: depth.max(1),
            calibration: Vec::new(),
        }
    }

    fn remember(&mut self, row: Vec<f64>) {
        self.recent.push_back(row);
        while self.recent.len() > self.depth {
            self.recent.pop_front();
        }
    }

    fn stats_for_latest(&self, model: &MonitorModel) -> Result<Option<(f64, f64)>> {
        let p = model.cva.p;
        if self.recent.len() < p {
            return Ok(None);
        }
        let rows: Vec<&Vec<f64>> = self.recent.iter().skip(self.recent.len() - p).collect();
        let m = rows[0].len();
        let raw = DMatrix::from_fn(m, p, |i, j| rows[j][i]);
        let s = model.statistics(&raw)?;
        Ok(Some((s.t2[0], s.q[0])))
    }

    /// Advance the run counters with one cycle's statistics; returns the
    /// change-point event when this cycle triggers one.
    fn step(&mut self, cycle: usize, t2: f64, q: f64, model: &MonitorModel) -> Option<StreamEvent> {
        let breach_t2 = t2 >= model.cl_t2;
        let breach_q = q >= model.cl_q;
        self.run_t2 = if breach_t2 { self.run_t2 + 1 } else { 0 };
        self.run_q = if breach_q { self.run_q + 1 } else { 0 };
        if self.status == DeviceStatus::Degrading {
            return None;
        }
        if (breach_t2 || breach_q) && self.status == DeviceStatus::Normal {
            self.status = DeviceStatus::Transition;
        }
        let lambda = model.lambda;
        let fired_t2 = self.run_t2 > lambda;
        let fired_q = self.run_q > lambda;
        if !(fired_t2 || fired_q) {
            return None;
        }
        let longest = if fired_t2 && fired_q {
            self.run_t2.max(self.run_q)
        } else if fired_t2 {
            self.run_t2
        } else {
            self.run_q
        };
        let statistic = match (fired_t2, fired_q) {
            (true, true) if self.run_t2 == self.run_q => "t2+q",
            (true, true) if self.run_t2 > self.run_q => "t2",
            (true, true) => "q",
            (true, false) => "t2",
            _ => "q",
        };
        let tau = model.normal_window + model.validation_window + 1;
        let k_cp = (cycle + 1 - longest).max(tau);
        self.status = DeviceStatus::Degrading;
        self.k_cp = Some(k_cp);
        Some(StreamEvent::ChangePoint {
            unit: self.unit_id,
            cycle,
            k_cp,
            statistic: statistic.into(),
            lambda,
        })
    }
}

/// Loaded RUL model plus the metadata needed to build its input windows.
#[derive(Debug, Clone)]
pub struct RulEstimator {
    pub model: LstmRegressor,
    pub meta: CheckpointMeta,
}

pub struct OnlineMonitor {
    selection: SensorSelection,
    settings: StreamSettings,
    models: BTreeMap<u32, MonitorModel>,
    rul: Option<RulEstimator>,
    devices: BTreeMap<u32, DeviceStreamState>,
}

impl OnlineMonitor {
    pub fn new(
        selection: SensorSelection,
        settings: StreamSettings,
        models: Vec<MonitorModel>,
        rul: Option<RulEstimator>,
    ) -> Result<Self> {
        settings.monitor.validate()?;
        if let Some(r) = &rul {
            if r.meta.channels != selection.channel_names() {
                return Err(Error::Integrity("RUL checkpoint channels do not match the sensor selection".into()));
            }
        }
        for m in &models {
            if m.cva.n_channels() != selection.m() {
                return Err(Error::Integrity(format!(
                    "monitor for unit {} expects {} channels, selection has {}",
                    m.unit_id,
                    m.cva.n_channels(),
                    selection.m()
                )));
            }
        }
        Ok(Self {
            selection,
            settings,
            models: models.into_iter().map(|m| (m.unit_id, m)).collect(),
            rul,
            devices: BTreeMap::new(),
        })
    }

    pub fn device(&self, unit: u32) -> Option<&DeviceStreamState> {
        self.devices.get(&unit)
    }

    fn depth(&self) -> usize {
        let p = self.settings.monitor.p;
        p.max(self.rul.as_ref().map_or(0, |r| r.meta.seq_len))
    }

    fn select(&self, sensors: &[f64]) -> Option<Vec<f64>> {
        if sensors.len() == N_SENSORS {
            Some(self.selection.zero_based().iter().map(|&j| sensors[j]).collect())
        } else if sensors.len() == self.selection.m() {
            Some(sensors.to_vec())
        } else {
            None
        }
    }

    /// Parse and process one input line.
    pub fn process_line(&mut self, line: &str) -> Vec<StreamEvent> {
        match serde_json::from_str::<CycleRecord>(line) {
            Ok(rec) => self.process(&rec),
            Err(e) => vec![StreamEvent::Rejected {
                unit: None,
                cycle: None,
                reason: format!("unparseable record: {e}"),
            }],
        }
    }

    pub fn process(&mut self, rec: &CycleRecord) -> Vec<StreamEvent> {
        let reject = |reason: String| {
            vec![StreamEvent::Rejected {
                unit: Some(rec.unit),
                cycle: Some(rec.cycle),
                reason,
            }]
        };
        let Some(row) = self.select(&rec.sensors) else {
            return reject(format!(
                "expected {} or {} sensor values, got {}",
                N_SENSORS,
                self.selection.m(),
                rec.sensors.len()
            ));
        };
        if row.iter().any(|v| !v.is_finite()) {
            return reject("non-finite sensor value".into());
        }
        if !self.devices.contains_key(&rec.unit) {
            let model = self.models.get(&rec.unit).cloned();
            if model.is_none() && !self.settings.self_calibrate {
                return reject(format!("no monitor for unit {} and self-calibration is off", rec.unit));
            }
            let depth = self.depth();
            self.devices.insert(rec.unit, DeviceStreamState::new(rec.unit, model, depth));
        }
        let expected = self.devices[&rec.unit].last_cycle + 1;
        if rec.cycle != expected {
            return reject(format!("expected cycle {expected}"));
        }
        match self.advance(rec.unit, rec.cycle, row) {
            Ok(ev) => ev,
            Err(e) => reject(e.to_string()),
        }
    }

    fn advance(&mut self, unit: u32, cycle: usize, row: Vec<f64>) -> Result<Vec<StreamEvent>> {
        let mon = self.settings.monitor.clone();
        let min_lambda = self.settings.min_lambda;
        let state = self.devices.get_mut(&unit).expect("device registered");
        state.last_cycle = cycle;
        state.remember(row.clone());
        let mut events = Vec::new();

        if state.model.is_none() {
            state.calibration.push(row);
            let tau = mon.normal_window + mon.validation_window + 1;
            if cycle + 1 < tau {
                events.push(StreamEvent::Cycle {
                    unit,
                    cycle,
                    t2: None,
                    q: None,
                    status: state.status,
                });
                return Ok(events);
            }
            // Fit on the normal window, then replay the validation cycles.
            let rows = std::mem::take(&mut state.calibration);
            let m = rows[0].len();
            let raw = DMatrix::from_fn(m, rows.len(), |i, j| rows[j][i]);
            let mut model = fit_normal_model(unit, &raw, &mon)?.model;
            let stats = model.statistics(&raw)?.cycles(mon.normal_window + 1, cycle);
            let run = longest_run(stats.t2.iter().map(|&v| v >= model.cl_t2))
                .max(longest_run(stats.q.iter().map(|&v| v >= model.cl_q)));
            model.lambda = run.max(min_lambda);
            events.push(StreamEvent::Calibrated {
                unit,
                cycle,
                cl_t2: model.cl_t2,
                cl_q: model.cl_q,
                lambda: model.lambda,
            });
            let first = stats.start_cycle;
            for (i, (&t2, &q)) in stats.t2.iter().zip(&stats.q).enumerate() {
                if let Some(ev) = state.step(first + i, t2, q, &model) {
                    events.push(ev);
                }
            }
            let (t2, q) = (stats.t2.last().copied(), stats.q.last().copied());
            state.model = Some(model);
            events.push(StreamEvent::Cycle {
                unit,
                cycle,
                t2,
                q,
                status: state.status,
            });
            return Ok(events);
        }

        let model = state.model.clone().expect("model present");
        let stats = if cycle > model.normal_window {
            state.stats_for_latest(&model)?
        } else {
            None
        };
        if let Some((t2, q)) = stats {
            if let Some(ev) = state.step(cycle, t2, q, &model) {
                events.push(ev);
            }
        }
        events.push(StreamEvent::Cycle {
            unit,
            cycle,
            t2: stats.map(|s| s.0),
            q: stats.map(|s| s.1),
            status: state.status,
        });
        if state.status == DeviceStatus::Degrading {
            if let Some(r) = &self.rul {
                let rul = estimate_rul(r, &state.recent)?;
                events.push(StreamEvent::Rul { unit, cycle, rul });
            }
        }
        Ok(events)
    }
}

fn estimate_rul(r: &RulEstimator, recent: &VecDeque<Vec<f64>>) -> Result<f64> {
    let st = r
        .meta
        .standardizer
        .as_ref()
        .ok_or_else(|| Error::Integrity("RUL checkpoint carries no standardizer".into()))?;
    let len = r.meta.seq_len;
    let rows: Vec<&Vec<f64>> = recent.iter().skip(recent.len().saturating_sub(len)).collect();
    let m = rows[0].len();
    let raw = DMatrix::from_fn(m, rows.len(), |i, j| rows[j][i]);
    let window = crate::labeling::final_window(&st.apply(&raw)?, len)?;
    r.model.predict(&window, r.meta.label_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmapss::{select_sensors, DatasetId};
    use crate::synthetic::{SyntheticConfig, SyntheticFleet};

    fn settings() -> StreamSettings {
        StreamSettings {
            monitor: MonitorConfig::for_dataset(DatasetId::FD001),
            self_calibrate: true,
            min_lambda: 1,
        }
    }

    fn hand_model(lambda: usize) -> MonitorModel {
        // Identity CVA on one channel: T² = 0, Q = x² per cycle for p = f = 1.
        let x = DMatrix::from_fn(1, 40, |_, j| (j as f64 * 0.7).sin());
        let mut cva = crate::cva::CvaModel::fit_raw(&x, 1, 1, 1).unwrap();
        cva.standardizer = crate::cva::Standardizer::identity(1);
        MonitorModel {
            unit_id: 1,
            cva,
            alpha: 0.99,
            cl_t2: f64::INFINITY,
            cl_q: f64::NEG_INFINITY,
            lambda,
            normal_window: 2,
            validation_window: 0,
        }
    }

    #[test]
    fn persistence_counter_resets() {
        let model = hand_model(3);
        let mut s = DeviceStreamState::new(1, Some(model.clone()), 1);
        let mut m = model.clone();
        // Drive the counter directly with a limit of 1 on Q.
        m.cl_q = 1.0;
        let pattern = [2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0];
        for (i, q) in pattern.iter().enumerate() {
            assert!(s.step(10 + i, 0.0, *q, &m).is_none());
        }
        assert_eq!(s.status, DeviceStatus::Transition);
        assert_eq!(s.run_q, 0);
        for i in 0..3 {
            assert!(s.step(20 + i, 0.0, 2.0, &m).is_none());
        }
        let ev = s.step(23, 0.0, 2.0, &m).unwrap();
        assert_eq!(
            ev,
            StreamEvent::ChangePoint {
                unit: 1,
                cycle: 23,
                k_cp: 20,
                statistic: "q".into(),
                lambda: 3
            }
        );
        assert_eq!(s.status, DeviceStatus::Degrading);
        assert!(s.step(24, 0.0, 0.0, &m).is_none());
        assert_eq!(s.status, DeviceStatus::Degrading);
    }

    fn feed(mon: &mut OnlineMonitor, unit: u32, series: &crate::cmapss::EngineSeries) -> Vec<StreamEvent> {
        let mut out = Vec::new();
        for (k, row) in series.sensors.iter().enumerate() {
            out.extend(mon.process(&CycleRecord {
                unit,
                cycle: k + 1,
                sensors: row.to_vec(),
            }));
        }
        out
    }

    #[test]
    fn stationary_stream_stays_quiet() {
        let fleet = SyntheticFleet::new(SyntheticConfig::new(DatasetId::FD001, 3));
        let e = fleet.engine(1, 250, None);
        let mut mon = OnlineMonitor::new(select_sensors(DatasetId::FD001), settings(), vec![], None).unwrap();
        let events = feed(&mut mon, 1, &e);
        assert!(events.iter().all(|ev| !matches!(ev, StreamEvent::ChangePoint { .. } | StreamEvent::Rul { .. })));
        assert_eq!(events.iter().filter(|ev| matches!(ev, StreamEvent::Cycle { .. })).count(), 250);
        assert!(mon.device(1).unwrap().status <= DeviceStatus::Transition);
    }

    #[test]
    fn injected_shift_is_detected_soon_after() {
        let fleet = SyntheticFleet::new(SyntheticConfig::new(DatasetId::FD001, 4));
        let cp = 150;
        let e = fleet.engine(1, 260, Some(cp));
        let mut mon = OnlineMonitor::new(select_sensors(DatasetId::FD001), settings(), vec![], None).unwrap();
        let events = feed(&mut mon, 1, &e);
        let (cycle, k_cp, lambda) = events
            .iter()
            .find_map(|ev| match ev {
                StreamEvent::ChangePoint { cycle, k_cp, lambda, .. } => Some((*cycle, *k_cp, *lambda)),
                _ => None,
            })
            .expect("change point event");
        assert!(cycle >= cp && cycle <= cp + lambda + 10, "event at {cycle}, λ = {lambda}");
        assert!(k_cp >= cp && k_cp <= cp + 10);
    }

    #[test]
    fn bad_records_are_rejected() {
        let mut s = settings();
        s.self_calibrate = false;
        let mut mon = OnlineMonitor::new(select_sensors(DatasetId::FD001), s, vec![], None).unwrap();
        let ev = mon.process(&CycleRecord {
            unit: 9,
            cycle: 1,
            sensors: vec![0.0; 21],
        });
        assert!(matches!(ev[0], StreamEvent::Rejected { .. }));
        let ev = mon.process_line("{not json");
        assert!(matches!(ev[0], StreamEvent::Rejected { unit: None, .. }));
        let ev = mon.process(&CycleRecord {
            unit: 9,
            cycle: 1,
            sensors: vec![0.0; 5],
        });
        assert!(matches!(&ev[0], StreamEvent::Rejected { reason, .. } if reason.contains("sensor values")));
    }

    #[test]
    fn events_serialize_as_tagged_lines() {
        let ev = StreamEvent::Cycle {
            unit: 3,
            cycle: 7,
            t2: None,
            q: Some(1.5),
            status: DeviceStatus::Normal,
        };
        assert_eq!(
            serde_json::to_string(&ev).unwrap(),
            r#"{"event":"cycle","unit":3,"cycle":7,"t2":null,"q":1.5,"status":"normal"}"#
        );
    }
}

//! Piecewise RUL labels, pre-change-point standardization and sliding windows.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cva::Standardizer;
use crate::error::{Error, Result};

/// Upper RUL limit used when no change point is available, and for test truth.
pub const DEFAULT_RUL_CAP: usize = 130;
/// Shortest pre-change-point segment used for standardization.
pub const MIN_STANDARDIZE_REFERENCE: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulLabelSpec {
    pub unit_id: u32,
    pub k_max: usize,
    pub k_cp: Option<usize>,
    pub y_max: usize,
    /// `labels[k - 1]` is the RUL at cycle `k`.
    pub labels: Vec<f64>,
}

impl RulLabelSpec {
    pub fn label_at(&self, cycle: usize) -> f64 {
        self.labels[cycle - 1]
    }
}

/// `labels[k] = min(k_max − k, y_max)` with `y_max = k_max − k_cp`, or the
/// fallback cap when there is no change point.
pub fn piecewise_rul_labels(
    unit_id: u32,
    k_max: usize,
    k_cp: Option<usize>,
    fallback_cap: usize,
) -> Result<RulLabelSpec> {
    if k_max == 0 {
        return Err(Error::Integrity(format!("unit {unit_id}: empty lifespan")));
    }
    let y_max = match k_cp {
        Some(cp) if cp == 0 || cp >= k_max => {
            return Err(Error::Integrity(format!(
                "unit {unit_id}: change point {cp} outside 1..{k_max}"
            )))
        }
        Some(cp) => k_max - cp,
        None => fallback_cap,
    };
    let labels = (1..=k_max).map(|k| (k_max - k).min(y_max) as f64).collect();
    Ok(RulLabelSpec {
        unit_id,
        k_max,
        k_cp,
        y_max,
        labels,
    })
}

/// Cycle up to which an engine counts as healthy for standardization.
pub fn standardize_reference(k_max: usize, k_cp: Option<usize>, fallback_cap: usize) -> usize {
    let r = match k_cp {
        Some(cp) => cp,
        None => k_max.saturating_sub(fallback_cap).max(MIN_STANDARDIZE_REFERENCE),
    };
    r.min(k_max)
}

/// Fit on cycles `1..=k_ref` of `x` (channels × cycles) and apply to every cycle.
pub fn piecewise_standardize(x: &DMatrix<f64>, k_ref: usize) -> Result<(DMatrix<f64>, Standardizer)> {
    if k_ref < 2 || k_ref > x.ncols() {
        return Err(Error::Config(format!(
            "standardization reference {k_ref} outside 2..={}",
            x.ncols()
        )));
    }
    let st = Standardizer::fit(&x.columns(0, k_ref).into_owned())?.standardizer;
    Ok((st.apply(x)?, st))
}

/// One standardizer over the healthy segments of every engine.
pub fn pooled_standardizer(engines: &[(&DMatrix<f64>, usize)]) -> Result<Standardizer> {
    let blocks: Vec<DMatrix<f64>> = engines
        .iter()
        .map(|(x, k)| x.columns(0, (*k).min(x.ncols())).into_owned())
        .collect();
    Ok(Standardizer::fit_pooled(&blocks)?.standardizer)
}

/// Windows stored back to back, each `seq_len × n_features` in time-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub seq_len: usize,
    pub n_features: usize,
    pub data: Vec<f64>,
    pub targets: Vec<f64>,
    /// `(unit_id, end_cycle)` per window.
    pub provenance: Vec<(u32, usize)>,
}

impl WindowedDataset {
    pub fn empty(seq_len: usize, n_features: usize) -> Self {
        Self {
            seq_len,
            n_features,
            data: Vec::new(),
            targets: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.seq_len * self.n_features
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.window_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn push(&mut self, window: &[f64], target: f64, unit_id: u32, end_cycle: usize) {
        assert_eq!(window.len(), self.window_len(), "window size mismatch");
        self.data.extend_from_slice(window);
        self.targets.push(target);
        self.provenance.push((unit_id, end_cycle));
    }

    pub fn extend(&mut self, other: &WindowedDataset) -> Result<()> {
        if (other.seq_len, other.n_features) != (self.seq_len, self.n_features) {
            return Err(Error::Shape {
                expected: format!("{}x{} windows", self.seq_len, self.n_features),
                got: format!("{}x{}", other.seq_len, other.n_features),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.targets.extend_from_slice(&other.targets);
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    /// Subset by window index, in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowedDataset {
        let mut out = WindowedDataset::empty(self.seq_len, self.n_features);
        for &i in idx {
            let (u, c) = self.provenance[i];
            out.push(self.window(i), self.targets[i], u, c);
        }
        out
    }
}

/// Time-major copy of cycles `end - len + 1 ..= end` (1-based) of `x`.
fn window_at(x: &DMatrix<f64>, end: usize, len: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(len * x.nrows());
    for c in (end - len)..end {
        w.extend(x.column(c).iter().copied());
    }
    w
}

/// Every `len`-cycle window of a standardized engine, ending at cycles
/// `len, len + step, ..`; each target is the label at the end cycle.
/// Engines shorter than `len` yield no windows.
pub fn sliding_windows(
    x: &DMatrix<f64>,
    labels: &RulLabelSpec,
    len: usize,
    step: usize,
) -> Result<WindowedDataset> {
    if len == 0 || step == 0 {
        return Err(Error::Config("window length and step must be positive".into()));
    }
    if x.ncols() != labels.k_max {
        return Err(Error::Shape {
            expected: format!("{} cycles", labels.k_max),
            got: format!("{}", x.ncols()),
        });
    }
    let mut out = WindowedDataset::empty(len, x.nrows());
    if x.ncols() < len {
        log::warn!(
            "unit {}: {} cycles is shorter than the window length {len}; skipped",
            labels.unit_id,
            x.ncols()
        );
        return Ok(out);
    }
    for end in (len..=x.ncols()).step_by(step) {
        out.push(&window_at(x, end, len), labels.label_at(end), labels.unit_id, end);
    }
    Ok(out)
}

/// The last `len` cycles of `x`; shorter engines are left-padded by
/// repeating their first cycle.
pub fn final_window(x: &DMatrix<f64>, len: usize) -> Result<Vec<f64>> {
    let n = x.ncols();
    if n == 0 || len == 0 {
        return Err(Error::InsufficientData { needed: 1, got: n });
    }
    if n >= len {
        return Ok(window_at(x, n, len));
    }
    let mut w = Vec::with_capacity(len * x.nrows());
    for _ in 0..(len - n) {
        w.extend(x.column(0).iter().copied());
    }
    for c in 0..n {
        w.extend(x.column(c).iter().copied());
    }
    Ok(w)
}

const WINDOWS_MAGIC: &[u8; 8] = b"RULWIN01";

/// JSON sidecar describing a persisted window tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSidecar {
    pub format: String,
    pub version: u32,
    pub shape: [usize; 3],
    pub dataset: String,
    pub seq_len: usize,
    pub n_features: usize,
    pub channels: Vec<String>,
    pub label_cap: usize,
    pub seed: u64,
}

impl WindowedDataset {
    pub fn sidecar(&self, dataset: &str, channels: Vec<String>, label_cap: usize, seed: u64) -> WindowSidecar {
        WindowSidecar {
            format: "rulcp-windows".into(),
            version: 1,
            shape: [self.len(), self.seq_len, self.n_features],
            dataset: dataset.into(),
            seq_len: self.seq_len,
            n_features: self.n_features,
            channels,
            label_cap,
            seed,
        }
    }

    /// Little-endian tensor: magic, `n, L, m` as u64, window data, targets,
    /// then `(unit u32, end_cycle u64)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + 8 * self.data.len() + 20 * self.len());
        b.extend_from_slice(WINDOWS_MAGIC);
        for v in [self.len(), self.seq_len, self.n_features] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.data.iter().chain(&self.targets) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &(u, c) in &self.provenance {
            b.extend_from_slice(&u.to_le_bytes());
            b.extend_from_slice(&(c as u64).to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<WindowedDataset> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != WINDOWS_MAGIC {
            return Err(Error::Integrity("not a window tensor file".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let seq_len = read_u64(&mut r)? as usize;
        let n_features = read_u64(&mut r)? as usize;
        let expected = n
            .checked_mul(seq_len * n_features + 1)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(12 * n))
            .ok_or_else(|| Error::Integrity("window tensor header overflows".into()))?;
        if r.len() != expected {
            return Err(Error::Integrity(format!(
                "window tensor payload is {} bytes, header implies {expected}",
                r.len()
            )));
        }
        let mut out = WindowedDataset::empty(seq_len, n_features);
        out.data = (0..n * seq_len * n_features).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        out.targets = (0..n).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        for _ in 0..n {
            let mut u = [0u8; 4];
            read_exact(&mut r, &mut u)?;
            out.provenance.push((u32::from_le_bytes(u), read_u64(&mut r)? as usize));
        }
        Ok(out)
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, sidecar: &WindowSidecar) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{stem}.bin"));
        let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(sidecar)? + "\n").map_err(|e| Error::io(&json, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(WindowedDataset, WindowSidecar)> {
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: WindowSidecar = serde_json::from_str(&text)?;
        let ds = WindowedDataset::from_bytes(&bytes)?;
        if sidecar.shape != [ds.len(), ds.seq_len, ds.n_features] {
            return Err(Error::Integrity(format!(
                "sidecar shape {:?} does not match tensor {:?}",
                sidecar.shape,
                [ds.len(), ds.seq_len, ds.n_features]
            )));
        }
        Ok((ds, sidecar))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Integrity("truncated binary payload".into()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn engine_116_upper_limit() {
        let s = piecewise_rul_labels(116, 344, Some(240), DEFAULT_RUL_CAP).unwrap();
        assert_eq!(s.y_max, 104);
        assert_eq!(s.label_at(1), 104.0);
        assert_eq!(s.label_at(240), 104.0);
        assert_eq!(s.label_at(241), 103.0);
        assert_eq!(s.label_at(344), 0.0);
    }

    #[test]
    fn fallback_uses_cap() {
        let s = piecewise_rul_labels(1, 150, None, 130).unwrap();
        assert_eq!(s.y_max, 130);
        assert_eq!(s.label_at(1), 130.0);
        assert_eq!(s.label_at(20), 130.0);
        assert_eq!(s.label_at(21), 129.0);
        assert_eq!(s.label_at(150), 0.0);
    }

    #[test]
    fn late_change_point_boundary() {
        let s = piecewise_rul_labels(1, 100, Some(99), 130).unwrap();
        assert_eq!(s.y_max, 1);
        assert!(s.labels[..99].iter().all(|&v| v == 1.0));
        assert_eq!(s.labels[99], 0.0);
    }

    #[test]
    fn invalid_change_point_rejected() {
        assert!(piecewise_rul_labels(1, 100, Some(100), 130).is_err());
        assert!(piecewise_rul_labels(1, 100, Some(0), 130).is_err());
        assert!(piecewise_rul_labels(1, 0, None, 130).is_err());
    }

    #[test]
    fn reference_for_fallback_engines() {
        assert_eq!(standardize_reference(300, Some(200), 130), 200);
        assert_eq!(standardize_reference(250, None, 130), 120);
        assert_eq!(standardize_reference(150, None, 130), 60);
        assert_eq!(standardize_reference(40, None, 130), 40);
    }

    #[test]
    fn drift_after_reference_grows() {
        let n = 100;
        let cp = 50;
        let x = DMatrix::from_fn(1, n, |_, j| {
            let wiggle = if j % 2 == 0 { 1e-3 } else { -1e-3 };
            if j < cp {
                5.0 + wiggle
            } else {
                5.0 + 0.1 * (j - cp + 1) as f64
            }
        });
        let (z, _) = piecewise_standardize(&x, cp).unwrap();
        assert!(z.columns(0, cp).iter().all(|v| v.abs() <= 1.0 + 1e-9));
        for j in cp + 1..n {
            assert!(z[(0, j)] > z[(0, j - 1)]);
        }
        assert!(z[(0, n - 1)] > 1000.0);
    }

    #[test]
    fn full_reference_is_plain_zscore() {
        let x = DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 3.0, 4.0, 6.0, 0.5, 0.1, 0.9, 0.3, 0.2]);
        let (z, _) = piecewise_standardize(&x, 5).unwrap();
        for row in z.row_iter() {
            let mean = row.sum() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_standardizer_whitens_pooled_segments() {
        let a = DMatrix::from_fn(2, 80, |i, j| (j as f64 * 0.37 + i as f64).sin() * 3.0 + 10.0);
        let b = DMatrix::from_fn(2, 120, |i, j| (j as f64 * 0.11).cos() * (1.0 + i as f64) - 4.0);
        let st = pooled_standardizer(&[(&a, 50), (&b, 70)]).unwrap();
        let za = st.apply(&a.columns(0, 50).into_owned()).unwrap();
        let zb = st.apply(&b.columns(0, 70).into_owned()).unwrap();
        for i in 0..2 {
            let vals: Vec<f64> = za.row(i).iter().chain(zb.row(i).iter()).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 1e-8 && (var - 1.0).abs() < 1e-8);
        }
        let again = st.apply(&a).unwrap();
        assert_eq!(again, st.apply(&a).unwrap());
    }

    fn ramp(m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |i, j| (100 * i + j + 1) as f64)
    }

    #[test]
    fn window_counts_and_targets() {
        let labels = piecewise_rul_labels(7, 60, Some(30), 130).unwrap();
        let w = sliding_windows(&ramp(3, 60), &labels, 50, 1).unwrap();
        assert_eq!(w.len(), 11);
        assert_eq!(w.provenance[0], (7, 50));
        assert_eq!(w.targets[10], 0.0);
        assert_eq!(w.targets[0], labels.label_at(50));
        // First window row is cycle 1, last row is cycle 50.
        assert_eq!(&w.window(0)[..3], &[1.0, 101.0, 201.0]);
        assert_eq!(&w.window(0)[147..], &[50.0, 150.0, 250.0]);

        let one = sliding_windows(&ramp(3, 50), &piecewise_rul_labels(1, 50, None, 130).unwrap(), 50, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.targets[0], 0.0);

        let short = sliding_windows(&ramp(3, 40), &piecewise_rul_labels(1, 40, None, 130).unwrap(), 50, 1).unwrap();
        assert!(short.is_empty());
    }

    #[test]
    fn final_window_pads_by_repeating_first_cycle() {
        let x = ramp(2, 3);
        let w = final_window(&x, 5).unwrap();
        assert_eq!(w, vec![1.0, 101.0, 1.0, 101.0, 1.0, 101.0, 2.0, 102.0, 3.0, 103.0]);
        let full = final_window(&ramp(2, 8), 3).unwrap();
        assert_eq!(full, vec![6.0, 106.0, 7.0, 107.0, 8.0, 108.0]);
    }

    #[test]
    fn tensor_round_trip_and_corruption() {
        let labels = piecewise_rul_labels(3, 20, Some(12), 130).unwrap();
        let w = sliding_windows(&ramp(2, 20), &labels, 5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let side = w.sidecar("FD001", vec!["s2".into(), "s3".into()], 130, 9);
        w.save(dir.path(), "train", &side).unwrap();
        let (back, side2) = WindowedDataset::load(dir.path(), "train").unwrap();
        assert_eq!(back, w);
        assert_eq!(side2, side);
        let mut bytes = w.to_bytes();
        bytes.pop();
        assert!(matches!(WindowedDataset::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn labels_have_one_slope_change(k_max in 2usize..400, frac in 0.01f64..0.99) {
            let cp = ((k_max as f64 * frac) as usize).clamp(1, k_max - 1);
            let s = piecewise_rul_labels(1, k_max, Some(cp), 130).unwrap();
            prop_assert!(s.labels.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(s.labels[k_max - 1], 0.0);
            let slopes: Vec<f64> = s.labels.windows(2).map(|w| w[1] - w[0]).collect();
            let changes = slopes.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert_eq!(changes, usize::from(cp > 1));
        }

        #[test]
        fn consecutive_windows_overlap(n in 10usize..60, len in 1usize..10) {
            let labels = piecewise_rul_labels(1, n, None, 130).unwrap();
            let x = ramp(2, n);
            let w = sliding_windows(&x, &labels, len, 1).unwrap();
            prop_assert_eq!(w.len(), n - len + 1);
            for i in 1..w.len() {
                prop_assert_eq!(&w.window(i - 1)[2..], &w.window(i)[..2 * (len - 1)]);
            }
        }
    }
}

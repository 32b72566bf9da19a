//! RMSE and the asymmetric prognostics score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score-function time constants for late (`d ≥ 0`) and early (`d < 0`) predictions.
pub const SF_OVER: f64 = 10.0;
pub const SF_UNDER: f64 = 13.0;

fn check_lengths(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Shape {
            expected: format!("{} truths for a nonempty prediction set", preds.len()),
            got: format!("{}", truths.len()),
        });
    }
    Ok(())
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Penalty for one error `d = predicted − true`.
pub fn score_term(d: f64) -> f64 {
    if d < 0.0 {
        (-d / SF_UNDER).exp() - 1.0
    } else {
        (d / SF_OVER).exp() - 1.0
    }
}

pub fn score_function(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    Ok(preds.iter().zip(truths).map(|(p, t)| score_term(p - t)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineScore {
    pub unit_id: u32,
    pub true_rul: f64,
    pub predicted_rul: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub rmse: f64,
    pub sf: f64,
    pub n: usize,
    pub cap: f64,
    pub per_engine: Vec<EngineScore>,
}

/// Score one prediction per unit after capping both sides at `cap`.
/// `predictions` and `truths` are `(unit_id, value)` pairs; every truth
/// needs exactly one prediction.
pub fn evaluate_predictions(
    dataset_id: &str,
    predictions: &[(u32, f64)],
    truths: &[(u32, f64)],
    cap: f64,
) -> Result<EvalReport> {
    use std::collections::BTreeMap;
    let mut by_unit = BTreeMap::new();
    for &(u, p) in predictions {
        if by_unit.insert(u, p).is_some() {
            return Err(Error::Integrity(format!("unit {u} has more than one prediction")));
        }
    }
    if truths.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut per_engine = Vec::with_capacity(truths.len());
    for &(u, t) in truths {
        let p = by_unit
            .remove(&u)
            .ok_or_else(|| Error::Integrity(format!("unit {u} has no prediction")))?;
        if !p.is_finite() {
            return Err(Error::Numeric(format!("unit {u}: non-finite prediction")));
        }
        let (t, p) = (t.min(cap), p.min(cap));
        per_engine.push(EngineScore {
            unit_id: u,
            true_rul: t,
            predicted_rul: p,
            d: p - t,
        });
    }
    if let Some(u) = by_unit.keys().next() {
        return Err(Error::Integrity(format!("prediction for unknown unit {u}")));
    }
    let preds: Vec<f64> = per_engine.iter().map(|e| e.predicted_rul).collect();
    let trues: Vec<f64> = per_engine.iter().map(|e| e.true_rul).collect();
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        rmse: rmse(&preds, &trues)?,
        sf: score_function(&preds, &trues)?,
        n: per_engine.len(),
        cap,
        per_engine,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit,true_rul,predicted_rul,d\n");
        for e in &self.per_engine {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", e.unit_id, e.true_rul, e.predicted_rul, e.d));
        }
        out
    }

    /// Recompute both metrics from the per-engine rows.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let p: Vec<f64> = self.per_engine.iter().map(|e| e.predicted_rul).collect();
        let t: Vec<f64> = self.per_engine.iter().map(|e| e.true_rul).collect();
        Ok((rmse(&p, &t)?, score_function(&p, &t)?))
    }

    /// One row of a method comparison table.
    pub fn table_row(&self, method: &str) -> String {
        format!("| {method} | {} | {:.2} | {:.2} |", self.dataset_id, self.rmse, self.sf)
    }
}

pub const TABLE_HEADER: &str = "| Method | Dataset | RMSE | SF |\n|---|---|---|---|";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, -4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn score_spot_values() {
        assert_eq!(score_function(&[5.0], &[5.0]).unwrap(), 0.0);
        assert!((score_term(10.0) - (1f64.exp() - 1.0)).abs() < 1e-12);
        assert!((score_term(-13.0) - (1f64.exp() - 1.0)).abs() < 1e-12);
        for k in 1..=50 {
            assert!(score_term(k as f64) > score_term(-(k as f64)));
        }
    }

    #[test]
    fn oracle_and_capping() {
        let truths = [(1, 20.0), (2, 150.0), (3, 90.0)];
        let perfect = evaluate_predictions("FD001", &truths, &truths, 130.0).unwrap();
        assert_eq!((perfect.rmse, perfect.sf), (0.0, 0.0));

        let preds = [(1, 20.0), (2, 200.0), (3, 90.0)];
        let r = evaluate_predictions("FD001", &preds, &truths, 130.0).unwrap();
        assert_eq!(r.per_engine[1].d, 0.0);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn constant_predictor_matches_brute_force() {
        let truths: Vec<(u32, f64)> = (1..=40).map(|u| (u, (u * 7 % 160) as f64)).collect();
        let preds: Vec<(u32, f64)> = truths.iter().map(|&(u, _)| (u, 130.0)).collect();
        let r = evaluate_predictions("FD002", &preds, &truths, 130.0).unwrap();
        let mut sse = 0.0;
        let mut sf = 0.0;
        for &(_, t) in &truths {
            let t = if t > 130.0 { 130.0 } else { t };
            let d = 130.0 - t;
            sse += d * d;
            sf += (d / 10.0).exp() - 1.0;
        }
        assert!((r.rmse - (sse / 40.0).sqrt()).abs() < 1e-12);
        assert!((r.sf - sf).abs() < 1e-9 * sf);
        assert_eq!(r.recompute().unwrap(), (r.rmse, r.sf));
    }

    #[test]
    fn missing_or_extra_predictions_are_integrity_errors() {
        let truths = [(1, 20.0), (2, 30.0)];
        let r = evaluate_predictions("FD001", &[(1, 20.0)], &truths, 130.0);
        assert!(matches!(r, Err(Error::Integrity(_))));
        let r = evaluate_predictions("FD001", &[(1, 20.0), (2, 1.0), (3, 1.0)], &truths, 130.0);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn report_serializations() {
        let truths = [(1, 20.0), (2, 30.0)];
        let r = evaluate_predictions("FD003", &[(2, 31.5), (1, 10.0)], &truths, 130.0).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.to_csv(), "unit,true_rul,predicted_rul,d\n1,20.0,10.0,-10.0\n2,30.0,31.5,1.5\n");
        assert!(r.table_row("ChangePoint-LSTM").starts_with("| ChangePoint-LSTM | FD003 |"));
    }

    proptest! {
        #[test]
        fn rmse_is_permutation_invariant(v in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), 1..40), seed in 0u64..1000) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1) % 97);
            let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let ts: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            prop_assert!((rmse(&p, &t).unwrap() - rmse(&ps, &ts).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn score_grows_with_error_magnitude(d in -80.0f64..80.0, step in 0.01f64..10.0) {
            let bigger = if d < 0.0 { d - step } else { d + step };
            prop_assert!(score_term(bigger) > score_term(d));
            prop_assert!(score_term(d) >= 0.0);
        }
    }
}

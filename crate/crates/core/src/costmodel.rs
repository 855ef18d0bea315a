//! Analytic compute cost: `c_v · selected + c_s · L + c_fixed` GFLOPs per query.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{efficiency_level, MetricsError};
use crate::types::SelectionMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    /// GFLOPs per selected clip (expensive backbone).
    pub c_v: f64,
    /// GFLOPs per previewed image (semantic index).
    pub c_s: f64,
    /// GFLOPs per query for selection plus localization.
    pub c_fixed: f64,
}

impl CostTable {
    pub const INTERNVIDEO: CostTable = CostTable {
        c_v: 2090.8,
        c_s: 2.3,
        c_fixed: 7.27,
    };
    pub const EGOVLP: CostTable = CostTable {
        c_v: 185.8,
        c_s: 2.3,
        c_fixed: 7.27,
    };
    pub const RELER: CostTable = CostTable {
        c_v: 220.9,
        c_s: 2.3,
        c_fixed: 215.5,
    };

    pub fn new(c_v: f64, c_s: f64, c_fixed: f64) -> Result<Self, CostError> {
        let t = CostTable { c_v, c_s, c_fixed };
        if [c_v, c_s, c_fixed].iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(t)
        } else {
            Err(CostError::Negative(t))
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("unknown cost preset {0:?} (expected internvideo, egovlp, reler or custom:c_v,c_s,c_fixed)")]
    UnknownPreset(String),
    #[error("cost constants must be finite and nonnegative: {0:?}")]
    Negative(CostTable),
    #[error("selected {selected} of {clips} clips")]
    OverSelected { selected: usize, clips: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl FromStr for CostTable {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "internvideo" => Ok(Self::INTERNVIDEO),
            "egovlp" => Ok(Self::EGOVLP),
            "reler" => Ok(Self::RELER),
            other => {
                let body = other
                    .strip_prefix("custom:")
                    .or_else(|| other.strip_prefix("custom(").and_then(|b| b.strip_suffix(')')))
                    .ok_or_else(|| CostError::UnknownPreset(s.to_string()))?;
                let vals: Vec<f64> = body
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CostError::UnknownPreset(s.to_string()))?;
                match vals[..] {
                    [c_v, c_s, c_fixed] => CostTable::new(c_v, c_s, c_fixed),
                    _ => Err(CostError::UnknownPreset(s.to_string())),
                }
            }
        }
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "custom:{},{},{}", self.c_v, self.c_s, self.c_fixed)
    }
}

/// GFLOPs for one query. `include_index = false` drops the preview term (AllClips).
pub fn instance_cost(selected: usize, clips: usize, table: &CostTable, include_index: bool) -> Result<f64, CostError> {
    if selected > clips {
        return Err(CostError::OverSelected { selected, clips });
    }
    let preview = if include_index { table.c_s * clips as f64 } else { 0.0 };
    Ok(table.c_v * selected as f64 + preview + table.c_fixed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mean_tflops: f64,
    pub eta: f64,
}

/// Mean TFLOPs and efficiency level over one mask per query.
pub fn dataset_cost_report(masks: &[SelectionMask], table: &CostTable, include_index: bool) -> Result<CostReport, CostError> {
    let selected: Vec<usize> = masks.iter().map(|m| m.count()).collect();
    let totals: Vec<usize> = masks.iter().map(|m| m.len()).collect();
    let eta = efficiency_level(&selected, &totals)?;
    let mut sum = 0.0;
    for (&s, &t) in selected.iter().zip(&totals) {
        sum += instance_cost(s, t, table, include_index)?;
    }
    Ok(CostReport {
        mean_tflops: sum / masks.len() as f64 / 1000.0,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn internvideo_partial_selection() {
        let c = instance_cost(13, 128, &CostTable::INTERNVIDEO, true).unwrap();
        // 2090.8·13 + 2.3·128 + 7.27
        assert_relative_eq!(c, 27_180.4 + 294.4 + 7.27, epsilon = 1e-9);
        assert_relative_eq!(c, 27_482.07, epsilon = 1e-9);
    }

    #[test]
    fn zero_selection_floor() {
        let c = instance_cost(0, 128, &CostTable::EGOVLP, true).unwrap();
        assert_relative_eq!(c, 2.3 * 128.0 + 7.27, epsilon = 1e-12);
        assert!(instance_cost(129, 128, &CostTable::EGOVLP, true).is_err());
    }

    #[test]
    fn affine_and_increasing() {
        let t = CostTable::RELER;
        let costs: Vec<f64> = (0..=16).map(|k| instance_cost(k, 16, &t, true).unwrap()).collect();
        for w in costs.windows(2) {
            assert!(w[1] > w[0]);
            assert_relative_eq!(w[1] - w[0], t.c_v, epsilon = 1e-9);
        }
    }

    #[test]
    fn presets_parse() {
        assert_eq!("InternVideo".parse::<CostTable>().unwrap(), CostTable::INTERNVIDEO);
        assert_eq!("egovlp".parse::<CostTable>().unwrap(), CostTable::EGOVLP);
        assert_eq!("reler".parse::<CostTable>().unwrap(), CostTable::RELER);
        assert_eq!("custom:1,2,3".parse::<CostTable>().unwrap(), CostTable::new(1.0, 2.0, 3.0).unwrap());
        assert_eq!("custom(1, 2, 3)".parse::<CostTable>().unwrap(), CostTable::new(1.0, 2.0, 3.0).unwrap());
        let round: CostTable = CostTable::RELER.to_string().parse().unwrap();
        assert_eq!(round, CostTable::RELER);
        assert!("custom:1,2".parse::<CostTable>().is_err());
        assert!("custom:1,-2,3".parse::<CostTable>().is_err());
        assert!("slowfast".parse::<CostTable>().is_err());
    }

    #[test]
    fn dataset_report() {
        let t = CostTable::INTERNVIDEO;
        let zeros = vec![SelectionMask::zeros(128); 3];
        let r = dataset_cost_report(&zeros, &t, true).unwrap();
        assert_eq!(r.eta, 100.0);
        assert_relative_eq!(r.mean_tflops, (2.3 * 128.0 + 7.27) / 1000.0, epsilon = 1e-12);

        let ones = vec![SelectionMask::ones(128); 2];
        let r = dataset_cost_report(&ones, &t, true).unwrap();
        assert_eq!(r.eta, 0.0);

        let full = vec![SelectionMask::from_indices(128, 0..64)];
        let half = vec![SelectionMask::from_indices(128, 0..32)];
        let floor = instance_cost(0, 128, &t, true).unwrap() / 1000.0;
        let a = dataset_cost_report(&full, &t, true).unwrap().mean_tflops - floor;
        let b = dataset_cost_report(&half, &t, true).unwrap().mean_tflops - floor;
        assert_relative_eq!(a, 2.0 * b, epsilon = 1e-12);
        assert!(dataset_cost_report(&[], &t, true).is_err());
    }
}

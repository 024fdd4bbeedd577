//! Grid search over (H, M, γ): fit on the training slice, score forward
//! forecasts on the validation slice, pick the minimizer.
//!
//! Tuples are evaluated in parallel over a shared read-only dataset; pairwise
//! feature distances are computed once so each Gaussian tuple only pays for
//! an elementwise exponential. Results are aggregated order-independently:
//! the winner is the lexicographic minimum of (validation RMSE, H, M, γ), so
//! permuting the grid cannot change the outcome. The best model is the
//! train-fitted one; no refit on train+validation happens before test
//! evaluation.

use crate::baselines::{mae, rmse};
use crate::dataset::TimeSeriesDataset;
use crate::feasibility::{fit_bounds_with_gram, BoundsFit};
use crate::forward::forecast_with_grams;
use crate::kernels::{
    gaussian_gram_from_sq_dists, gram, pairwise_sq_dists, GramMatrix, KernelSpec,
};
use crate::optimality::{fit_utilities_with_gram, BlockConfig, UtilityFit};
use crate::par;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("empty hyper-parameter grid")]
    EmptyGrid,
    #[error("hyper-parameter out of range: {0}")]
    BadGrid(String),
    #[error("every grid tuple failed to fit")]
    AllTuplesFailed,
    #[error("dataset error: {0}")]
    Dataset(String),
}

/// Candidate hyper-parameter values. `H ⊂ [0, 1)`, `M ⊂ [0, 1]`, `γ > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub h_values: Vec<f64>,
    pub m_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
}

impl HyperGrid {
    pub fn validate(&self) -> Result<(), TuneError> {
        if self.h_values.is_empty() || self.m_values.is_empty() || self.gamma_values.is_empty() {
            return Err(TuneError::EmptyGrid);
        }
        for &h in &self.h_values {
            if !(0.0..1.0).contains(&h) {
                return Err(TuneError::BadGrid(format!("H = {h}")));
            }
        }
        for &m in &self.m_values {
            if !(0.0..=1.0).contains(&m) {
                return Err(TuneError::BadGrid(format!("M = {m}")));
            }
        }
        for &g in &self.gamma_values {
            if !(g > 0.0 && g.is_finite()) {
                return Err(TuneError::BadGrid(format!("gamma = {g}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.h_values.len() * self.m_values.len() * self.gamma_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for HyperGrid {
    /// A compact grid that brackets the interesting region: moderate-to-wide
    /// bound coverage, light ridge, two kernel scales.
    fn default() -> Self {
        HyperGrid {
            h_values: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            m_values: vec![0.0001, 0.001],
            gamma_values: vec![0.1, 0.01],
        }
    }
}

/// Kernel family per estimation stage; the Gaussian scale comes from the
/// grid's γ component, so it is not stored here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningKernels {
    pub bounds: KernelFamily,
    pub utility: KernelFamily,
}

impl TuningKernels {
    /// Gaussian bounds with linear utilities: the combination with the best
    /// accuracy/simplicity trade-off.
    pub fn standard() -> Self {
        TuningKernels {
            bounds: KernelFamily::Gaussian,
            utility: KernelFamily::Linear,
        }
    }

    /// Linear kernels in both stages.
    pub fn linear() -> Self {
        TuningKernels {
            bounds: KernelFamily::Linear,
            utility: KernelFamily::Linear,
        }
    }
}

/// Outcome of one grid tuple. `gamma` is 0 when no Gaussian stage consumed it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneEntry {
    pub h: f64,
    pub m: f64,
    pub gamma: f64,
    pub rmse_val: f64,
    pub mae_val: f64,
    pub status: String,
}

pub struct TuneResult {
    pub entries: Vec<TuneEntry>,
    pub best_index: usize,
    pub bounds_fit: BoundsFit,
    pub utility_fit: UtilityFit,
}

impl TuneResult {
    pub fn best(&self) -> &TuneEntry {
        &self.entries[self.best_index]
    }

    /// Report CSV: `H,M,gamma,rmse_val,mae_val,status`.
    pub fn write_report_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "H,M,gamma,rmse_val,mae_val,status")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.h, e.m, e.gamma, e.rmse_val, e.mae_val, e.status
            )?;
        }
        Ok(())
    }
}

/// Exhaustive, deterministic grid search.
pub fn grid_search(
    ds: &TimeSeriesDataset,
    grid: &HyperGrid,
    cfg: &BlockConfig,
    kernels: &TuningKernels,
) -> Result<TuneResult, TuneError> {
    grid.validate()?;
    let train = ds.train_indices();
    let val = ds.val_indices();
    if train.is_empty() || val.is_empty() {
        return Err(TuneError::Dataset("empty train or validation slice".into()));
    }
    let train_feats = ds
        .feature_rows(&train)
        .map_err(|e| TuneError::Dataset(e.to_string()))?;
    let val_feats = ds
        .feature_rows(&val)
        .map_err(|e| TuneError::Dataset(e.to_string()))?;
    let train_prices: Vec<f64> = train.iter().map(|&t| ds.price()[t]).collect();
    let train_powers: Vec<f64> = train.iter().map(|&t| ds.power()[t]).collect();
    let val_prices: Vec<f64> = val.iter().map(|&t| ds.price()[t]).collect();
    let val_powers: Vec<f64> = val.iter().map(|&t| ds.power()[t]).collect();

    // Shared precomputations across tuples.
    let needs_gaussian =
        kernels.bounds == KernelFamily::Gaussian || kernels.utility == KernelFamily::Gaussian;
    let sq_tr = if needs_gaussian {
        Some(pairwise_sq_dists(&train_feats, &train_feats).map_err(to_tune_err)?)
    } else {
        None
    };
    let sq_val = if needs_gaussian {
        Some(pairwise_sq_dists(&val_feats, &train_feats).map_err(to_tune_err)?)
    } else {
        None
    };
    let linear_needed =
        kernels.bounds == KernelFamily::Linear || kernels.utility == KernelFamily::Linear;
    let (lin_tr, lin_val) = if linear_needed {
        (
            Some(gram(&train_feats, &train_feats, &KernelSpec::Linear).map_err(to_tune_err)?),
            Some(gram(&val_feats, &train_feats, &KernelSpec::Linear).map_err(to_tune_err)?),
        )
    } else {
        (None, None)
    };

    // Enumerate tuples in deterministic nested order. Without a Gaussian
    // stage γ is inert; collapse it to a single labelled-0 pass.
    let gammas: Vec<f64> = if needs_gaussian {
        grid.gamma_values.clone()
    } else {
        vec![0.0]
    };
    let mut tuples = Vec::new();
    for &h in &grid.h_values {
        for &m in &grid.m_values {
            for &g in &gammas {
                tuples.push((h, m, g));
            }
        }
    }

    struct TupleFit {
        entry: TuneEntry,
        fits: Option<(BoundsFit, UtilityFit)>,
    }

    let evaluated: Vec<TupleFit> = par::map(tuples, |(h, m, gamma)| {
        let run = || -> Result<(BoundsFit, UtilityFit, f64, f64), String> {
            let (bounds_spec, g_b_tr, g_b_val): (KernelSpec, GramMatrix, GramMatrix) =
                match kernels.bounds {
                    KernelFamily::Gaussian => {
                        let spec = KernelSpec::gaussian(gamma).map_err(|e| e.to_string())?;
                        let tr = gaussian_gram_from_sq_dists(sq_tr.as_ref().unwrap(), gamma)
                            .map_err(|e| e.to_string())?;
                        let va = gaussian_gram_from_sq_dists(sq_val.as_ref().unwrap(), gamma)
                            .map_err(|e| e.to_string())?;
                        (spec, tr, va)
                    }
                    KernelFamily::Linear => (
                        KernelSpec::Linear,
                        lin_tr.clone().unwrap(),
                        lin_val.clone().unwrap(),
                    ),
                };
            let (utility_spec, g_u_tr, g_u_val): (KernelSpec, GramMatrix, GramMatrix) =
                match kernels.utility {
                    KernelFamily::Gaussian => {
                        let spec = KernelSpec::gaussian(gamma).map_err(|e| e.to_string())?;
                        let tr = gaussian_gram_from_sq_dists(sq_tr.as_ref().unwrap(), gamma)
                            .map_err(|e| e.to_string())?;
                        let va = gaussian_gram_from_sq_dists(sq_val.as_ref().unwrap(), gamma)
                            .map_err(|e| e.to_string())?;
                        (spec, tr, va)
                    }
                    KernelFamily::Linear => (
                        KernelSpec::Linear,
                        lin_tr.clone().unwrap(),
                        lin_val.clone().unwrap(),
                    ),
                };
            let bounds = fit_bounds_with_gram(
                &train_feats,
                &g_b_tr,
                &train_powers,
                h,
                m,
                &bounds_spec,
            )
            .map_err(|e| e.to_string())?;
            let utilities = fit_utilities_with_gram(
                &train_feats,
                &g_u_tr,
                &train_prices,
                &train_powers,
                &bounds.train_bounds,
                cfg,
                &utility_spec,
            )
            .map_err(|e| e.to_string())?;
            let forecasts = forecast_with_grams(
                &bounds.model,
                &utilities.model,
                cfg,
                &val_prices,
                &g_b_val,
                &g_u_val,
            )
            .map_err(|e| e.to_string())?;
            let r = rmse(&val_powers, &forecasts).map_err(|e| e.to_string())?;
            let a = mae(&val_powers, &forecasts).map_err(|e| e.to_string())?;
            Ok((bounds, utilities, r, a))
        };
        match run() {
            Ok((bounds, utilities, r, a)) => TupleFit {
                entry: TuneEntry {
                    h,
                    m,
                    gamma,
                    rmse_val: r,
                    mae_val: a,
                    status: "ok".into(),
                },
                fits: Some((bounds, utilities)),
            },
            Err(msg) => TupleFit {
                entry: TuneEntry {
                    h,
                    m,
                    gamma,
                    rmse_val: f64::INFINITY,
                    mae_val: f64::INFINITY,
                    status: msg.replace(',', ";"),
                },
                fits: None,
            },
        }
    });

    // Lexicographic minimum of (rmse, H, M, γ); ties go to the smaller tuple.
    let mut best: Option<usize> = None;
    for (i, t) in evaluated.iter().enumerate() {
        if t.fits.is_none() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &evaluated[b].entry;
                let cand = &t.entry;
                (cand.rmse_val, cand.h, cand.m, cand.gamma)
                    < (cur.rmse_val, cur.h, cur.m, cur.gamma)
            }
        };
        if better {
            best = Some(i);
        }
    }
    let best_index = best.ok_or(TuneError::AllTuplesFailed)?;
    let mut evaluated = evaluated;
    let (bounds_fit, utility_fit) = evaluated[best_index].fits.take().expect("best tuple fitted");
    let entries = evaluated.into_iter().map(|t| t.entry).collect();
    Ok(TuneResult {
        entries,
        best_index,
        bounds_fit,
        utility_fit,
    })
}

fn to_tune_err(e: crate::kernels::KernelError) -> TuneError {
    TuneError::BadGrid(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_features, load_csv_str, CsvSchema, FeatureConfig};

    fn synthetic_dataset(rows: usize) -> TimeSeriesDataset {
        let mut csv = String::from("timestamp,price_eur_mwh,power_kw\n");
        for i in 0..rows {
            let ts = chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap()
                + chrono::Duration::hours(i as i64);
            let price = 50.0 + 20.0 * ((i as f64) * 0.26).sin();
            // Price-responsive load: high price → low power.
            let power = (120.0 - price).max(0.0);
            csv.push_str(&format!(
                "{},{price},{power}\n",
                ts.format("%Y-%m-%dT%H:%M:%S")
            ));
        }
        let ds = load_csv_str(&csv, &CsvSchema::default()).unwrap();
        let cfg = FeatureConfig {
            price_lags: vec![1, 2],
            power_lags: vec![1],
            availability_lags: vec![],
            hour_encoding: false,
        };
        build_features(&ds, &cfg).unwrap()
    }

    #[test]
    fn single_tuple_grid_selects_it() {
        let ds = synthetic_dataset(120);
        let grid = HyperGrid {
            h_values: vec![0.8],
            m_values: vec![0.001],
            gamma_values: vec![0.1],
        };
        let cfg = BlockConfig::new(3, 0).unwrap();
        let result = grid_search(&ds, &grid, &cfg, &TuningKernels::standard()).unwrap();
        assert_eq!(result.entries.len(), 1);
        assert_eq!(result.best_index, 0);
        assert_eq!(result.best().status, "ok");
        assert!(result.best().rmse_val.is_finite());
    }

    #[test]
    fn tie_break_prefers_smaller_tuple() {
        // Linear kernels make γ inert, so entries differing only in M with
        // M tiny typically score identically; the smaller tuple must win.
        let ds = synthetic_dataset(100);
        let grid = HyperGrid {
            h_values: vec![0.7],
            m_values: vec![0.0001],
            gamma_values: vec![0.1, 0.01],
        };
        let cfg = BlockConfig::new(2, 0).unwrap();
        let result = grid_search(&ds, &grid, &cfg, &TuningKernels::linear()).unwrap();
        // γ collapsed to one labelled pass for all-linear kernels.
        assert_eq!(result.entries.len(), 1);
        assert_eq!(result.entries[0].gamma, 0.0);
    }

    #[test]
    fn permuted_grid_gives_same_best_tuple() {
        let ds = synthetic_dataset(140);
        let cfg = BlockConfig::new(3, 0).unwrap();
        let grid_a = HyperGrid {
            h_values: vec![0.6, 0.9],
            m_values: vec![0.001, 0.0001],
            gamma_values: vec![0.1],
        };
        let grid_b = HyperGrid {
            h_values: vec![0.9, 0.6],
            m_values: vec![0.0001, 0.001],
            gamma_values: vec![0.1],
        };
        let a = grid_search(&ds, &grid_a, &cfg, &TuningKernels::standard()).unwrap();
        let b = grid_search(&ds, &grid_b, &cfg, &TuningKernels::standard()).unwrap();
        let ea = a.best();
        let eb = b.best();
        assert_eq!((ea.h, ea.m, ea.gamma), (eb.h, eb.m, eb.gamma));
        assert_eq!(ea.rmse_val.to_bits(), eb.rmse_val.to_bits());
    }

    #[test]
    fn best_has_minimal_rmse() {
        let ds = synthetic_dataset(140);
        let cfg = BlockConfig::new(3, 0).unwrap();
        let grid = HyperGrid {
            h_values: vec![0.5, 0.7, 0.9],
            m_values: vec![0.0005],
            gamma_values: vec![0.1],
        };
        let result = grid_search(&ds, &grid, &cfg, &TuningKernels::standard()).unwrap();
        let best_rmse = result.best().rmse_val;
        for e in &result.entries {
            assert!(best_rmse <= e.rmse_val);
        }
    }

    #[test]
    fn report_csv_header() {
        let ds = synthetic_dataset(100);
        let cfg = BlockConfig::new(2, 0).unwrap();
        let grid = HyperGrid {
            h_values: vec![0.8],
            m_values: vec![0.001],
            gamma_values: vec![0.1],
        };
        let result = grid_search(&ds, &grid, &cfg, &TuningKernels::standard()).unwrap();
        let mut buf = Vec::new();
        result.write_report_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("H,M,gamma,rmse_val,mae_val,status\n"));
    }

    #[test]
    fn rejects_bad_grid() {
        let grid = HyperGrid {
            h_values: vec![1.0],
            m_values: vec![0.001],
            gamma_values: vec![0.1],
        };
        assert!(grid.validate().is_err());
        let empty = HyperGrid {
            h_values: vec![],
            m_values: vec![0.1],
            gamma_values: vec![0.1],
        };
        assert!(matches!(empty.validate(), Err(TuneError::EmptyGrid)));
    }
}

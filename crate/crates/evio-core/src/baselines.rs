//! Reference forecasters and error metrics: hourly/daily/weekly persistence
//! and a closed-form kernel-ridge regression.

use crate::dataset::TimeSeriesDataset;
use crate::kernels::{gram, KernelError, KernelSpec};
use crate::linalg::DenseChol;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("insufficient history: period {period} needs lag {lag}")]
    InsufficientHistory { period: usize, lag: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ridge system is singular (rank-deficient kernel with zero penalty)")]
    SingularSystem,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Persistence forecast: `p̂_t = p′_{t−lag}` for each requested period.
/// Lags of 1, 24, and 168 hours give the hourly/daily/weekly baselines.
pub fn naive_forecast(
    ds: &TimeSeriesDataset,
    lag: usize,
    periods: &[usize],
) -> Result<Vec<f64>, BaselineError> {
    periods
        .iter()
        .map(|&t| {
            t.checked_sub(lag)
                .map(|s| ds.power()[s])
                .ok_or(BaselineError::InsufficientHistory { period: t, lag })
        })
        .collect()
}

/// Kernel-ridge regression in dual form. The system is scaled as
/// `(K + δ·n·I) w = y − ȳ` with `n` the training size, so the penalty is
/// sample-size independent; the training mean is added back at prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KrrModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub delta: f64,
    pub kernel: KernelSpec,
    pub train_features: Vec<Vec<f64>>,
}

pub fn krr_fit(
    ds: &TimeSeriesDataset,
    delta: f64,
    kspec: &KernelSpec,
) -> Result<KrrModel, BaselineError> {
    let train = ds.train_indices();
    if train.is_empty() {
        return Err(BaselineError::EmptySeries);
    }
    let feats = ds
        .feature_rows(&train)
        .map_err(|_| BaselineError::EmptySeries)?;
    let targets: Vec<f64> = train.iter().map(|&t| ds.power()[t]).collect();
    krr_fit_features(&feats, &targets, delta, kspec)
}

pub fn krr_fit_features(
    train_features: &[Vec<f64>],
    targets: &[f64],
    delta: f64,
    kspec: &KernelSpec,
) -> Result<KrrModel, BaselineError> {
    let n = targets.len();
    if n == 0 || train_features.len() != n {
        return Err(BaselineError::EmptySeries);
    }
    let g = gram(train_features, train_features, kspec)?;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = g.get(i, j);
        }
        a[i * n + i] += delta * n as f64;
    }
    let intercept = targets.iter().sum::<f64>() / n as f64;
    let mut w: Vec<f64> = targets.iter().map(|y| y - intercept).collect();
    let chol = DenseChol::factor(n, &a).map_err(|_| BaselineError::SingularSystem)?;
    chol.solve_in_place(&mut w);
    Ok(KrrModel {
        weights: w,
        intercept,
        delta,
        kernel: *kspec,
        train_features: train_features.to_vec(),
    })
}

impl KrrModel {
    pub fn predict(&self, z: &[f64]) -> Result<f64, BaselineError> {
        let mut out = self.intercept;
        for (tau, feat) in self.train_features.iter().enumerate() {
            out += self.weights[tau] * crate::kernels::kernel_eval(z, feat, &self.kernel)?;
        }
        Ok(out)
    }

    pub fn predict_many(&self, features: &[Vec<f64>]) -> Result<Vec<f64>, BaselineError> {
        let g = gram(features, &self.train_features, &self.kernel)?;
        Ok((0..features.len())
            .map(|i| {
                self.intercept
                    + g.row(i)
                        .iter()
                        .zip(&self.weights)
                        .map(|(k, w)| k * w)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// Root mean square error [kW].
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64, BaselineError> {
    check_pair(actual, predicted)?;
    let n = actual.len() as f64;
    let sq = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>();
    Ok((sq / n).sqrt())
}

/// Mean absolute error [kW].
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64, BaselineError> {
    check_pair(actual, predicted)?;
    let n = actual.len() as f64;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).abs())
        .sum::<f64>()
        / n)
}

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<(), BaselineError> {
    if actual.is_empty() {
        return Err(BaselineError::EmptySeries);
    }
    if actual.len() != predicted.len() {
        return Err(BaselineError::LengthMismatch(
            actual.len(),
            predicted.len(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_csv_str, CsvSchema};
    use proptest::prelude::*;

    fn series_csv(values: &[f64]) -> String {
        let mut s = String::from("timestamp,price_eur_mwh,power_kw\n");
        for (i, v) in values.iter().enumerate() {
            let ts = chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap()
                + chrono::Duration::hours(i as i64);
            s.push_str(&format!("{},{},{v}\n", ts.format("%Y-%m-%dT%H:%M:%S"), 30.0));
        }
        s
    }

    #[test]
    fn lag_one_shifts_by_one() {
        let ds = load_csv_str(&series_csv(&[5.0, 7.0, 9.0]), &CsvSchema::default()).unwrap();
        let out = naive_forecast(&ds, 1, &[2]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn daily_lag_is_exact_on_periodic_series() {
        let values: Vec<f64> = (0..96).map(|i| (i % 24) as f64 * 3.0).collect();
        let ds = load_csv_str(&series_csv(&values), &CsvSchema::default()).unwrap();
        let periods: Vec<usize> = (24..96).collect();
        let out = naive_forecast(&ds, 24, &periods).unwrap();
        let actual: Vec<f64> = periods.iter().map(|&t| values[t]).collect();
        assert_eq!(rmse(&actual, &out).unwrap(), 0.0);
    }

    #[test]
    fn weekly_lag_needs_history() {
        let ds = load_csv_str(&series_csv(&[1.0; 48]), &CsvSchema::default()).unwrap();
        assert!(matches!(
            naive_forecast(&ds, 168, &[47]),
            Err(BaselineError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn krr_interpolates_with_zero_penalty() {
        let feats: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..8).map(|i| 10.0 + (i as f64).sin() * 4.0).collect();
        let kspec = KernelSpec::gaussian(1.0).unwrap();
        let model = krr_fit_features(&feats, &targets, 0.0, &kspec).unwrap();
        for (z, y) in feats.iter().zip(&targets) {
            assert!((model.predict(z).unwrap() - y).abs() < 1e-6);
        }
    }

    #[test]
    fn krr_shrinks_to_training_mean() {
        let feats: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let targets = vec![4.0, 8.0, 2.0, 10.0, 6.0, 0.0];
        let mean = 5.0;
        let kspec = KernelSpec::gaussian(0.5).unwrap();
        let model = krr_fit_features(&feats, &targets, 1e6, &kspec).unwrap();
        for z in &feats {
            assert!((model.predict(z).unwrap() - mean).abs() < 1e-3);
        }
    }

    #[test]
    fn krr_matches_manual_three_point_solve() {
        // Linear kernel on scalars 1, 2, 3 with δ = 0.1:
        // K = [[1,2,3],[2,4,6],[3,6,9]], system (K + 0.3 I) w = y − ȳ.
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        let targets = vec![2.0, 3.0, 5.0];
        let model = krr_fit_features(&feats, &targets, 0.1, &KernelSpec::linear()).unwrap();
        // Manual Gaussian elimination of the 3×3 system.
        let mut a = [
            [1.3, 2.0, 3.0],
            [2.0, 4.3, 6.0],
            [3.0, 6.0, 9.3],
        ];
        let ybar = 10.0 / 3.0;
        let mut b = [2.0 - ybar, 3.0 - ybar, 5.0 - ybar];
        for col in 0..3 {
            for row in col + 1..3 {
                let f = a[row][col] / a[col][col];
                for k in col..3 {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut w = [0.0; 3];
        for row in (0..3).rev() {
            let mut s = b[row];
            for k in row + 1..3 {
                s -= a[row][k] * w[k];
            }
            w[row] = s / a[row][row];
        }
        for i in 0..3 {
            assert!(
                (model.weights[i] - w[i]).abs() < 1e-8,
                "weight {i}: {} vs {}",
                model.weights[i],
                w[i]
            );
        }
    }

    #[test]
    fn singular_system_reported() {
        // Duplicate features with a linear kernel make K rank-deficient.
        let feats = vec![vec![1.0], vec![1.0], vec![2.0]];
        let targets = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            krr_fit_features(&feats, &targets, 0.0, &KernelSpec::linear()),
            Err(BaselineError::SingularSystem)
        ));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert_eq!(rmse(&[5.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(mae(&[5.0], &[3.0]).unwrap(), 2.0);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(rmse(&[], &[]), Err(BaselineError::EmptySeries)));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(BaselineError::LengthMismatch(1, 2))
        ));
    }

    proptest! {
        /// RMSE dominates MAE; they agree exactly when all absolute errors
        /// are equal.
        #[test]
        fn rmse_at_least_mae(
            pairs in proptest::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..50)
        ) {
            let (actual, predicted): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = rmse(&actual, &predicted).unwrap();
            let m = mae(&actual, &predicted).unwrap();
            prop_assert!(r >= m - 1e-12);
        }
    }
}

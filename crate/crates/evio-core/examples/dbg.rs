use evio_core::dataset::{build_features, load_csv_str, CsvSchema, FeatureConfig};
use evio_core::feasibility::fit_bounds_with_gram;
use evio_core::kernels::{gram, KernelSpec};

fn main() {
    let rows = 120;
    let mut csv = String::from("timestamp,price_eur_mwh,power_kw\n");
    for i in 0..rows {
        let ts = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
            + chrono::Duration::hours(i as i64);
        let price = 50.0 + 20.0 * ((i as f64) * 0.26).sin();
        let power = (120.0f64 - price).max(0.0);
        csv.push_str(&format!("{},{price},{power}\n", ts.format("%Y-%m-%dT%H:%M:%S")));
    }
    let ds = load_csv_str(&csv, &CsvSchema::default()).unwrap();
    let fcfg = FeatureConfig {
        price_lags: vec![1, 2],
        power_lags: vec![1],
        availability_lags: vec![],
        hour_encoding: false,
    };
    let ds = build_features(&ds, &fcfg).unwrap();
    let train = ds.train_indices();
    let feats = ds.feature_rows(&train).unwrap();
    let powers: Vec<f64> = train.iter().map(|&t| ds.power()[t]).collect();
    let kspec = KernelSpec::gaussian(0.1).unwrap();
    let g = gram(&feats, &feats, &kspec).unwrap();
    match fit_bounds_with_gram(&feats, &g, &powers, 0.8, 0.001, &kspec) {
        Ok(f) => println!("bounds ok, obj {} iters {}", f.objective, f.solver_iterations),
        Err(e) => println!("bounds err {e}"),
    }
}

use evio_core::linalg::SkylineMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 200;
    // Random SPD: A = B Bᵀ + n I
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n { s += b[i][k] * b[j][k]; }
            a[i][j] = s + if i == j { n as f64 } else { 0.0 };
        }
    }
    let mut sky = SkylineMatrix::new((0..n).map(|_| 0).collect());
    for i in 0..n { for j in 0..=i { sky.set(i, j, a[i][j]); } }
    sky.cholesky_in_place().unwrap();
    let x_true: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
    let mut rhs = vec![0.0; n];
    for i in 0..n { for j in 0..n { rhs[i] += a[i][j] * x_true[j]; } }
    sky.solve_in_place(&mut rhs);
    let err = rhs.iter().zip(&x_true).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    println!("skyline dense n={n} solve error: {err:.3e}");
}

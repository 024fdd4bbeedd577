//! Randomized cross-checks of the interior-point solver against independent
//! oracles: brute-force vertex enumeration for LPs and closed-form unconstrained
//! minima for box QPs.

use evio_core::linalg::CsrBuilder;
use evio_core::qpsolve::{solve, ConvexProgram, Quadratic, SolveOptions, SolveStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Returns None when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

struct LpInstance {
    n: usize,
    c: Vec<f64>,
    rows: Vec<(Vec<f64>, f64)>, // a·x ≤ b
    eqs: Vec<(Vec<f64>, f64)>,  // a·x = b
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl LpInstance {
    fn feasible(&self, x: &[f64], tol: f64) -> bool {
        for j in 0..self.n {
            if x[j] < self.lower[j] - tol || x[j] > self.upper[j] + tol {
                return false;
            }
        }
        for (a, b) in &self.rows {
            let ax: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
            if ax > b + tol {
                return false;
            }
        }
        for (a, b) in &self.eqs {
            let ax: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
            if (ax - b).abs() > tol {
                return false;
            }
        }
        true
    }

    /// Enumerate vertices: every choice of n active constraints among the
    /// inequality rows and bounds (equalities always active).
    fn best_vertex(&self) -> Option<f64> {
        let n = self.n;
        // Build the pool of candidate active constraints.
        let mut pool: Vec<(Vec<f64>, f64)> = Vec::new();
        for (a, b) in &self.rows {
            pool.push((a.clone(), *b));
        }
        for j in 0..n {
            let mut a = vec![0.0; n];
            a[j] = -1.0;
            pool.push((a.clone(), -self.lower[j]));
            let mut a2 = vec![0.0; n];
            a2[j] = 1.0;
            pool.push((a2, self.upper[j]));
        }
        let need = n - self.eqs.len();
        let mut best: Option<f64> = None;
        let mut choice = Vec::new();
        self.recurse(&pool, 0, need, &mut choice, &mut best);
        best
    }

    fn recurse(
        &self,
        pool: &[(Vec<f64>, f64)],
        start: usize,
        need: usize,
        choice: &mut Vec<usize>,
        best: &mut Option<f64>,
    ) {
        if need == 0 {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (ea, eb) in &self.eqs {
                a.push(ea.clone());
                b.push(*eb);
            }
            for &i in choice.iter() {
                a.push(pool[i].0.clone());
                b.push(pool[i].1);
            }
            if let Some(x) = solve_dense(a, b) {
                if self.feasible(&x, 1e-7) {
                    let obj: f64 = self.c.iter().zip(&x).map(|(c, x)| c * x).sum();
                    match best {
                        Some(v) if *v <= obj => {}
                        _ => *best = Some(obj),
                    }
                }
            }
            return;
        }
        if start >= pool.len() {
            return;
        }
        for i in start..pool.len() {
            choice.push(i);
            self.recurse(pool, i + 1, need - 1, choice, best);
            choice.pop();
        }
    }

    fn to_program(&self) -> ConvexProgram {
        let mut p = ConvexProgram::new(self.n);
        p.linear = self.c.clone();
        p.lower = self.lower.clone();
        p.upper = self.upper.clone();
        let mut g = CsrBuilder::new(self.n);
        for (a, _) in &self.rows {
            let entries: Vec<(usize, f64)> =
                a.iter().enumerate().map(|(j, &v)| (j, v)).collect();
            g.push_row(&entries);
        }
        p.ineq = g.build();
        p.ineq_rhs = self.rows.iter().map(|(_, b)| *b).collect();
        let mut e = CsrBuilder::new(self.n);
        for (a, _) in &self.eqs {
            let entries: Vec<(usize, f64)> =
                a.iter().enumerate().map(|(j, &v)| (j, v)).collect();
            e.push_row(&entries);
        }
        p.eq = e.build();
        p.eq_rhs = self.eqs.iter().map(|(_, b)| *b).collect();
        p
    }
}

fn random_lp(rng: &mut ChaCha8Rng) -> LpInstance {
    let n = rng.gen_range(2..=8usize);
    let lower: Vec<f64> = (0..n).map(|_| -rng.gen_range(1.0..5.0)).collect();
    let upper: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..5.0)).collect();
    // Interior point used to guarantee feasibility.
    let x0: Vec<f64> = (0..n)
        .map(|j| lower[j] + (upper[j] - lower[j]) * rng.gen_range(0.2..0.8))
        .collect();
    let n_rows = rng.gen_range(0..=4usize);
    let rows: Vec<(Vec<f64>, f64)> = (0..n_rows)
        .map(|_| {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ax: f64 = a.iter().zip(&x0).map(|(ai, xi)| ai * xi).sum();
            let b = ax + rng.gen_range(0.1..2.0);
            (a, b)
        })
        .collect();
    let eqs = if n > 2 && rng.gen_bool(0.3) {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: f64 = a.iter().zip(&x0).map(|(ai, xi)| ai * xi).sum();
        vec![(a, b)]
    } else {
        Vec::new()
    };
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    LpInstance {
        n,
        c,
        rows,
        eqs,
        lower,
        upper,
    }
}

#[test]
fn lp_objective_matches_vertex_enumeration_on_500_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let opts = SolveOptions::default();
    let mut checked = 0;
    while checked < 500 {
        let inst = random_lp(&mut rng);
        let oracle = match inst.best_vertex() {
            Some(v) => v,
            None => continue, // degenerate enumeration; skip
        };
        let sol = solve(&inst.to_program(), &opts).expect("well-formed program");
        assert_eq!(
            sol.status,
            SolveStatus::Optimal,
            "instance {checked} not solved: {:?}",
            sol.residuals
        );
        assert!(
            (sol.objective - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()),
            "instance {checked}: ipm {} vs oracle {}",
            sol.objective,
            oracle
        );
        checked += 1;
    }
}

#[test]
fn qp_recovers_interior_minimum_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xab1e);
    let opts = SolveOptions::default();
    for trial in 0..200 {
        let n = rng.gen_range(1..=8usize);
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xstar: Vec<f64> = (0..n).map(|j| -c[j] / q[j]).collect();
        let lower: Vec<f64> = (0..n)
            .map(|j| xstar[j] - rng.gen_range(0.5..2.0))
            .collect();
        let upper: Vec<f64> = (0..n)
            .map(|j| xstar[j] + rng.gen_range(0.5..2.0))
            .collect();
        let mut p = ConvexProgram::new(n);
        p.quad = Quadratic::Diagonal(q);
        p.linear = c;
        p.lower = lower;
        p.upper = upper;
        // A slack inequality that never binds at the optimum.
        let mut g = CsrBuilder::new(n);
        let entries: Vec<(usize, f64)> = (0..n).map(|j| (j, 1.0)).collect();
        g.push_row(&entries);
        p.ineq = g.build();
        p.ineq_rhs = vec![xstar.iter().sum::<f64>() + 10.0];
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "trial {trial}");
        for j in 0..n {
            assert!(
                (sol.x[j] - xstar[j]).abs() <= 1e-6,
                "trial {trial} var {j}: {} vs {}",
                sol.x[j],
                xstar[j]
            );
        }
    }
}

#[test]
fn resolve_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let inst = random_lp(&mut rng);
        let p = inst.to_program();
        let a = solve(&p, &SolveOptions::default()).unwrap();
        let b = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }
}

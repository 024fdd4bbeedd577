//! Power-bound estimation: choose kernelized lower/upper bound regressions so
//! that a tuned fraction of the observed aggregate powers is feasible.
//!
//! For feasibility penalty `H ∈ [0, 1)` and ridge weight `M ∈ [0, 1]` the fit
//! solves
//!
//! ```text
//!   min  M Σ(α̲² + ᾱ²) + (1−M) [ Σ H(ξ̄⁻ + ξ̲⁻) + Σ (1−H)(ξ̄⁺ + ξ̲⁺) ]
//!   s.t. P̄_t − p′_t = ξ̄⁺ − ξ̄⁻,   p′_t − P̲_t = ξ̲⁺ − ξ̲⁻,   P̄_t ≥ P̲_t,
//!        P̲_t = μ̲ + Σ_τ α̲_τ K_{t,τ},   P̄_t = μ̄ + Σ_τ ᾱ_τ K_{t,τ},  ξ ≥ 0
//! ```
//!
//! over the training periods. Internally the surplus slacks are eliminated
//! (for fixed bounds they have the closed form `ξ⁺ = max(residual, 0)`),
//! which halves the slack variables without changing the optimum; they are
//! recovered exactly afterwards. Higher `H` makes violations costlier, so the
//! fitted bounds widen with it.

use crate::dataset::TimeSeriesDataset;
use crate::kernels::{gram, GramMatrix, KernelError, KernelSpec};
use crate::linalg::CsrBuilder;
use crate::qpsolve::{self, ConvexProgram, Quadratic, SolveOptions, SolveStatus};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("solver did not reach optimality: {0:?}")]
    SolverFailure(SolveStatus),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Program(#[from] qpsolve::ProgramError),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("hyper-parameter out of range: {0}")]
    BadHyper(String),
}

/// Fitted bound regressions: intercepts plus one kernel coefficient per
/// training period, with the feature snapshot needed to evaluate them later.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsModel {
    pub mu_lower: f64,
    pub mu_upper: f64,
    pub alpha_lower: Vec<f64>,
    pub alpha_upper: Vec<f64>,
    pub kernel: KernelSpec,
    pub train_features: Vec<Vec<f64>>,
    pub h: f64,
    pub m: f64,
}

/// Slack decomposition of each training residual: margins (`⁺`) when the
/// observation lies inside the bound, violations (`⁻`) when outside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeasibilitySlacks {
    pub upper_margin: Vec<f64>,
    pub upper_violation: Vec<f64>,
    pub lower_margin: Vec<f64>,
    pub lower_violation: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BoundsFit {
    pub model: BoundsModel,
    pub slacks: FeasibilitySlacks,
    /// Fitted (P̲_t, P̄_t) per training period.
    pub train_bounds: Vec<(f64, f64)>,
    /// Objective of the original slack formulation at the fitted point.
    pub objective: f64,
    pub solver_iterations: usize,
}

impl BoundsModel {
    /// Evaluate both bound regressions on a standardized feature vector.
    /// An out-of-sample crossing (raw P̄ < P̲) collapses to the midpoint.
    pub fn predict(&self, z: &[f64]) -> Result<(f64, f64), KernelError> {
        let mut lo = self.mu_lower;
        let mut hi = self.mu_upper;
        for (tau, feat) in self.train_features.iter().enumerate() {
            let k = crate::kernels::kernel_eval(z, feat, &self.kernel)?;
            lo += self.alpha_lower[tau] * k;
            hi += self.alpha_upper[tau] * k;
        }
        if hi < lo {
            let mid = 0.5 * (lo + hi);
            Ok((mid, mid))
        } else {
            Ok((lo, hi))
        }
    }
}

/// Fit power bounds on the training slice of `ds`.
pub fn fit_bounds(
    ds: &TimeSeriesDataset,
    h: f64,
    m: f64,
    kspec: &KernelSpec,
) -> Result<BoundsFit, FitError> {
    let train = ds.train_indices();
    if train.is_empty() {
        return Err(FitError::EmptyTrainingSet);
    }
    let feats = ds
        .feature_rows(&train)
        .map_err(|e| FitError::BadHyper(e.to_string()))?;
    let powers: Vec<f64> = train.iter().map(|&t| ds.power()[t]).collect();
    let g = gram(&feats, &feats, kspec)?;
    fit_bounds_with_gram(&feats, &g, &powers, h, m, kspec)
}

/// Fit from a precomputed train×train Gram matrix (the tuning loop shares the
/// pairwise distances across hyper-parameter tuples).
pub fn fit_bounds_with_gram(
    train_features: &[Vec<f64>],
    gram_train: &GramMatrix,
    powers: &[f64],
    h: f64,
    m: f64,
    kspec: &KernelSpec,
) -> Result<BoundsFit, FitError> {
    if !(0.0..1.0).contains(&h) {
        return Err(FitError::BadHyper(format!("H = {h} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(FitError::BadHyper(format!("M = {m} outside [0, 1]")));
    }
    let n = powers.len();
    if n == 0 || train_features.len() != n {
        return Err(FitError::EmptyTrainingSet);
    }

    // Variable layout: μ̲, μ̄, α̲[n], ᾱ[n], l[n], u[n], ξ̲⁻[n], ξ̄⁻[n].
    let a_lo = 2;
    let a_hi = 2 + n;
    let l0 = 2 + 2 * n;
    let u0 = 2 + 3 * n;
    let xl0 = 2 + 4 * n;
    let xu0 = 2 + 5 * n;
    let nvars = 2 + 6 * n;

    let mut prog = ConvexProgram::new(nvars);
    let mut quad = vec![0.0; nvars];
    for j in 0..n {
        quad[a_lo + j] = 2.0 * m;
        quad[a_hi + j] = 2.0 * m;
    }
    prog.quad = Quadratic::Diagonal(quad);
    let w = (1.0 - m) * (1.0 - h);
    for t in 0..n {
        prog.linear[u0 + t] = w;
        prog.linear[l0 + t] = -w;
        prog.linear[xl0 + t] = 1.0 - m;
        prog.linear[xu0 + t] = 1.0 - m;
        prog.lower[xl0 + t] = 0.0;
        prog.lower[xu0 + t] = 0.0;
    }

    // Kernel-link equalities: l_t = μ̲ + Σ K α̲, u_t = μ̄ + Σ K ᾱ.
    let mut eq = CsrBuilder::new(nvars);
    let mut eq_rhs = Vec::with_capacity(2 * n);
    for t in 0..n {
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n + 2);
        row.push((l0 + t, 1.0));
        row.push((0, -1.0));
        for tau in 0..n {
            row.push((a_lo + tau, -gram_train.get(t, tau)));
        }
        eq.push_row(&row);
        eq_rhs.push(0.0);
    }
    for t in 0..n {
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n + 2);
        row.push((u0 + t, 1.0));
        row.push((1, -1.0));
        for tau in 0..n {
            row.push((a_hi + tau, -gram_train.get(t, tau)));
        }
        eq.push_row(&row);
        eq_rhs.push(0.0);
    }
    prog.eq = eq.build();
    prog.eq_rhs = eq_rhs;

    // Hinge and ordering inequalities.
    let mut g = CsrBuilder::new(nvars);
    let mut rhs = Vec::with_capacity(3 * n);
    for t in 0..n {
        g.push_row(&[(u0 + t, -1.0), (xu0 + t, -1.0)]); // −u − ξ̄⁻ ≤ −p′
        rhs.push(-powers[t]);
    }
    for t in 0..n {
        g.push_row(&[(l0 + t, 1.0), (xl0 + t, -1.0)]); // l − ξ̲⁻ ≤ p′
        rhs.push(powers[t]);
    }
    for t in 0..n {
        g.push_row(&[(l0 + t, 1.0), (u0 + t, -1.0)]); // l ≤ u
        rhs.push(0.0);
    }
    prog.ineq = g.build();
    prog.ineq_rhs = rhs;

    let sol = qpsolve::solve(&prog, &SolveOptions::default())?;
    if sol.status != SolveStatus::Optimal {
        return Err(FitError::SolverFailure(sol.status));
    }

    let model = BoundsModel {
        mu_lower: sol.x[0],
        mu_upper: sol.x[1],
        alpha_lower: sol.x[a_lo..a_lo + n].to_vec(),
        alpha_upper: sol.x[a_hi..a_hi + n].to_vec(),
        kernel: *kspec,
        train_features: train_features.to_vec(),
        h,
        m,
    };

    // Recompute fitted bounds from the coefficients and recover the exact
    // optimal slacks for them; this keeps the slack identities
    // (P̄ − p′ = ξ̄⁺ − ξ̄⁻, complementarity) exact rather than
    // solver-tolerance-approximate.
    let mut train_bounds = Vec::with_capacity(n);
    let mut slacks = FeasibilitySlacks {
        upper_margin: Vec::with_capacity(n),
        upper_violation: Vec::with_capacity(n),
        lower_margin: Vec::with_capacity(n),
        lower_violation: Vec::with_capacity(n),
    };
    let mut slack_cost = 0.0;
    for t in 0..n {
        let mut lo = model.mu_lower;
        let mut hi = model.mu_upper;
        for tau in 0..n {
            let k = gram_train.get(t, tau);
            lo += model.alpha_lower[tau] * k;
            hi += model.alpha_upper[tau] * k;
        }
        train_bounds.push((lo, hi));
        let du = hi - powers[t];
        let dl = powers[t] - lo;
        let (um, uv) = (du.max(0.0), (-du).max(0.0));
        let (lm, lv) = (dl.max(0.0), (-dl).max(0.0));
        slack_cost += h * (uv + lv) + (1.0 - h) * (um + lm);
        slacks.upper_margin.push(um);
        slacks.upper_violation.push(uv);
        slacks.lower_margin.push(lm);
        slacks.lower_violation.push(lv);
    }
    let ridge: f64 = model
        .alpha_lower
        .iter()
        .chain(&model.alpha_upper)
        .map(|a| a * a)
        .sum();
    let objective = m * ridge + (1.0 - m) * slack_cost;

    Ok(BoundsFit {
        model,
        slacks,
        train_bounds,
        objective,
        solver_iterations: sol.iterations,
    })
}

//! Marginal-utility estimation: block widths, observation decomposition, and
//! the duality-gap minimizing program.
//!
//! Blocks live in two orderings. *Market order* numbers charging blocks
//! 1..N_c and discharging blocks −1..−N_d outward from zero power.
//! *Canonical order* lists all blocks by non-increasing marginal utility:
//! discharging blocks first (deepest block first, it carries the highest
//! utility), then charging blocks. The utility intercepts are constrained
//! non-increasing along canonical order, and since the kernel term is shared
//! by all blocks, predicted utilities inherit that ordering at every period.
//!
//! The estimation program minimizes the sum of duality gaps of the forward
//! welfare problem at the observed (clamped, decomposed) powers. The full
//! dual has four multiplier families per block-period; for fixed utilities
//! and a fixed aggregate multiplier difference `g_t = β̄_t − β̲_t` they
//! minimize in closed form to hinge terms, so the program solved here keeps
//! only `g_t`, an epigraph variable for the aggregate-bound cost, and one
//! hinge slack per block-period. The eliminated multipliers are recovered
//! exactly afterwards, which makes every reported gap a true weak-duality
//! gap: nonnegative up to floating-point roundoff regardless of solver
//! tolerance.

use crate::dataset::TimeSeriesDataset;
use crate::kernels::{gram, GramMatrix, KernelError, KernelSpec};
use crate::linalg::CsrBuilder;
use crate::qpsolve::{self, ConvexProgram, Quadratic, SolveOptions, SolveStatus};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error("invalid bounds: lower {lower} exceeds upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("block configuration needs at least one charging block")]
    NoChargingBlocks,
}

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("solver did not reach optimality: {0:?}")]
    SolverFailure(SolveStatus),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Program(#[from] qpsolve::ProgramError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("training data inconsistent: {0}")]
    BadInput(String),
}

/// Number of charging and discharging energy blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub num_charging: usize,
    pub num_discharging: usize,
}

impl BlockConfig {
    pub fn new(num_charging: usize, num_discharging: usize) -> Result<Self, BlockError> {
        if num_charging == 0 {
            return Err(BlockError::NoChargingBlocks);
        }
        Ok(BlockConfig {
            num_charging,
            num_discharging,
        })
    }

    /// Total number of blocks N_B.
    pub fn total(&self) -> usize {
        self.num_charging + self.num_discharging
    }

    /// Market-order block label for a canonical index: −N_d first, then
    /// −N_d+1, …, −1, 1, 2, …, N_c.
    pub fn market_label(&self, canonical: usize) -> i64 {
        if canonical < self.num_discharging {
            -((self.num_discharging - canonical) as i64)
        } else {
            (canonical - self.num_discharging + 1) as i64
        }
    }

    /// Clamp predicted bounds into a range the block construction can tile.
    /// Without discharging blocks a negative upper bound is unreachable, so
    /// it is clipped to zero (and the lower bound kept consistent).
    pub fn effective_bounds(&self, lower: f64, upper: f64) -> (f64, f64) {
        let (mut lo, mut hi) = if upper < lower {
            let mid = 0.5 * (lower + upper);
            (mid, mid)
        } else {
            (lower, upper)
        };
        if self.num_discharging == 0 && hi < 0.0 {
            hi = 0.0;
            lo = lo.min(hi);
        }
        (lo, hi)
    }
}

/// Per-period block widths: charging widths are non-negative, discharging
/// widths non-positive, both in market order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWidths {
    pub charging: Vec<f64>,
    pub discharging: Vec<f64>,
}

impl BlockWidths {
    /// Upper box limit of each block in canonical order (0 for discharging).
    pub fn canonical_upper(&self, cfg: &BlockConfig) -> Vec<f64> {
        let mut out = vec![0.0; cfg.total()];
        for (i, w) in self.charging.iter().enumerate() {
            out[cfg.num_discharging + i] = *w;
        }
        out
    }

    /// Lower box limit of each block in canonical order (0 for charging).
    pub fn canonical_lower(&self, cfg: &BlockConfig) -> Vec<f64> {
        let mut out = vec![0.0; cfg.total()];
        for (i, w) in self.discharging.iter().enumerate() {
            // Market index 0 is block −1, canonical index num_discharging−1.
            out[cfg.num_discharging - 1 - i] = *w;
        }
        out
    }
}

/// Split estimated aggregate bounds into equal-length energy blocks.
///
/// Three cases by the sign pattern of the bounds: all-charging intervals put
/// the lower bound into the first block and split the remainder evenly;
/// all-discharging intervals mirror that; sign-spanning intervals split each
/// side evenly across its own blocks.
pub fn block_widths(lower: f64, upper: f64, cfg: &BlockConfig) -> Result<BlockWidths, BlockError> {
    if upper < lower {
        return Err(BlockError::InvalidBounds { lower, upper });
    }
    if cfg.num_charging == 0 {
        return Err(BlockError::NoChargingBlocks);
    }
    let nc = cfg.num_charging;
    let nd = cfg.num_discharging;
    let mut charging = vec![0.0; nc];
    let mut discharging = vec![0.0; nd];
    if lower > 0.0 {
        // P̄ ≥ P̲ > 0: first block reaches the lower bound, the rest tile up
        // to the upper bound. A single block covers the whole reachable range.
        if nc == 1 {
            charging[0] = upper;
        } else {
            charging[0] = lower;
            let rest = (upper - lower) / (nc - 1) as f64;
            for w in charging.iter_mut().skip(1) {
                *w = rest;
            }
        }
    } else if upper < 0.0 {
        // P̲ ≤ P̄ < 0: mirror case on the discharging side.
        if nd == 0 {
            return Err(BlockError::InvalidBounds { lower, upper });
        }
        if nd == 1 {
            discharging[0] = lower;
        } else {
            discharging[0] = upper;
            let rest = (lower - upper) / (nd - 1) as f64;
            for w in discharging.iter_mut().skip(1) {
                *w = rest;
            }
        }
    } else {
        // P̲ ≤ 0 ≤ P̄: equal widths on each side.
        for w in charging.iter_mut() {
            *w = upper / nc as f64;
        }
        for w in discharging.iter_mut() {
            *w = lower / nd.max(1) as f64;
        }
        if nd == 0 {
            discharging.clear();
        }
    }
    Ok(BlockWidths {
        charging,
        discharging,
    })
}

/// Decompose an observed aggregate power into per-block powers, canonical
/// order. The observation is clamped into the bounds first; non-negative
/// power fills charging blocks outward from block 1, negative power fills
/// discharging blocks outward from block −1 — the unique decomposition
/// consistent with non-increasing utilities.
pub fn decompose_observed(
    observed: f64,
    widths: &BlockWidths,
    bounds: (f64, f64),
) -> Vec<f64> {
    let (lo, hi) = bounds;
    let clamped = observed.clamp(lo.min(hi), hi.max(lo));
    let nd = widths.discharging.len();
    let mut blocks = vec![0.0; nd + widths.charging.len()];
    if clamped >= 0.0 {
        let mut rest = clamped;
        for (i, w) in widths.charging.iter().enumerate() {
            let take = rest.min(*w);
            blocks[nd + i] = take;
            rest -= take;
            if rest <= 0.0 {
                break;
            }
        }
    } else {
        let mut rest = clamped;
        for (i, w) in widths.discharging.iter().enumerate() {
            let take = rest.max(*w);
            blocks[nd - 1 - i] = take;
            rest -= take;
            if rest >= 0.0 {
                break;
            }
        }
    }
    blocks
}

/// Fitted utility regression: per-block intercepts (canonical order,
/// non-increasing) and a shared kernel coefficient per training period.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtilityModel {
    /// ν_b in canonical order.
    pub intercepts: Vec<f64>,
    pub rho: Vec<f64>,
    pub kernel: KernelSpec,
    pub train_features: Vec<Vec<f64>>,
    pub config: BlockConfig,
}

impl UtilityModel {
    /// Predict per-block marginal utilities (canonical order) for a
    /// standardized feature vector. Non-increasing by construction: the
    /// kernel term is block-independent.
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>, KernelError> {
        let mut shift = 0.0;
        for (tau, feat) in self.train_features.iter().enumerate() {
            shift += self.rho[tau] * crate::kernels::kernel_eval(z, feat, &self.kernel)?;
        }
        Ok(self.intercepts.iter().map(|nu| nu + shift).collect())
    }
}

/// Recovered dual variables and duality gaps of the estimation program.
/// Multiplier matrices are indexed `[train period][market-order block]`.
#[derive(Clone, Debug)]
pub struct DualitySolution {
    pub epsilon: Vec<f64>,
    pub beta_lower: Vec<f64>,
    pub beta_upper: Vec<f64>,
    pub phi_charge_lower: Vec<Vec<f64>>,
    pub phi_charge_upper: Vec<Vec<f64>>,
    pub phi_discharge_lower: Vec<Vec<f64>>,
    pub phi_discharge_upper: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct UtilityFit {
    pub model: UtilityModel,
    pub duality: DualitySolution,
    /// Clamped per-block observation decomposition used by the fit,
    /// canonical order per training period.
    pub decomposed: Vec<Vec<f64>>,
    pub solver_iterations: usize,
}

/// Ridge weight on the kernel coefficients; breaks degeneracy of the LP
/// without perturbing the gaps beyond test tolerances.
const RHO_RIDGE: f64 = 1e-8;
/// The same weight on the remaining variables. The gap-minimizing face is
/// frequently unbounded (any utility above every price is optimal for a
/// period that always charges fully), so each variable carries a vanishing
/// quadratic pull that selects the minimum-norm point of that face.
const FACE_RIDGE: f64 = 1e-8;

/// Fit marginal utilities on the training slice, given the fitted bounds of
/// every training period.
pub fn fit_utilities(
    ds: &TimeSeriesDataset,
    train_bounds: &[(f64, f64)],
    cfg: &BlockConfig,
    kspec: &KernelSpec,
) -> Result<UtilityFit, FitError> {
    let train = ds.train_indices();
    if train.len() != train_bounds.len() {
        return Err(FitError::BadInput(format!(
            "{} bounds for {} training periods",
            train_bounds.len(),
            train.len()
        )));
    }
    let feats = ds
        .feature_rows(&train)
        .map_err(|e| FitError::BadInput(e.to_string()))?;
    let prices: Vec<f64> = train.iter().map(|&t| ds.price()[t]).collect();
    let powers: Vec<f64> = train.iter().map(|&t| ds.power()[t]).collect();
    let g = gram(&feats, &feats, kspec)?;
    fit_utilities_with_gram(&feats, &g, &prices, &powers, train_bounds, cfg, kspec)
}

/// Fit from a precomputed train×train Gram matrix.
#[allow(clippy::too_many_arguments)]
pub fn fit_utilities_with_gram(
    train_features: &[Vec<f64>],
    gram_train: &GramMatrix,
    prices: &[f64],
    powers: &[f64],
    train_bounds: &[(f64, f64)],
    cfg: &BlockConfig,
    kspec: &KernelSpec,
) -> Result<UtilityFit, FitError> {
    let n = prices.len();
    if n == 0 {
        return Err(FitError::BadInput("empty training set".into()));
    }
    if powers.len() != n || train_bounds.len() != n || train_features.len() != n {
        return Err(FitError::BadInput("series lengths differ".into()));
    }
    let nb = cfg.total();
    let nd = cfg.num_discharging;

    // Per-period block construction and observation decomposition.
    let mut widths = Vec::with_capacity(n);
    let mut decomposed = Vec::with_capacity(n);
    let mut bounds_eff = Vec::with_capacity(n);
    for t in 0..n {
        let (lo, hi) = cfg.effective_bounds(train_bounds[t].0, train_bounds[t].1);
        let w = block_widths(lo, hi, cfg)?;
        decomposed.push(decompose_observed(powers[t], &w, (lo, hi)));
        widths.push(w);
        bounds_eff.push((lo, hi));
    }

    // Variable layout: ν[nb], ρ[n], k[n], g[n], r[n], s[n×nb].
    let v_rho = nb;
    let v_k = nb + n;
    let v_g = nb + 2 * n;
    let v_r = nb + 3 * n;
    let v_s = nb + 4 * n;
    let nvars = nb + 4 * n + n * nb;

    let mut prog = ConvexProgram::new(nvars);
    let mut quad = vec![2.0 * FACE_RIDGE; nvars];
    for j in 0..n {
        quad[v_rho + j] = 2.0 * RHO_RIDGE;
    }
    prog.quad = Quadratic::Diagonal(quad);

    // Generous data-scaled boxes on every variable. Utilities, the kernel
    // shift, and the aggregate multiplier live on the price scale; hinge
    // slacks and the epigraph variable on products of the involved scales.
    // Optimal points sit far inside; the boxes only keep the barrier in
    // control along otherwise-flat directions of the gap objective.
    let price_scale = 100.0 * (1.0 + prices.iter().fold(0.0f64, |a, p| a.max(p.abs())));
    let bound_scale = 1.0
        + bounds_eff
            .iter()
            .fold(0.0f64, |a, (lo, hi)| a.max(lo.abs()).max(hi.abs()));
    for b in 0..nb {
        prog.lower[b] = -price_scale;
        prog.upper[b] = price_scale;
    }
    for j in 0..n {
        prog.lower[v_rho + j] = -1e3 * price_scale;
        prog.upper[v_rho + j] = 1e3 * price_scale;
        prog.lower[v_k + j] = -price_scale;
        prog.upper[v_k + j] = price_scale;
        prog.lower[v_g + j] = -price_scale;
        prog.upper[v_g + j] = price_scale;
        prog.lower[v_r + j] = -price_scale * bound_scale;
        prog.upper[v_r + j] = price_scale * bound_scale;
    }

    // Objective: Σ_t [ r_t + Σ_b width·s − Σ_b p′_b·(ν_b + k_t − λ_t) ].
    let mut offset = 0.0;
    for t in 0..n {
        prog.linear[v_r + t] = 1.0;
        let upper_w = widths[t].canonical_upper(cfg);
        let lower_w = widths[t].canonical_lower(cfg);
        for b in 0..nb {
            let weight = if b < nd { -lower_w[b] } else { upper_w[b] };
            prog.linear[v_s + t * nb + b] = weight;
            prog.lower[v_s + t * nb + b] = 0.0;
            prog.upper[v_s + t * nb + b] = 4.0 * price_scale;
        }
        let total: f64 = decomposed[t].iter().sum();
        prog.linear[v_k + t] = -total;
        for b in 0..nb {
            prog.linear[b] -= decomposed[t][b];
        }
        offset += prices[t] * total;
    }
    prog.offset = offset;

    // Kernel link: k_t = Σ_τ K_{t,τ} ρ_τ.
    let mut eq = CsrBuilder::new(nvars);
    for t in 0..n {
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n + 1);
        row.push((v_k + t, 1.0));
        for tau in 0..n {
            row.push((v_rho + tau, -gram_train.get(t, tau)));
        }
        eq.push_row(&row);
    }
    prog.eq = eq.build();
    prog.eq_rhs = vec![0.0; n];

    let mut ineq = CsrBuilder::new(nvars);
    let mut rhs = Vec::new();
    for t in 0..n {
        let (lo, hi) = bounds_eff[t];
        // Epigraph of the aggregate-bound dual cost max(P̄ g, P̲ g).
        ineq.push_row(&[(v_g + t, hi), (v_r + t, -1.0)]);
        rhs.push(0.0);
        ineq.push_row(&[(v_g + t, lo), (v_r + t, -1.0)]);
        rhs.push(0.0);
        // Hinges: charging s ≥ m − λ − g, discharging s ≥ λ + g − m.
        for b in 0..nb {
            let s_var = v_s + t * nb + b;
            if b < nd {
                ineq.push_row(&[(b, -1.0), (v_k + t, -1.0), (v_g + t, 1.0), (s_var, -1.0)]);
                rhs.push(-prices[t]);
            } else {
                ineq.push_row(&[(b, 1.0), (v_k + t, 1.0), (v_g + t, -1.0), (s_var, -1.0)]);
                rhs.push(prices[t]);
            }
        }
    }
    // Monotone intercepts along canonical order.
    for b in 0..nb.saturating_sub(1) {
        ineq.push_row(&[(b + 1, 1.0), (b, -1.0)]);
        rhs.push(0.0);
    }
    prog.ineq = ineq.build();
    prog.ineq_rhs = rhs;

    let sol = qpsolve::solve(&prog, &SolveOptions::default())?;
    if sol.status != SolveStatus::Optimal {
        return Err(FitError::SolverFailure(sol.status));
    }

    let model = UtilityModel {
        intercepts: sol.x[..nb].to_vec(),
        rho: sol.x[v_rho..v_rho + n].to_vec(),
        kernel: *kspec,
        train_features: train_features.to_vec(),
        config: *cfg,
    };

    // Recover the eliminated multipliers exactly from (m, g): any g yields a
    // dual-feasible point, so every gap below is a true weak-duality gap.
    let mut duality = DualitySolution {
        epsilon: Vec::with_capacity(n),
        beta_lower: Vec::with_capacity(n),
        beta_upper: Vec::with_capacity(n),
        phi_charge_lower: Vec::with_capacity(n),
        phi_charge_upper: Vec::with_capacity(n),
        phi_discharge_lower: Vec::with_capacity(n),
        phi_discharge_upper: Vec::with_capacity(n),
    };
    for t in 0..n {
        let shift: f64 = (0..n)
            .map(|tau| model.rho[tau] * gram_train.get(t, tau))
            .sum();
        let m_canonical: Vec<f64> = model.intercepts.iter().map(|nu| nu + shift).collect();
        let g_t = sol.x[v_g + t];
        let (lo, hi) = bounds_eff[t];
        let beta_up = g_t.max(0.0);
        let beta_lo = (-g_t).max(0.0);
        let upper_w = widths[t].canonical_upper(cfg);
        let lower_w = widths[t].canonical_lower(cfg);
        let mut dual_obj = hi * beta_up - lo * beta_lo;
        let mut primal_obj = 0.0;
        let mut phi_cl = vec![0.0; cfg.num_charging];
        let mut phi_cu = vec![0.0; cfg.num_charging];
        let mut phi_dl = vec![0.0; nd];
        let mut phi_du = vec![0.0; nd];
        for b in 0..nb {
            let c = m_canonical[b] - prices[t];
            let up = (c - g_t).max(0.0);
            let down = (g_t - c).max(0.0);
            if b < nd {
                let market = nd - 1 - b; // canonical → market index
                phi_du[market] = up;
                phi_dl[market] = down;
                dual_obj += -lower_w[b] * down;
            } else {
                let market = b - nd;
                phi_cu[market] = up;
                phi_cl[market] = down;
                dual_obj += upper_w[b] * up;
            }
            primal_obj += decomposed[t][b] * c;
        }
        duality.epsilon.push(dual_obj - primal_obj);
        duality.beta_lower.push(beta_lo);
        duality.beta_upper.push(beta_up);
        duality.phi_charge_lower.push(phi_cl);
        duality.phi_charge_upper.push(phi_cu);
        duality.phi_discharge_lower.push(phi_dl);
        duality.phi_discharge_upper.push(phi_du);
    }

    Ok(UtilityFit {
        model,
        duality,
        decomposed,
        solver_iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(nc: usize, nd: usize) -> BlockConfig {
        BlockConfig::new(nc, nd).unwrap()
    }

    #[test]
    fn widths_match_reported_curve() {
        let w = block_widths(38.7, 194.2, &cfg(6, 0)).unwrap();
        let expected = [38.7, 31.1, 31.1, 31.1, 31.1, 31.1];
        for (got, want) in w.charging.iter().zip(expected) {
            assert!((got - want).abs() < 0.05, "{got} vs {want}");
        }
        let total: f64 = w.charging.iter().sum();
        assert!((total - 194.2).abs() < 1e-9);
        assert!(w.discharging.is_empty());
    }

    #[test]
    fn degenerate_interval_gives_zero_widths() {
        let w = block_widths(0.0, 0.0, &cfg(3, 3)).unwrap();
        assert!(w.charging.iter().all(|&v| v == 0.0));
        assert!(w.discharging.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_spanning_interval_splits_per_direction() {
        let w = block_widths(-30.0, 60.0, &cfg(3, 3)).unwrap();
        assert_eq!(w.charging, vec![20.0, 20.0, 20.0]);
        assert_eq!(w.discharging, vec![-10.0, -10.0, -10.0]);
        let up: f64 = w.charging.iter().sum();
        let down: f64 = w.discharging.iter().sum();
        assert_eq!(up, 60.0);
        assert_eq!(down, -30.0);
    }

    #[test]
    fn negative_interval_mirrors_positive_case() {
        let w = block_widths(-194.2, -38.7, &cfg(1, 6)).unwrap();
        assert!((w.discharging[0] + 38.7).abs() < 1e-9);
        for v in &w.discharging[1..] {
            assert!((v + 31.1).abs() < 0.05);
        }
        let total: f64 = w.discharging.iter().sum();
        assert!((total + 194.2).abs() < 1e-9);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(matches!(
            block_widths(5.0, 3.0, &cfg(2, 0)),
            Err(BlockError::InvalidBounds { .. })
        ));
    }

    #[test]
    fn decompose_fills_greedily() {
        let w = block_widths(38.7, 194.2, &cfg(6, 0)).unwrap();
        let blocks = decompose_observed(50.0, &w, (38.7, 194.2));
        assert!((blocks[0] - 38.7).abs() < 1e-9);
        assert!((blocks[1] - 11.3).abs() < 1e-9);
        assert!(blocks[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_zero_power() {
        let w = block_widths(-10.0, 10.0, &cfg(2, 2)).unwrap();
        let blocks = decompose_observed(0.0, &w, (-10.0, 10.0));
        assert!(blocks.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_clamps_to_bounds() {
        let w = block_widths(38.7, 194.2, &cfg(6, 0)).unwrap();
        let blocks = decompose_observed(300.0, &w, (38.7, 194.2));
        let total: f64 = blocks.iter().sum();
        assert!((total - 194.2).abs() < 1e-9);
        for (b, w) in blocks.iter().zip(w.canonical_upper(&cfg(6, 0))) {
            assert!(*b <= w + 1e-12);
        }
    }

    #[test]
    fn decompose_negative_fills_nearest_discharging_first() {
        let w = block_widths(-30.0, 60.0, &cfg(3, 3)).unwrap();
        let blocks = decompose_observed(-15.0, &w, (-30.0, 60.0));
        // Canonical order: deepest discharging first. Block −1 (canonical
        // index 2) takes −10, block −2 (index 1) the remaining −5.
        assert_eq!(blocks[2], -10.0);
        assert_eq!(blocks[1], -5.0);
        assert_eq!(blocks[0], 0.0);
        assert!(blocks[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_intercept_only() {
        let model = UtilityModel {
            intercepts: vec![50.0, 45.0, 40.0],
            rho: vec![0.0],
            kernel: KernelSpec::linear(),
            train_features: vec![vec![1.0]],
            config: cfg(3, 0),
        };
        assert_eq!(model.predict(&[2.0]).unwrap(), vec![50.0, 45.0, 40.0]);
    }

    #[test]
    fn utility_differences_are_intercept_differences() {
        let model = UtilityModel {
            intercepts: vec![50.0, 45.0, 40.0],
            rho: vec![0.3, -0.2],
            kernel: KernelSpec::linear(),
            train_features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            config: cfg(3, 0),
        };
        let m = model.predict(&[0.7, -0.4]).unwrap();
        for b in 0..2 {
            let dm = m[b] - m[b + 1];
            let dnu = model.intercepts[b] - model.intercepts[b + 1];
            assert!((dm - dnu).abs() < 1e-12);
            assert!(dm >= 0.0);
        }
    }

    fn tiny_dataset(
        prices: &[f64],
        powers: &[f64],
    ) -> (Vec<Vec<f64>>, GramMatrix) {
        let feats: Vec<Vec<f64>> = (0..prices.len()).map(|i| vec![i as f64 * 0.1]).collect();
        let g = gram(&feats, &feats, &KernelSpec::linear()).unwrap();
        (feats, g)
    }

    #[test]
    fn observed_full_charge_below_price_threshold_closes_gap() {
        // One period, λ = 50, bounds [0, 100], single charging block, observed
        // p′ = 100: the observation is forward-optimal iff m₁ ≥ 50.
        let (feats, g) = tiny_dataset(&[50.0], &[100.0]);
        let fit = fit_utilities_with_gram(
            &feats,
            &g,
            &[50.0],
            &[100.0],
            &[(0.0, 100.0)],
            &cfg(1, 0),
            &KernelSpec::linear(),
        )
        .unwrap();
        assert!(fit.duality.epsilon[0].abs() <= 1e-7, "gap {}", fit.duality.epsilon[0]);
        let m = fit.model.predict(&feats[0]).unwrap();
        assert!(m[0] >= 50.0 - 1e-6, "m1 {}", m[0]);
    }

    #[test]
    fn observed_inactivity_when_price_exceeds_utility() {
        // Observed p′ = 0 with bounds [0, 100]: optimal iff m₁ ≤ λ.
        let (feats, g) = tiny_dataset(&[80.0], &[0.0]);
        let fit = fit_utilities_with_gram(
            &feats,
            &g,
            &[80.0],
            &[0.0],
            &[(0.0, 100.0)],
            &cfg(1, 0),
            &KernelSpec::linear(),
        )
        .unwrap();
        assert!(fit.duality.epsilon[0].abs() <= 1e-7);
        let m = fit.model.predict(&feats[0]).unwrap();
        assert!(m[0] <= 80.0 + 1e-6);
    }

    #[test]
    fn gaps_nonnegative_and_intercepts_monotone() {
        let prices = [30.0, 55.0, 70.0, 45.0, 60.0, 35.0, 50.0, 65.0];
        let powers = [90.0, 40.0, -20.0, 70.0, 10.0, 85.0, 55.0, -5.0];
        let bounds: Vec<(f64, f64)> = powers.iter().map(|_| (-30.0, 100.0)).collect();
        let (feats, g) = tiny_dataset(&prices, &powers);
        let fit = fit_utilities_with_gram(
            &feats,
            &g,
            &prices,
            &powers,
            &bounds,
            &cfg(3, 2),
            &KernelSpec::linear(),
        )
        .unwrap();
        for eps in &fit.duality.epsilon {
            assert!(*eps >= -1e-8, "gap {eps}");
        }
        for w in fit.model.intercepts.windows(2) {
            assert!(w[0] >= w[1] - 1e-9, "intercepts not monotone: {w:?}");
        }
        for t in 0..prices.len() {
            for v in fit.duality.phi_charge_lower[t]
                .iter()
                .chain(&fit.duality.phi_charge_upper[t])
                .chain(&fit.duality.phi_discharge_lower[t])
                .chain(&fit.duality.phi_discharge_upper[t])
            {
                assert!(*v >= 0.0);
            }
        }
    }
}

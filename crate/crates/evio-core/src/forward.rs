//! The forward welfare problem in closed form, power forecasts, and bid/offer
//! curve extraction.
//!
//! The fleet's assumed response to a price is the maximizer of
//! `Σ_b p_b (m_b − λ)` over per-block boxes and the aggregate bound
//! `P̲ ≤ Σ_b p_b ≤ P̄` — a bounded-variable continuous knapsack. The greedy
//! solution is exact: each block takes its full width when its utility beats
//! the price (ties take nothing), then the aggregate bound is repaired by
//! trimming blocks in order of least surplus loss. The LP formulation is kept
//! alive in the tests as an independent oracle.

use crate::dataset::TimeSeriesDataset;
use crate::kernels::{gram, KernelError};
use crate::model::PriceResponseModel;
use crate::optimality::{block_widths, BlockConfig, BlockError, BlockWidths};
use crate::par;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// One period of the forward problem: price, utilities (canonical order),
/// block widths, and aggregate bounds.
#[derive(Clone, Debug)]
pub struct ForwardInstance {
    pub price: f64,
    pub utilities: Vec<f64>,
    pub widths: BlockWidths,
    pub lower: f64,
    pub upper: f64,
}

impl ForwardInstance {
    fn config(&self) -> BlockConfig {
        BlockConfig {
            num_charging: self.widths.charging.len(),
            num_discharging: self.widths.discharging.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ForwardError> {
        let cfg = self.config();
        if self.utilities.len() != cfg.total() {
            return Err(ForwardError::InvalidInstance(format!(
                "{} utilities for {} blocks",
                self.utilities.len(),
                cfg.total()
            )));
        }
        if !(self.lower <= self.upper) {
            return Err(ForwardError::InvalidInstance(format!(
                "lower {} above upper {}",
                self.lower, self.upper
            )));
        }
        for w in self.utilities.windows(2) {
            if w[1] > w[0] + 1e-9 {
                return Err(ForwardError::InvalidInstance(
                    "utilities increase along canonical order".into(),
                ));
            }
        }
        if self.widths.charging.iter().any(|&w| w < -1e-9)
            || self.widths.discharging.iter().any(|&w| w > 1e-9)
        {
            return Err(ForwardError::InvalidInstance(
                "width signs inconsistent with block direction".into(),
            ));
        }
        let hi_total: f64 = self.widths.charging.iter().sum();
        let lo_total: f64 = self.widths.discharging.iter().sum();
        if lo_total > self.upper + 1e-9 || hi_total < self.lower - 1e-9 {
            return Err(ForwardError::InvalidInstance(
                "block widths cannot reach the aggregate bounds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardSolution {
    /// Aggregate power p_t [kW].
    pub power: f64,
    /// Per-block powers in canonical order.
    pub blocks: Vec<f64>,
    /// Welfare objective Σ p_b (m_b − λ).
    pub objective: f64,
}

/// Solve the forward problem exactly by greedy allocation.
pub fn forward_solve(inst: &ForwardInstance) -> Result<ForwardSolution, ForwardError> {
    inst.validate()?;
    let cfg = inst.config();
    let nb = cfg.total();
    let his = inst.widths.canonical_upper(&cfg);
    let los = inst.widths.canonical_lower(&cfg);

    // Per-block optimum, ties idle.
    let mut blocks = vec![0.0; nb];
    for j in 0..nb {
        let coeff = inst.utilities[j] - inst.price;
        blocks[j] = if coeff > 0.0 {
            his[j]
        } else if coeff < 0.0 {
            los[j]
        } else {
            0.0
        };
    }
    let mut total: f64 = blocks.iter().sum();

    // Repair the aggregate bound at least surplus loss. Utilities are
    // non-increasing along canonical order, so trimming walks backwards and
    // raising walks forwards.
    if total > inst.upper {
        let mut excess = total - inst.upper;
        for j in (0..nb).rev() {
            let room = blocks[j] - los[j];
            let take = room.min(excess);
            if take > 0.0 {
                blocks[j] -= take;
                excess -= take;
            }
            if excess <= 0.0 {
                break;
            }
        }
        total = blocks.iter().sum();
    } else if total < inst.lower {
        let mut shortfall = inst.lower - total;
        for j in 0..nb {
            let room = his[j] - blocks[j];
            let take = room.min(shortfall);
            if take > 0.0 {
                blocks[j] += take;
                shortfall -= take;
            }
            if shortfall <= 0.0 {
                break;
            }
        }
        total = blocks.iter().sum();
    }
    let objective = blocks
        .iter()
        .zip(&inst.utilities)
        .map(|(p, m)| p * (m - inst.price))
        .sum();
    Ok(ForwardSolution {
        power: total.clamp(inst.lower, inst.upper),
        blocks,
        objective,
    })
}

/// Monotone stepwise price-quantity schedule for one period. Bid prices
/// (consumption) are non-increasing in market order, offer prices
/// (production) non-decreasing; quantities are non-negative on both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    /// (marginal utility €/MWh, width kW) per charging block, market order.
    pub bid: Vec<(f64, f64)>,
    /// (marginal utility €/MWh, −width kW) per discharging block, market order.
    pub offer: Vec<(f64, f64)>,
}

impl BidCurve {
    /// CSV rows `block,side,price_eur_mwh,quantity_kw`; bid blocks numbered
    /// 1.., offer blocks −1...
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "block,side,price_eur_mwh,quantity_kw")?;
        for (i, (price, qty)) in self.bid.iter().enumerate() {
            writeln!(w, "{},bid,{},{}", i + 1, price, qty)?;
        }
        for (i, (price, qty)) in self.offer.iter().enumerate() {
            writeln!(w, "-{},offer,{},{}", i + 1, price, qty)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Predict bounds, widths, and utilities for a feature vector and assemble
/// the period's bid/offer curve.
pub fn extract_bid_curve(
    model: &PriceResponseModel,
    z: &[f64],
) -> Result<BidCurve, ForwardError> {
    model.check_features(z.len())?;
    let raw = model.bounds.predict(z)?;
    let (lo, hi) = model.blocks.effective_bounds(raw.0, raw.1);
    let widths = block_widths(lo, hi, &model.blocks)?;
    let utilities = model.utilities.predict(z)?;
    Ok(assemble_curve(&model.blocks, &widths, &utilities))
}

fn assemble_curve(cfg: &BlockConfig, widths: &BlockWidths, utilities: &[f64]) -> BidCurve {
    let nd = cfg.num_discharging;
    let bid = widths
        .charging
        .iter()
        .enumerate()
        .map(|(i, w)| (utilities[nd + i], *w))
        .collect();
    let offer = widths
        .discharging
        .iter()
        .enumerate()
        .map(|(i, w)| (utilities[nd - 1 - i], -w))
        .collect();
    BidCurve { bid, offer }
}

/// One-step-ahead forecasts over `periods` using observed lagged regressors.
/// Each period solves the forward problem at its observed price.
pub fn forecast(
    model: &PriceResponseModel,
    ds: &TimeSeriesDataset,
    periods: &[usize],
) -> Result<Vec<f64>, ForwardError> {
    let feats = ds
        .feature_rows(periods)
        .map_err(|e| ForwardError::InsufficientHistory(e.to_string()))?;
    if let Some(first) = feats.first() {
        model.check_features(first.len())?;
    }
    // Kernel rows against both training snapshots, computed in bulk.
    let g_bounds = gram(&feats, &model.bounds.train_features, &model.bounds.kernel)?;
    let g_util = gram(
        &feats,
        &model.utilities.train_features,
        &model.utilities.kernel,
    )?;
    let prices: Vec<f64> = periods.iter().map(|&t| ds.price()[t]).collect();
    forecast_with_grams(
        &model.bounds,
        &model.utilities,
        &model.blocks,
        &prices,
        &g_bounds,
        &g_util,
    )
}

/// Forecast from precomputed kernel rows (the tuning loop shares Gram
/// matrices across hyper-parameter tuples).
pub fn forecast_with_grams(
    bounds: &crate::feasibility::BoundsModel,
    utilities: &crate::optimality::UtilityModel,
    blocks: &BlockConfig,
    prices: &[f64],
    g_bounds: &crate::kernels::GramMatrix,
    g_util: &crate::kernels::GramMatrix,
) -> Result<Vec<f64>, ForwardError> {
    let results = par::map_indices(prices.len(), |i| {
        let krow_b = g_bounds.row(i);
        let mut lo = bounds.mu_lower;
        let mut hi = bounds.mu_upper;
        for (tau, k) in krow_b.iter().enumerate() {
            lo += bounds.alpha_lower[tau] * k;
            hi += bounds.alpha_upper[tau] * k;
        }
        if hi < lo {
            let mid = 0.5 * (lo + hi);
            lo = mid;
            hi = mid;
        }
        let (lo, hi) = blocks.effective_bounds(lo, hi);
        let widths = block_widths(lo, hi, blocks)?;
        let krow_u = g_util.row(i);
        let shift: f64 = krow_u
            .iter()
            .zip(&utilities.rho)
            .map(|(k, r)| k * r)
            .sum();
        let m: Vec<f64> = utilities.intercepts.iter().map(|nu| nu + shift).collect();
        let inst = ForwardInstance {
            price: prices[i],
            utilities: m,
            widths,
            lower: lo,
            upper: hi,
        };
        forward_solve(&inst).map(|s| s.power)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CsrBuilder;
    use crate::qpsolve::{self, ConvexProgram, SolveOptions, SolveStatus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reported sync-case curve: utilities 42.7, 42.4×5; widths 38.7, 31.1×5;
    /// bounds [38.7, 194.2].
    fn reported_curve() -> ForwardInstance {
        ForwardInstance {
            price: 40.0,
            utilities: vec![42.7, 42.4, 42.4, 42.4, 42.4, 42.4],
            widths: BlockWidths {
                charging: vec![38.7, 31.1, 31.1, 31.1, 31.1, 31.1],
                discharging: vec![],
            },
            lower: 38.7,
            upper: 194.2,
        }
    }

    /// Independent oracle: the same instance as a linear program.
    fn lp_oracle(inst: &ForwardInstance) -> (f64, f64) {
        let cfg = BlockConfig {
            num_charging: inst.widths.charging.len(),
            num_discharging: inst.widths.discharging.len(),
        };
        let nb = cfg.total();
        let his = inst.widths.canonical_upper(&cfg);
        let los = inst.widths.canonical_lower(&cfg);
        let mut p = ConvexProgram::new(nb);
        for j in 0..nb {
            p.linear[j] = -(inst.utilities[j] - inst.price);
            p.lower[j] = los[j];
            p.upper[j] = his[j];
        }
        let mut g = CsrBuilder::new(nb);
        let all: Vec<(usize, f64)> = (0..nb).map(|j| (j, 1.0)).collect();
        let neg: Vec<(usize, f64)> = (0..nb).map(|j| (j, -1.0)).collect();
        g.push_row(&all);
        g.push_row(&neg);
        p.ineq = g.build();
        p.ineq_rhs = vec![inst.upper, -inst.lower];
        let sol = qpsolve::solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        (-sol.objective, sol.x.iter().sum())
    }

    #[test]
    fn low_price_charges_to_the_upper_bound() {
        let inst = reported_curve();
        let sol = forward_solve(&inst).unwrap();
        assert!((sol.power - 194.2).abs() < 1e-9);
        let (oracle_obj, _) = lp_oracle(&inst);
        assert!((sol.objective - oracle_obj).abs() < 1e-7);
    }

    #[test]
    fn high_price_forced_to_lower_bound() {
        let mut inst = reported_curve();
        inst.price = 100.0;
        let sol = forward_solve(&inst).unwrap();
        assert!((sol.power - 38.7).abs() < 1e-9);
        // Block 1 takes the whole forced amount.
        assert!((sol.blocks[0] - 38.7).abs() < 1e-9);
        assert!(sol.blocks[1..].iter().all(|&b| b == 0.0));
        let (oracle_obj, _) = lp_oracle(&inst);
        assert!((sol.objective - oracle_obj).abs() < 1e-7);
    }

    #[test]
    fn pinned_bounds_pin_the_power() {
        for price in [0.0, 40.0, 500.0] {
            let inst = ForwardInstance {
                price,
                utilities: vec![42.0, 41.0],
                widths: BlockWidths {
                    charging: vec![50.0, 50.0],
                    discharging: vec![],
                },
                lower: 70.0,
                upper: 70.0,
            };
            let sol = forward_solve(&inst).unwrap();
            assert!((sol.power - 70.0).abs() < 1e-9, "price {price}");
        }
    }

    #[test]
    fn discharge_when_price_above_utilities() {
        // λ above all utilities, negative lower bound: discharge as far as
        // the aggregate bound allows.
        let inst = ForwardInstance {
            price: 90.0,
            utilities: vec![70.0, 60.0, 50.0, 45.0],
            widths: BlockWidths {
                charging: vec![40.0, 40.0],
                discharging: vec![-25.0, -25.0],
            },
            lower: -30.0,
            upper: 80.0,
        };
        let sol = forward_solve(&inst).unwrap();
        assert!((sol.power - (-30.0)).abs() < 1e-9);
        let (oracle_obj, oracle_power) = lp_oracle(&inst);
        assert!((sol.objective - oracle_obj).abs() < 1e-7);
        assert!((sol.power - oracle_power).abs() < 1e-6);
    }

    #[test]
    fn rejects_increasing_utilities() {
        let inst = ForwardInstance {
            price: 10.0,
            utilities: vec![40.0, 45.0],
            widths: BlockWidths {
                charging: vec![10.0, 10.0],
                discharging: vec![],
            },
            lower: 0.0,
            upper: 20.0,
        };
        assert!(matches!(
            forward_solve(&inst),
            Err(ForwardError::InvalidInstance(_))
        ));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> ForwardInstance {
        let nc = rng.gen_range(1..=5usize);
        let nd = rng.gen_range(0..=3usize);
        let nb = nc + nd;
        let mut utilities: Vec<f64> = (0..nb).map(|_| rng.gen_range(10.0..90.0)).collect();
        utilities.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let charging: Vec<f64> = (0..nc).map(|_| rng.gen_range(0.0..60.0)).collect();
        let discharging: Vec<f64> = (0..nd).map(|_| -rng.gen_range(0.0..60.0)).collect();
        let hi_total: f64 = charging.iter().sum();
        let lo_total: f64 = discharging.iter().sum();
        // Bounds the widths can reach.
        let upper = rng.gen_range(lo_total.max(-20.0)..=hi_total.max(0.1));
        let lower = rng.gen_range(lo_total.min(upper)..=upper);
        ForwardInstance {
            price: rng.gen_range(0.0..100.0),
            utilities,
            widths: BlockWidths {
                charging,
                discharging,
            },
            lower,
            upper,
        }
    }

    #[test]
    fn greedy_matches_lp_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf0f0);
        for trial in 0..100 {
            let inst = random_instance(&mut rng);
            let sol = forward_solve(&inst).unwrap();
            let (oracle_obj, _) = lp_oracle(&inst);
            assert!(
                (sol.objective - oracle_obj).abs() <= 1e-8 * (1.0 + oracle_obj.abs()),
                "trial {trial}: greedy {} vs lp {oracle_obj}",
                sol.objective
            );
            // Greedy solution is feasible for the LP.
            assert!(sol.power >= inst.lower - 1e-9 && sol.power <= inst.upper + 1e-9);
        }
    }

    #[test]
    fn power_monotone_in_price() {
        let mut inst = reported_curve();
        inst.lower = 0.0;
        let mut prev = f64::INFINITY;
        for step in 0..60 {
            inst.price = step as f64;
            let sol = forward_solve(&inst).unwrap();
            assert!(
                sol.power <= prev + 1e-9,
                "price {} power {} prev {prev}",
                inst.price,
                sol.power
            );
            prev = sol.power;
        }
    }

    #[test]
    fn curve_csv_format() {
        let curve = BidCurve {
            bid: vec![(42.7, 38.7), (42.4, 31.1)],
            offer: vec![(45.0, 10.0)],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("block,side,price_eur_mwh,quantity_kw"));
        assert_eq!(lines.next(), Some("1,bid,42.7,38.7"));
        assert_eq!(lines.next(), Some("2,bid,42.4,31.1"));
        assert_eq!(lines.next(), Some("-1,offer,45,10"));
    }
}

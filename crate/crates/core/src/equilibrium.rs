//! Closed-form market equilibrium.
//!
//! Sorting schools by competitiveness ratio `gamma / q` also sorts the
//! equilibrium cutoffs, so the demand system is linear in that single order
//! and the equilibrium is `p* = max(0, A^{-1} (q - gamma / Gamma))`.

use serde::{Deserialize, Serialize};

use crate::demand::{demand, DemandResult};
use crate::error::{Error, Result};
use crate::market::{
    compensated_sum, prefix_sums, sort_by_competitiveness, CompensatedSum, CutoffVector,
    MarketParams, SortOrder,
};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    /// Equilibrium cutoffs in original order; the attached order is the
    /// competitiveness order.
    pub p_star: CutoffVector,
    /// Unclipped pre-image `A^{-1}(q - gamma/Gamma)`, sorted coordinates.
    pub p_bar: Vec<f64>,
    /// Number of leading sorted schools with zero cutoff.
    pub n_zero: usize,
    /// Demand at `p_star`, evaluated by the band sum.
    pub demand: DemandResult,
}

impl EquilibriumSolution {
    pub fn order(&self) -> &SortOrder {
        self.p_star.order()
    }

    pub fn cutoffs(&self) -> &[f64] {
        self.p_star.values()
    }

    /// 1-based index (sorted order) of the first school with positive cutoff;
    /// `n + 1` when every cutoff is zero.
    pub fn b_index(&self) -> usize {
        self.n_zero + 1
    }
}

/// Unclipped equilibrium pre-image in competitiveness order.
///
/// Applies the closed-form inverse: `p_bar_i = -(S_i / gamma_i) r_i - sum_{j>i} r_j`
/// with `r = q - gamma / Gamma`.
pub fn unclipped_cutoffs(params: &MarketParams, order: &SortOrder) -> Vec<f64> {
    let g = order.to_sorted(params.gamma());
    let q = order.to_sorted(params.capacity());
    let s = prefix_sums(&g);
    let total = *s.last().expect("market has schools");
    let n = g.len();
    let mut p_bar = vec![0.0; n];
    let mut above = CompensatedSum::default();
    for i in (0..n).rev() {
        let r = q[i] - g[i] / total;
        p_bar[i] = -(s[i] / g[i]) * r - above.value();
        above.add(r);
    }
    p_bar
}

pub fn solve(params: &MarketParams) -> EquilibriumSolution {
    let order = sort_by_competitiveness(params);
    let p_bar = unclipped_cutoffs(params, &order);
    let n_zero = p_bar.iter().position(|&v| v > 0.0).unwrap_or(p_bar.len());
    let clipped: Vec<f64> = p_bar.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let values = order.to_original(&clipped);
    let p_star = CutoffVector::with_order(values, order)
        .expect("clipped equilibrium cutoffs are sorted by competitiveness");
    let demand = demand(params, p_star.values()).expect("equilibrium cutoffs are in range");
    EquilibriumSolution {
        p_star,
        p_bar,
        n_zero,
        demand,
    }
}

/// Solves a batch of markets, in parallel when enabled.
pub fn solve_batch(markets: &[MarketParams], exec: Execution) -> Vec<EquilibriumSolution> {
    par::map(markets, exec, solve)
}

/// Equilibrium demand from the block form: `D_c = q_c` for positive-cutoff
/// schools and, for the `n_zero` leading schools,
/// `D_c = -gamma_c / S_{b-1} * sum_{j >= b} (q_j - gamma_j / Gamma) + gamma_c / Gamma`.
/// Appeal and unassigned mass come from the band sum at `p*`.
pub fn equilibrium_demand(params: &MarketParams, solution: &EquilibriumSolution) -> DemandResult {
    let order = solution.order();
    let g = order.to_sorted(params.gamma());
    let q = order.to_sorted(params.capacity());
    let total = params.total_weight();
    let nz = solution.n_zero;
    let head = compensated_sum(g[..nz].iter().copied());
    let surplus = compensated_sum((nz..g.len()).map(|j| q[j] - g[j] / total));
    let d_sorted: Vec<f64> = (0..g.len())
        .map(|c| {
            if c < nz {
                -g[c] / head * surplus + g[c] / total
            } else {
                q[c]
            }
        })
        .collect();
    let demand = order.to_original(&d_sorted);
    let unassigned = 1.0 - compensated_sum(demand.iter().copied());
    DemandResult {
        demand,
        appeal: solution.demand.appeal.clone(),
        unassigned: unassigned.max(0.0),
    }
}

/// Gap `p_bar_{c+1} - p_bar_c` between adjacent schools in competitiveness
/// order (`c` is a 0-based sorted position), computed as
/// `S_c (q_c / gamma_c - q_{c+1} / gamma_{c+1})` and cross-checked against the
/// difference of the unclipped cutoffs.
pub fn adjacent_gap(params: &MarketParams, c: usize) -> Result<f64> {
    let n = params.n_schools();
    if c + 1 >= n {
        return Err(Error::Config(format!(
            "adjacent gap needs 0 <= c < {}, got {c}",
            n.saturating_sub(1)
        )));
    }
    let order = sort_by_competitiveness(params);
    let g = order.to_sorted(params.gamma());
    let q = order.to_sorted(params.capacity());
    let s = prefix_sums(&g);
    let gap = s[c] * (q[c] / g[c] - q[c + 1] / g[c + 1]);
    let p_bar = unclipped_cutoffs(params, &order);
    let direct = p_bar[c + 1] - p_bar[c];
    let scale = 1.0f64.max(p_bar[c].abs()).max(p_bar[c + 1].abs());
    if (gap - direct).abs() > 1e-12 * scale {
        return Err(Error::Numeric(format!(
            "adjacent gap {gap:e} disagrees with cutoff difference {direct:e} at position {c}"
        )));
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::verify_equilibrium;

    #[test]
    fn pallet_town() {
        let m = MarketParams::pallet_town();
        let sol = solve(&m);
        let expected = [0.2, 0.3, 0.4, 0.6];
        for (p, e) in sol.cutoffs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert_eq!(sol.n_zero, 0);
        assert_eq!(sol.b_index(), 1);
        let d = equilibrium_demand(&m, &sol);
        for c in 0..4 {
            assert!((d.demand[c] - m.capacity()[c]).abs() < 1e-12);
            assert!((sol.demand.demand[c] - m.capacity()[c]).abs() < 1e-12);
        }
        let cert = verify_equilibrium(&m, sol.cutoffs(), 1e-10).unwrap();
        assert!(cert.is_equilibrium());
    }

    #[test]
    fn single_school() {
        let m = MarketParams::new(vec![1.0], vec![0.5]).unwrap();
        assert!((solve(&m).cutoffs()[0] - 0.5).abs() < 1e-15);
        let m = MarketParams::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(solve(&m).cutoffs()[0], 0.0);
        let m = MarketParams::new(vec![1.0], vec![3.0]).unwrap();
        let sol = solve(&m);
        assert_eq!(sol.cutoffs()[0], 0.0);
        assert_eq!(sol.b_index(), 2);
    }

    #[test]
    fn two_school_zero_cutoff_demand() {
        // School 0 is underdemanded (huge capacity); school 1 fills.
        let m = MarketParams::new(vec![1.0, 1.0], vec![10.0, 0.1]).unwrap();
        let sol = solve(&m);
        assert_eq!(sol.cutoffs()[0], 0.0);
        assert!(sol.cutoffs()[1] > 0.0);
        let closed = equilibrium_demand(&m, &sol);
        let direct = demand(&m, sol.cutoffs()).unwrap();
        for c in 0..2 {
            assert!((closed.demand[c] - direct.demand[c]).abs() < 1e-12);
        }
        // D_1 = q_1, D_0 = 1 - q_1 since nobody is left unassigned.
        assert!((direct.demand[1] - 0.1).abs() < 1e-12);
        assert!((direct.demand[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ample_capacity_gives_zero_cutoffs() {
        let m = MarketParams::new(vec![1.0, 2.0, 3.0], vec![0.2, 0.4, 0.6]).unwrap();
        let sol = solve(&m);
        assert!(sol.cutoffs().iter().all(|&p| p == 0.0));
        let d = equilibrium_demand(&m, &sol);
        for c in 0..3 {
            assert!((d.demand[c] - m.gamma()[c] / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacent_gaps_pallet() {
        let m = MarketParams::pallet_town();
        assert!((adjacent_gap(&m, 0).unwrap() - 0.1).abs() < 1e-12);
        assert!((adjacent_gap(&m, 1).unwrap() - 0.1).abs() < 1e-12);
        assert!((adjacent_gap(&m, 2).unwrap() - 0.2).abs() < 1e-12);
        assert!(adjacent_gap(&m, 3).is_err());
        let tied = MarketParams::new(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(adjacent_gap(&tied, 0).unwrap(), 0.0);
    }
}

//! Piecewise-linear demand and appeal under single-score MNL choice, plus the
//! equilibrium certificate.
//!
//! With cutoffs sorted ascending, a student with score in `[p_d, p_{d+1})`
//! (where `p_{n+1} = 1`) is admitted to exactly the first `d` schools and
//! picks school `c <= d` with probability `gamma_c / S_d`. Summing over those
//! consideration bands gives
//!
//! ```text
//! D_c = gamma_c * sum_{d >= c} (p_{d+1} - p_d) / S_d
//! L_c = gamma_c * sum_{d >= c} (p_{d+1}^2 - p_d^2) / (2 S_d)
//! ```
//!
//! which is `A p + gamma / Gamma` in matrix form. Evaluation here uses suffix
//! sums and never materializes `A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{check_cutoffs, compensated_sum, CompensatedSum, MarketParams, SortOrder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandResult {
    /// Enrollment mass per school, original order.
    pub demand: Vec<f64>,
    /// Integral of admitted scores per school, original order.
    pub appeal: Vec<f64>,
    /// Mass of students admitted nowhere (scores below every cutoff).
    pub unassigned: f64,
}

impl DemandResult {
    /// Excess demand `Z = D - q`.
    pub fn excess(&self, capacity: &[f64]) -> Vec<f64> {
        self.demand
            .iter()
            .zip(capacity)
            .map(|(d, q)| d - q)
            .collect()
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.demand.iter().copied())
    }
}

/// Demand and appeal at cutoffs `p` (original order).
pub fn demand(params: &MarketParams, p: &[f64]) -> Result<DemandResult> {
    demand_with_weights(params.gamma(), p)
}

/// Demand for bare weights; capacities play no role in demand.
pub fn demand_with_weights(gamma: &[f64], p: &[f64]) -> Result<DemandResult> {
    if p.len() != gamma.len() {
        return Err(Error::Dimension {
            expected: gamma.len(),
            got: p.len(),
        });
    }
    check_cutoffs(p)?;
    Ok(band_demand(gamma, p, &SortOrder::ascending_by(p)))
}

/// Demand with an explicit tie-break: `order` must sort `p` ascending, but
/// may arrange tied schools arbitrarily. The result does not depend on that
/// arrangement.
pub fn demand_in_order(gamma: &[f64], p: &[f64], order: &SortOrder) -> Result<DemandResult> {
    if p.len() != gamma.len() || order.len() != gamma.len() {
        return Err(Error::Dimension {
            expected: gamma.len(),
            got: p.len().min(order.len()),
        });
    }
    check_cutoffs(p)?;
    if !order.sorts(p) {
        return Err(Error::Config("order does not sort the cutoffs".into()));
    }
    Ok(band_demand(gamma, p, order))
}

/// Running weight totals in sorted coordinates where each block of tied
/// cutoffs is summed in original index order. Only the value at the end of a
/// tied block multiplies a nonzero band width, so this makes the result
/// bit-identical under any arrangement of ties.
fn tie_canonical_prefix(g: &[f64], ps: &[f64], order: &SortOrder) -> Vec<f64> {
    let n = g.len();
    let mut s = vec![0.0; n];
    let mut acc = CompensatedSum::default();
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end + 1 < n && ps[end + 1] == ps[k] {
            end += 1;
        }
        if end == k {
            acc.add(g[k]);
        } else {
            let mut block: Vec<usize> = (k..=end).collect();
            block.sort_by_key(|&i| order.school(i));
            for i in block {
                acc.add(g[i]);
            }
        }
        let total = acc.value();
        s[k..=end].iter_mut().for_each(|v| *v = total);
        k = end + 1;
    }
    s
}

fn band_demand(gamma: &[f64], p: &[f64], order: &SortOrder) -> DemandResult {
    let n = gamma.len();
    let g = order.to_sorted(gamma);
    let ps = order.to_sorted(p);
    let s = tie_canonical_prefix(&g, &ps, order);

    let mut d_sorted = vec![0.0; n];
    let mut l_sorted = vec![0.0; n];
    let mut mass = CompensatedSum::default();
    let mut score = CompensatedSum::default();
    for k in (0..n).rev() {
        let upper = if k + 1 < n { ps[k + 1] } else { 1.0 };
        let width = upper - ps[k];
        mass.add(width / s[k]);
        score.add(0.5 * (upper * upper - ps[k] * ps[k]) / s[k]);
        d_sorted[k] = g[k] * mass.value();
        l_sorted[k] = g[k] * score.value();
    }
    DemandResult {
        demand: order.to_original(&d_sorted),
        appeal: order.to_original(&l_sorted),
        unassigned: ps.first().copied().unwrap_or(1.0),
    }
}

/// How far a cutoff vector is from satisfying the equilibrium conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    /// `max(0, max_c (D_c - q_c))`.
    pub max_capacity_violation: f64,
    /// `max |D_c - q_c|` over schools with a positive cutoff.
    pub max_stability_violation: f64,
    /// `|F(p)^T p|` with `F = q - D`.
    pub ncp_residual: f64,
    /// `|sum D - min(1, sum q)|`, evaluated only when the other three
    /// violations are within tolerance.
    pub clearing_residual: Option<f64>,
    pub tol: f64,
}

impl EquilibriumCertificate {
    pub fn max_violation(&self) -> f64 {
        self.max_capacity_violation
            .max(self.max_stability_violation)
            .max(self.ncp_residual)
    }

    /// All conditions hold within `tol`, market clearing included.
    pub fn is_equilibrium(&self) -> bool {
        self.max_violation() <= self.tol && self.clearing_residual.is_some_and(|r| r <= self.tol)
    }
}

pub fn verify_equilibrium(
    params: &MarketParams,
    p: &[f64],
    tol: f64,
) -> Result<EquilibriumCertificate> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let dr = demand(params, p)?;
    let q = params.capacity();
    let mut cap = 0.0f64;
    let mut stab = 0.0f64;
    let mut ncp = CompensatedSum::default();
    for c in 0..q.len() {
        let z = dr.demand[c] - q[c];
        cap = cap.max(z);
        if p[c] > 0.0 {
            stab = stab.max(z.abs());
        }
        ncp.add(-z * p[c]);
    }
    let mut cert = EquilibriumCertificate {
        max_capacity_violation: cap,
        max_stability_violation: stab,
        ncp_residual: ncp.value().abs(),
        clearing_residual: None,
        tol,
    };
    if cert.max_violation() <= tol {
        let assigned = dr.total();
        cert.clearing_residual = Some((assigned - params.total_capacity().min(1.0)).abs());
    }
    Ok(cert)
}

/// One school's demand as a function of its own cutoff, others held fixed.
///
/// Piecewise linear, decreasing and convex on `[0, 1]`, with breakpoints at
/// the other schools' cutoffs and value zero at 1. On the piece where `j`
/// other schools have cutoff at or below `x`, the slope is
/// `-gamma_c / (gamma_c + G_j)`, `G_j` the weight of those `j` schools.
#[derive(Debug, Clone)]
pub struct SchoolDemandCurve {
    weight: f64,
    /// Other schools' cutoffs, ascending.
    knots: Vec<f64>,
    /// `cum[j]`: total weight of the first `j` knots.
    cum: Vec<f64>,
    /// `tail[j]`: contribution of the bands starting at knots `j..`.
    tail: Vec<f64>,
}

impl SchoolDemandCurve {
    /// Curve for `school` with weights `gamma` and the others' cutoffs taken
    /// from `p` (the entry `p[school]` is ignored).
    pub fn new(gamma: &[f64], p: &[f64], school: usize) -> Result<Self> {
        if p.len() != gamma.len() {
            return Err(Error::Dimension {
                expected: gamma.len(),
                got: p.len(),
            });
        }
        if school >= gamma.len() {
            return Err(Error::Config(format!(
                "school index {school} out of range for {} schools",
                gamma.len()
            )));
        }
        let mut others: Vec<usize> = (0..gamma.len()).filter(|&c| c != school).collect();
        let mut masked = p.to_vec();
        masked[school] = 0.0;
        check_cutoffs(&masked)?;
        others.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));

        let weight = gamma[school];
        let knots: Vec<f64> = others.iter().map(|&c| p[c]).collect();
        let mut cum = Vec::with_capacity(knots.len() + 1);
        let mut acc = CompensatedSum::default();
        cum.push(0.0);
        for &c in &others {
            acc.add(gamma[c]);
            cum.push(acc.value());
        }
        let m = knots.len();
        let mut tail = vec![0.0; m + 1];
        let mut acc = CompensatedSum::default();
        for k in (0..m).rev() {
            let upper = if k + 1 < m { knots[k + 1] } else { 1.0 };
            acc.add((upper - knots[k]) / (weight + cum[k + 1]));
            tail[k] = acc.value();
        }
        Ok(Self {
            weight,
            knots,
            cum,
            tail,
        })
    }

    fn admitted_below(&self, x: f64) -> usize {
        self.knots.partition_point(|&o| o <= x)
    }

    /// Demand at own cutoff `x`, clamped into `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let j = self.admitted_below(x);
        let next = self.knots.get(j).copied().unwrap_or(1.0);
        self.weight * ((next - x) / (self.weight + self.cum[j]) + self.tail[j])
    }

    /// Slope of the piece starting at `x` (right derivative).
    pub fn slope(&self, x: f64) -> f64 {
        let j = self.admitted_below(x.clamp(0.0, 1.0));
        -self.weight / (self.weight + self.cum[j])
    }

    /// Largest achievable demand (own cutoff at zero).
    pub fn max_demand(&self) -> f64 {
        self.eval(0.0)
    }

    /// Distinct breakpoints in `[0, 1]`, including both ends.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts = vec![0.0];
        for &o in &self.knots {
            if o > 0.0 && o < 1.0 && pts.last() != Some(&o) {
                pts.push(o);
            }
        }
        pts.push(1.0);
        pts
    }

    /// Exact own cutoff at which demand equals `target`, by scanning linear
    /// pieces. `None` if `target` exceeds [`max_demand`](Self::max_demand).
    /// Targets at or below zero map to cutoff 1.
    pub fn cutoff_for(&self, target: f64) -> Option<f64> {
        let top = self.max_demand();
        if target > top {
            return None;
        }
        if target <= 0.0 {
            return Some(1.0);
        }
        let pts = self.breakpoints();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let da = self.eval(a);
            if target > da {
                // Only reachable through rounding at the very first piece.
                return Some(a);
            }
            if target >= self.eval(b) {
                let j = self.admitted_below(a);
                let x = a + (da - target) * (self.weight + self.cum[j]) / self.weight;
                return Some(x.clamp(a, b));
            }
        }
        Some(1.0)
    }
}

//! Inverse problem: recover preferability weights from observed cutoffs and
//! demand, then use them to chart single-school demand curves.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::{demand_with_weights, SchoolDemandCurve};
use crate::error::{Error, Result};
use crate::market::{check_cutoffs, compensated_sum, CompensatedSum, SortOrder};
use crate::statics::unconstrained_jacobians_with_weights;

/// Slack allowed on the observation consistency checks.
pub const OBSERVATION_SLACK: f64 = 1e-9;
/// Smallest denominator the recursion accepts before declaring degeneracy.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Residual below which the root-finder reports success.
pub const ROOTFIND_TOL: f64 = 1e-9;

/// Observed cutoffs and demand shares of a set of schools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketObservation {
    labels: Vec<String>,
    cutoffs: Vec<f64>,
    demand: Vec<f64>,
}

impl MarketObservation {
    /// Validates cutoffs in `[0, 1)`, demand in `(0, 1]`, total demand at
    /// most one and each school's demand at most its qualified mass
    /// `1 - p_c`, all up to [`OBSERVATION_SLACK`].
    pub fn new(labels: Vec<String>, cutoffs: Vec<f64>, demand: Vec<f64>) -> Result<Self> {
        let n = cutoffs.len();
        if n == 0 {
            return Err(Error::Observation("no schools observed".into()));
        }
        for len in [labels.len(), demand.len()] {
            if len != n {
                return Err(Error::Dimension { expected: n, got: len });
            }
        }
        check_cutoffs(&cutoffs)?;
        for c in 0..n {
            let (p, d) = (cutoffs[c], demand[c]);
            if p >= 1.0 {
                return Err(Error::Observation(format!(
                    "school {} has cutoff 1; nobody qualifies",
                    labels[c]
                )));
            }
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Observation(format!(
                    "school {} has demand {d} outside (0, 1]",
                    labels[c]
                )));
            }
            if d > 1.0 - p + OBSERVATION_SLACK {
                return Err(Error::Observation(format!(
                    "school {} enrolls {d} but only {} qualifies",
                    labels[c],
                    1.0 - p
                )));
            }
        }
        let total = compensated_sum(demand.iter().copied());
        if total > 1.0 + OBSERVATION_SLACK {
            return Err(Error::Observation(format!("total demand {total} exceeds 1")));
        }
        Ok(Self {
            labels,
            cutoffs,
            demand,
        })
    }

    /// Observation with labels `0, 1, ...`.
    pub fn unlabeled(cutoffs: Vec<f64>, demand: Vec<f64>) -> Result<Self> {
        let labels = (0..cutoffs.len()).map(|c| c.to_string()).collect();
        Self::new(labels, cutoffs, demand)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn cutoffs(&self) -> &[f64] {
        &self.cutoffs
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn n_schools(&self) -> usize {
        self.cutoffs.len()
    }

    /// `D_c / (1 - p_c)`: share of qualified students who enroll.
    pub fn true_yield(&self) -> Vec<f64> {
        self.demand
            .iter()
            .zip(&self.cutoffs)
            .map(|(d, p)| d / (1.0 - p))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMethod {
    Recursion,
    RootFinder,
}

impl std::fmt::Display for InversionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InversionMethod::Recursion => "recursion",
            InversionMethod::RootFinder => "rootfind",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferabilityEstimate {
    /// Weights normalized to sum to one, original school order.
    pub gamma: Vec<f64>,
    pub method: InversionMethod,
    /// `max_c |D_c(gamma, p_obs) - D_obs,c|`.
    pub residual: f64,
    pub true_yield: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn normalize(gamma: &mut [f64]) {
    let total = compensated_sum(gamma.iter().copied());
    for g in gamma.iter_mut() {
        *g /= total;
    }
}

fn forward_residual(obs: &MarketObservation, gamma: &[f64]) -> Result<f64> {
    let d = demand_with_weights(gamma, &obs.cutoffs)?.demand;
    Ok(d.iter()
        .zip(&obs.demand)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Backward recursion over schools sorted by cutoff: the most selective
/// school gets `D / (1 - p)`, and each earlier school divides its demand by
/// the sum of band widths over the weight of the schools admitting there,
/// `1 - (weight of more selective schools)`.
///
/// Tied cutoffs need no special care: a tie is a band of zero width. They
/// are still logged since real data with ties usually signals rounding.
pub fn invert_recursion(obs: &MarketObservation) -> Result<PreferabilityEstimate> {
    let n = obs.n_schools();
    let order = SortOrder::ascending_by(&obs.cutoffs);
    let ps = order.to_sorted(&obs.cutoffs);
    let ds = order.to_sorted(&obs.demand);
    if let Some(k) = ps.windows(2).position(|w| w[0] == w[1]) {
        log::warn!(
            "schools {} and {} share cutoff {}",
            obs.labels[order.school(k)],
            obs.labels[order.school(k + 1)],
            ps[k]
        );
    }

    let mut gs = vec![0.0; n];
    let mut more_selective = CompensatedSum::default();
    let mut bands = CompensatedSum::default();
    for k in (0..n).rev() {
        let school = order.school(k);
        let upper = if k + 1 < n { ps[k + 1] } else { 1.0 };
        let width = upper - ps[k];
        if width > 0.0 {
            let admitting = 1.0 - more_selective.value();
            if admitting < DEGENERACY_TOL {
                return Err(Error::Degenerate {
                    school,
                    reason: format!("weight left for the band above it is {admitting:e}"),
                });
            }
            bands.add(width / admitting);
        }
        let denom = bands.value();
        if denom < DEGENERACY_TOL {
            return Err(Error::Degenerate {
                school,
                reason: format!("band sum {denom:e} is too small"),
            });
        }
        let g = ds[k] / denom;
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::Degenerate {
                school,
                reason: format!("recovered weight {g:e} is not positive"),
            });
        }
        gs[k] = g;
        more_selective.add(g);
    }

    let mut gamma = order.to_original(&gs);
    normalize(&mut gamma);
    let residual = forward_residual(obs, &gamma)?;
    Ok(PreferabilityEstimate {
        gamma,
        method: InversionMethod::Recursion,
        residual,
        true_yield: obs.true_yield(),
        converged: true,
        iterations: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootFindConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RootFindConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: ROOTFIND_TOL,
        }
    }
}

/// Residual vector `[D(gamma, p) - D_obs; sum(gamma) - 1]`.
fn residual_vector(obs: &MarketObservation, gamma: &[f64]) -> Result<DVector<f64>> {
    let n = gamma.len();
    let d = demand_with_weights(gamma, &obs.cutoffs)?.demand;
    let mut r = DVector::zeros(n + 1);
    for c in 0..n {
        r[c] = d[c] - obs.demand[c];
    }
    r[n] = compensated_sum(gamma.iter().copied()) - 1.0;
    Ok(r)
}

/// Solves `D(gamma, p_obs) = D_obs` with `sum(gamma) = 1` by Levenberg-Marquardt
/// in log-weights, starting from the recursion output or uniform weights.
/// Each step solves the damped least-squares system by QR.
///
/// Never fails on non-convergence: the estimate comes back with
/// `converged = false` and the best residual found.
pub fn invert_rootfind(obs: &MarketObservation) -> Result<PreferabilityEstimate> {
    invert_rootfind_with(obs, &RootFindConfig::default())
}

pub fn invert_rootfind_with(
    obs: &MarketObservation,
    config: &RootFindConfig,
) -> Result<PreferabilityEstimate> {
    let n = obs.n_schools();
    let mut gamma = match invert_recursion(obs) {
        Ok(est) => est.gamma,
        Err(e) => {
            log::info!("recursion unavailable ({e}); root-finder starts from uniform weights");
            vec![1.0 / n as f64; n]
        }
    };
    let mut r = residual_vector(obs, &gamma)?;
    let mut cost = r.norm_squared();
    let mut lambda: f64 = 1e-6;
    let mut iterations = 0;

    while iterations < config.max_iters && r.amax() >= 1e-15 {
        iterations += 1;
        let jd = unconstrained_jacobians_with_weights(&gamma, &obs.cutoffs)?.weight_demand;
        // Chain rule through gamma = exp(x).
        let mut jac = DMatrix::zeros(n + 1, n);
        for c in 0..n {
            for h in 0..n {
                jac[(c, h)] = jd[(c, h)] * gamma[h];
            }
        }
        for h in 0..n {
            jac[(n, h)] = gamma[h];
        }
        let scale: Vec<f64> = (0..n)
            .map(|h| jac.column(h).norm().max(1e-300))
            .collect();

        let mut improved = false;
        for _ in 0..30 {
            let mut aug = DMatrix::zeros(2 * n + 1, n);
            aug.view_mut((0, 0), (n + 1, n)).copy_from(&jac);
            for h in 0..n {
                aug[(n + 1 + h, h)] = lambda.sqrt() * scale[h];
            }
            let mut rhs = DVector::zeros(2 * n + 1);
            rhs.rows_mut(0, n + 1).copy_from(&(-&r));
            let qr = aug.qr();
            let qtb = qr.q().transpose() * rhs;
            let Some(step) = qr.r().solve_upper_triangular(&qtb.rows(0, n).into_owned()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = gamma
                .iter()
                .zip(step.iter())
                .map(|(g, dx)| g * dx.clamp(-5.0, 5.0).exp())
                .collect();
            let r_trial = residual_vector(obs, &trial)?;
            let trial_cost = r_trial.norm_squared();
            if trial_cost < cost {
                gamma = trial;
                r = r_trial;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }

    normalize(&mut gamma);
    let residual = forward_residual(obs, &gamma)?;
    Ok(PreferabilityEstimate {
        gamma,
        method: InversionMethod::RootFinder,
        residual,
        true_yield: obs.true_yield(),
        converged: residual < config.tol,
        iterations,
    })
}

/// Recursion when it succeeds, otherwise the root-finder.
pub fn invert_auto(obs: &MarketObservation) -> Result<PreferabilityEstimate> {
    match invert_recursion(obs) {
        Ok(est) => Ok(est),
        Err(e @ Error::Degenerate { .. }) => {
            log::warn!("{e}; falling back to the root-finder");
            invert_rootfind(obs)
        }
        Err(e) => Err(e),
    }
}

/// Demand of `school` at each grid value of its own cutoff, other cutoffs
/// fixed at `p`.
pub fn demand_curve(
    gamma: &[f64],
    p: &[f64],
    school: usize,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_cutoffs(grid)?;
    let curve = SchoolDemandCurve::new(gamma, p, school)?;
    Ok(grid.iter().map(|&x| (x, curve.eval(x))).collect())
}

/// `n + 1` evenly spaced points from `lo` to `hi`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n)
        .map(|i| {
            if i == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / n as f64
            }
        })
        .collect()
}

/// Own cutoff at which `school`'s demand equals `target`, other cutoffs fixed.
pub fn target_cutoff(gamma: &[f64], p: &[f64], school: usize, target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::Config(format!("target demand must be positive, got {target}")));
    }
    let curve = SchoolDemandCurve::new(gamma, p, school)?;
    curve.cutoff_for(target).ok_or(Error::Infeasible {
        target,
        max: curve.max_demand(),
    })
}

/// Cutoff from the line through the observed point `(p_obs, d_obs)` and
/// `(1, 0)`, i.e. holding the true yield fixed.
pub fn linear_target_cutoff(p_obs: f64, d_obs: f64, target: f64) -> f64 {
    (1.0 - target / d_obs * (1.0 - p_obs)).max(0.0)
}

/// Table of estimates ranked by descending weight, columns
/// `rank,name,demand_count,cutoff,yield,true_yield,gamma`. Demand counts are
/// shares times `population`; the observed-yield column is left empty when
/// not supplied.
pub fn write_estimates_csv<W: Write>(
    obs: &MarketObservation,
    est: &PreferabilityEstimate,
    population: f64,
    observed_yield: Option<&[Option<f64>]>,
    out: W,
) -> Result<()> {
    let n = obs.n_schools();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| est.gamma[b].total_cmp(&est.gamma[a]).then(a.cmp(&b)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "name",
        "demand_count",
        "cutoff",
        "yield",
        "true_yield",
        "gamma",
    ])?;
    for (rank, &c) in idx.iter().enumerate() {
        let y = observed_yield
            .and_then(|y| y.get(c).copied().flatten())
            .map(|y| y.to_string())
            .unwrap_or_default();
        w.write_record([
            (rank + 1).to_string(),
            obs.labels[c].clone(),
            (obs.demand[c] * population).to_string(),
            obs.cutoffs[c].to_string(),
            y,
            est.true_yield[c].to_string(),
            est.gamma[c].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Iterative equilibrium dynamics: the simultaneous tâtonnement with a
//! decreasing step schedule, and the deferred-acceptance style process in
//! which every school jumps to the cutoff clearing its own demand.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::demand::{demand, SchoolDemandCurve};
use crate::error::{Error, Result};
use crate::market::{check_cutoffs, MarketParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TatonnementConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub initial: Vec<f64>,
}

impl TatonnementConfig {
    pub fn new(alpha: f64, beta: f64, epsilon: f64, max_iters: usize, initial: Vec<f64>) -> Self {
        Self {
            alpha,
            beta,
            epsilon,
            max_iters,
            initial,
        }
    }

    pub fn validate(&self, n_schools: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.initial.len() != n_schools {
            return Err(Error::Dimension {
                expected: n_schools,
                got: self.initial.len(),
            });
        }
        check_cutoffs(&self.initial)
    }
}

/// Step size `alpha / (k + 1)^beta` at iteration `k`.
pub fn step_size(alpha: f64, beta: f64, k: usize) -> f64 {
    alpha / ((k + 1) as f64).powf(beta)
}

/// Infinite step schedule. Its partial sums diverge for `beta < 1`.
pub fn step_schedule(alpha: f64, beta: f64) -> impl Iterator<Item = f64> {
    (0..).map(move |k| step_size(alpha, beta, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub iter: usize,
    pub cutoffs: Vec<f64>,
    /// Excess demand `D - q` at `cutoffs`.
    pub excess: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// One entry per demand evaluation, starting with the initial point.
    pub iterates: Vec<Iterate>,
    pub converged: bool,
    /// Cutoffs after the last update.
    pub final_cutoffs: Vec<f64>,
}

impl Trajectory {
    /// Long-format CSV: `iter,school_id,p,Z`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "school_id", "p", "Z"])?;
        for it in &self.iterates {
            for (c, (p, z)) in it.cutoffs.iter().zip(&it.excess).enumerate() {
                w.write_record([
                    it.iter.to_string(),
                    c.to_string(),
                    p.to_string(),
                    z.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Simultaneous tâtonnement:
/// `p_{k+1} = clamp(p_k + alpha / (k+1)^beta * Z(p_k), 0, 1)`, stopping once
/// no cutoff moves by `epsilon` or more, or after `max_iters` updates.
pub fn simultaneous_tatonnement(
    params: &MarketParams,
    config: &TatonnementConfig,
) -> Result<Trajectory> {
    config.validate(params.n_schools())?;
    let q = params.capacity();
    let mut p = config.initial.clone();
    let mut iterates = Vec::with_capacity(config.max_iters.min(1 << 16));
    for k in 0..config.max_iters {
        let excess = demand(params, &p)?.excess(q);
        let step = step_size(config.alpha, config.beta, k);
        let next: Vec<f64> = p
            .iter()
            .zip(&excess)
            .map(|(pc, z)| (pc + step * z).clamp(0.0, 1.0))
            .collect();
        let moved = max_abs_diff(&next, &p);
        iterates.push(Iterate {
            iter: k,
            cutoffs: std::mem::replace(&mut p, next),
            excess,
        });
        if moved < config.epsilon {
            return Ok(Trajectory {
                iterates,
                converged: true,
                final_cutoffs: p,
            });
        }
    }
    Ok(Trajectory {
        iterates,
        converged: false,
        final_cutoffs: p,
    })
}

/// Tolerance below which two successive DA-process iterates count as equal.
pub const DA_FIXED_POINT_TOL: f64 = 1e-12;

/// Deferred-acceptance tâtonnement: each round, every school whose demand
/// differs from its capacity moves to the cutoff that clears its own demand
/// with the other cutoffs held at their current values, or to zero when no
/// such cutoff exists. All schools update from the same iterate.
pub fn da_tatonnement(params: &MarketParams, p0: &[f64], max_rounds: usize) -> Result<Trajectory> {
    let n = params.n_schools();
    if p0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: p0.len(),
        });
    }
    check_cutoffs(p0)?;
    if max_rounds == 0 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    let q = params.capacity();
    let gamma = params.gamma();
    let mut p = p0.to_vec();
    let mut iterates = Vec::new();
    for k in 0..max_rounds {
        let excess = demand(params, &p)?.excess(q);
        let mut next = p.clone();
        for c in 0..n {
            if excess[c] == 0.0 {
                continue;
            }
            let curve = SchoolDemandCurve::new(gamma, &p, c)?;
            next[c] = curve.cutoff_for(q[c]).unwrap_or(0.0);
        }
        let moved = max_abs_diff(&next, &p);
        iterates.push(Iterate {
            iter: k,
            cutoffs: std::mem::replace(&mut p, next),
            excess,
        });
        if moved <= DA_FIXED_POINT_TOL {
            return Ok(Trajectory {
                iterates,
                converged: true,
                final_cutoffs: p,
            });
        }
    }
    Ok(Trajectory {
        iterates,
        converged: false,
        final_cutoffs: p,
    })
}
